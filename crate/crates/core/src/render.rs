//! Figure rendering (traversal grids, reconstruction panels) and CSV series.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::LatentBatch;
use crate::objectives::{LossCurves, LossPoint, Vae};
use crate::shapes::ImageBatch;
use crate::whitening::WhiteningTransform;

pub const DEFAULT_RANGE: [f64; 2] = [-2.0, 2.0];
pub const GUTTER: f64 = 128.0 / 255.0;

/// Grayscale raster with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}×{height} image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bytes as written to a PGM body.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Sub-image at tile `(row, col)` of a grid of `tw × th` tiles with
    /// 1-pixel gutters.
    pub fn tile(&self, row: usize, col: usize, tw: usize, th: usize) -> GrayImage {
        let (x0, y0) = (col * (tw + 1), row * (th + 1));
        let data = (0..th)
            .flat_map(|y| (0..tw).map(move |x| (x0 + x, y0 + y)))
            .map(|(x, y)| self.get(x, y))
            .collect();
        GrayImage {
            width: tw,
            height: th,
            data,
        }
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lays equally sized tiles out row by row with 1-pixel mid-gray gutters.
/// The result is `cols·w + cols − 1` wide and `rows·h + rows − 1` tall.
pub fn compose_grid(rows: &[Vec<GrayImage>]) -> Result<GrayImage> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
    let (tw, th) = (first.width, first.height);
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols)
        || rows.iter().flatten().any(|t| t.width != tw || t.height != th)
    {
        return Err(Error::InvalidArgument(
            "grid tiles must form a full rectangle of equal sizes".into(),
        ));
    }
    let width = cols * tw + cols - 1;
    let height = rows.len() * th + rows.len() - 1;
    let mut out = GrayImage::filled(width, height, GUTTER);
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let (x0, y0) = (c * (tw + 1), r * (th + 1));
            for y in 0..th {
                let dst = (y0 + y) * width + x0;
                out.data[dst..dst + tw].copy_from_slice(&tile.data[y * tw..(y + 1) * tw]);
            }
        }
    }
    Ok(out)
}

/// Linearly spaced sweep of `steps` values over `[lo, hi]`.
pub fn sweep(range: [f64; 2], steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("steps must be ≥ 2, got {steps}")));
    }
    let [lo, hi] = range;
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite range [{lo}, {hi}]")));
    }
    Ok((0..steps)
        .map(|i| lo + (hi - lo) * (i as f64 / (steps - 1) as f64))
        .collect())
}

/// Decoder inputs of a traversal: one row per entry of `dims`, one code per
/// sweep value. With a transform, `z_base` and the sweep live in whitened
/// coordinates and every code is unwhitened before decoding.
pub fn traversal_codes(
    transform: Option<&WhiteningTransform>,
    z_base: &[f64],
    dims: &[usize],
    range: [f64; 2],
    steps: usize,
) -> Result<Vec<LatentBatch>> {
    let values = sweep(range, steps)?;
    let d = z_base.len();
    if let Some(t) = transform {
        if t.dim() != d {
            return Err(Error::InvalidArgument(format!(
                "transform is {}-dimensional, base code has {d} entries",
                t.dim()
            )));
        }
    }
    if dims.is_empty() {
        return Err(Error::InvalidArgument("no traversal dimensions".into()));
    }
    dims.iter()
        .map(|&j| {
            if j >= d {
                return Err(Error::InvalidArgument(format!(
                    "traversal dimension {j} out of range for a {d}-d latent"
                )));
            }
            let mut data = Vec::with_capacity(steps * d);
            for &v in &values {
                let mut z = z_base.to_vec();
                z[j] = v;
                match transform {
                    Some(t) => data.extend(t.unwhiten(&z)?),
                    None => data.extend(z),
                }
            }
            LatentBatch::new(steps, d, data)
        })
        .collect()
}

fn decode_tiles(model: &Vae, z: &LatentBatch, width: usize, height: usize) -> Result<Vec<GrayImage>> {
    if width * height != model.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "tile {width}×{height} does not match the model's {} outputs",
            model.input_dim()
        )));
    }
    let probs = model.decode_probs(z)?;
    probs
        .data()
        .chunks(width * height)
        .map(|c| GrayImage::new(width, height, c.to_vec()))
        .collect()
}

/// Latent traversal figure. Row `r` varies `dims[r]` across `steps`
/// columns; column 0 holds the `anchor` image.
pub fn traversal_grid(
    model: &Vae,
    transform: Option<&WhiteningTransform>,
    z_base: &[f64],
    anchor: &GrayImage,
    dims: &[usize],
    range: [f64; 2],
    steps: usize,
) -> Result<GrayImage> {
    if z_base.len() != model.latent_dim() {
        return Err(Error::InvalidArgument(format!(
            "model is {}-dimensional, base code has {} entries",
            model.latent_dim(),
            z_base.len()
        )));
    }
    let codes = traversal_codes(transform, z_base, dims, range, steps)?;
    let rows = codes
        .iter()
        .map(|z| {
            let mut row = vec![anchor.clone()];
            row.extend(decode_tiles(model, z, anchor.width, anchor.height)?);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    compose_grid(&rows)
}

/// Two-row panel: inputs on top, decoded posterior means below.
pub fn reconstruction_panel(model: &Vae, images: &ImageBatch) -> Result<GrayImage> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to reconstruct".into()));
    }
    let (w, h) = (images.width(), images.height());
    let originals = (0..images.len())
        .map(|i| GrayImage::new(w, h, images.image(i).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let z = model.encode_images(images)?;
    let recons = decode_tiles(model, &z, w, h)?;
    compose_grid(&[originals, recons])
}

pub fn pgm_bytes(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_bytes());
    out
}

pub fn write_pgm(image: &GrayImage, path: &Path) -> Result<()> {
    if let Some(bad) = image.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain {
            op: "write_pgm",
            detail: format!("intensity {bad} outside [0, 1]"),
        });
    }
    fs::write(path, pgm_bytes(image))?;
    Ok(())
}

pub fn curves_to_csv(curves: &LossCurves) -> String {
    let mut out = String::from("epoch,recon,kl,tc\n");
    for p in &curves.points {
        let _ = writeln!(out, "{},{},{},{}", p.epoch, p.recon, p.kl, p.tc);
    }
    out
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad number {s:?} on line {line}")))
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad integer {s:?} on line {line}")))
}

fn csv_rows<'a>(text: &'a str, header: &str, width: usize) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Format(format!("expected header {header:?}")));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != width {
                return Err(Error::Format(format!(
                    "line {} has {} fields, expected {width}",
                    i + 2,
                    f.len()
                )));
            }
            Ok((i + 2, f))
        })
        .collect()
}

pub fn curves_from_csv(text: &str) -> Result<LossCurves> {
    let points = csv_rows(text, "epoch,recon,kl,tc", 4)?
        .into_iter()
        .map(|(n, f)| {
            Ok(LossPoint {
                epoch: parse_usize(f[0], n)?,
                recon: parse_f64(f[1], n)?,
                kl: parse_f64(f[2], n)?,
                tc: parse_f64(f[3], n)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossCurves { points })
}

pub fn write_curves(curves: &LossCurves, path: &Path) -> Result<()> {
    if curves.points.is_empty() {
        return Err(Error::InvalidArgument("empty loss curves".into()));
    }
    fs::write(path, curves_to_csv(curves))?;
    Ok(())
}

pub fn read_curves(path: &Path) -> Result<LossCurves> {
    curves_from_csv(&fs::read_to_string(path)?)
}

/// Rows `rank,eigenvalue` with ranks starting at 1.
pub fn spectrum_to_csv(eigenvalues: &[f64]) -> String {
    let mut out = String::from("rank,eigenvalue\n");
    for (i, l) in eigenvalues.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, l);
    }
    out
}

pub fn spectrum_from_csv(text: &str) -> Result<Vec<f64>> {
    csv_rows(text, "rank,eigenvalue", 2)?
        .into_iter()
        .map(|(n, f)| parse_f64(f[1], n))
        .collect()
}

pub fn write_spectrum(eigenvalues: &[f64], path: &Path) -> Result<()> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidArgument("empty spectrum".into()));
    }
    fs::write(path, spectrum_to_csv(eigenvalues))?;
    Ok(())
}

pub fn read_spectrum(path: &Path) -> Result<Vec<f64>> {
    spectrum_from_csv(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::objectives::VaeArch;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Vae {
        let arch = VaeArch {
            input_dim: 16,
            hidden: vec![8],
            latent_dim: 3,
            activation: Activation::Relu,
        };
        Vae::new(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn fitted_transform(m: &Vae, seed: u64) -> WhiteningTransform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..40 * 16).map(|_| rng.gen()).collect();
        let images = ImageBatch::new(40, 4, 4, data).unwrap();
        WhiteningTransform::fit(&m.encode_images(&images).unwrap()).unwrap()
    }

    #[test]
    fn pgm_examples() {
        let white = GrayImage::filled(2, 2, 1.0);
        let bytes = pgm_bytes(&white);
        let mut expected = b"P5\n2 2\n255\n".to_vec();
        expected.extend([255; 4]);
        assert_eq!(bytes, expected);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.pgm");
        write_pgm(&white, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), expected);
        assert!(write_pgm(&GrayImage::filled(1, 1, 1.5), &p).is_err());
    }

    #[test]
    fn grid_geometry() {
        let tiles: Vec<Vec<GrayImage>> = (0..2)
            .map(|r| (0..3).map(|c| GrayImage::filled(32, 32, (r * 3 + c) as f64 / 10.0)).collect())
            .collect();
        let grid = compose_grid(&tiles).unwrap();
        assert_eq!((grid.width, grid.height), (3 * 32 + 2, 2 * 32 + 1));
        let header = format!("P5\n{} {}\n255\n", 98, 65);
        assert_eq!(pgm_bytes(&grid).len(), header.len() + 98 * 65);
        assert_eq!(grid.get(32, 0), GUTTER);
        assert_eq!(grid.get(0, 32), GUTTER);
        assert_eq!(quantize(grid.get(32, 0)), 128);
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(grid.tile(r, c, 32, 32), tiles[r][c]);
            }
        }
        assert!(compose_grid(&[vec![GrayImage::filled(2, 2, 0.0), GrayImage::filled(3, 2, 0.0)]]).is_err());
        assert!(compose_grid(&[]).is_err());
    }

    #[test]
    fn traversal_grid_geometry_and_errors() {
        let m = model(1);
        let anchor = GrayImage::filled(4, 4, 0.0);
        let g = traversal_grid(&m, None, &[0.0; 3], &anchor, &[0], DEFAULT_RANGE, 2).unwrap();
        assert_eq!((g.width, g.height), (3 * 4 + 2, 4));
        assert_eq!(g.tile(0, 0, 4, 4), anchor);
        assert!(traversal_grid(&m, None, &[0.0; 3], &anchor, &[3], DEFAULT_RANGE, 2).is_err());
        assert!(traversal_grid(&m, None, &[0.0; 3], &anchor, &[0], DEFAULT_RANGE, 1).is_err());
        assert!(traversal_grid(&m, None, &[0.0; 2], &anchor, &[0], DEFAULT_RANGE, 2).is_err());
    }

    #[test]
    fn sweep_point_at_base_reproduces_base_decode() {
        let m = model(2);
        let t = fitted_transform(&m, 3);
        let base = [0.5, -1.0, 0.0];
        let anchor = GrayImage::filled(4, 4, 0.0);
        for tr in [None, Some(&t)] {
            let grid = traversal_grid(&m, tr, &base, &anchor, &[1], [-1.0, 1.0], 3).unwrap();
            let raw = match tr {
                Some(t) => t.unwhiten(&base).unwrap(),
                None => base.to_vec(),
            };
            let expected = m.decode_probs(&LatentBatch::new(1, 3, raw).unwrap()).unwrap();
            assert_eq!(grid.tile(0, 1, 4, 4).data, expected.data());
        }
    }

    /// Composing unwhiten by hand: mean + U·diag(√Λ)·z_w, with z_w = base
    /// except coordinate j set to the sweep value.
    #[test]
    fn whitened_traversal_moves_along_scaled_eigenvector() {
        let m = model(4);
        let t = fitted_transform(&m, 5);
        let d = 3;
        let base = [0.3, -0.2, 0.7];
        for j in 0..d {
            let codes = traversal_codes(Some(&t), &base, &[j], DEFAULT_RANGE, 5).unwrap();
            let values = sweep(DEFAULT_RANGE, 5).unwrap();
            for (s, &v) in values.iter().enumerate() {
                let mut zw = base;
                zw[j] = v;
                for k in 0..d {
                    let mut expected = t.mean[k];
                    for q in 0..d {
                        expected += t.eigvecs[k * d + q] * t.eigvals[q].sqrt() * zw[q];
                    }
                    assert!((codes[0].get(s, k) - expected).abs() <= 1e-9);
                }
                if s > 0 {
                    // consecutive codes differ by a multiple of √Λ_j·U_j
                    let step = values[s] - values[s - 1];
                    for k in 0..d {
                        let delta = codes[0].get(s, k) - codes[0].get(s - 1, k);
                        let dir = t.eigvecs[k * d + j] * t.eigvals[j].sqrt();
                        assert!((delta - step * dir).abs() <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn collapsed_range_equals_reconstruction_panel() {
        let m = model(6);
        let t = fitted_transform(&m, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let images = ImageBatch::new(1, 4, 4, img.clone()).unwrap();
        let panel = reconstruction_panel(&m, &images).unwrap();
        let recon = panel.tile(1, 0, 4, 4);
        assert_eq!(panel.tile(0, 0, 4, 4).data, img);

        let z = m.encode_images(&images).unwrap();
        let zw = t.whiten(z.row(0)).unwrap();
        let anchor = GrayImage::new(4, 4, img).unwrap();
        for j in 0..3 {
            let grid =
                traversal_grid(&m, Some(&t), &zw, &anchor, &[j], [zw[j], zw[j]], 3).unwrap();
            for c in 1..4 {
                assert_eq!(grid.tile(0, c, 4, 4).to_bytes(), recon.to_bytes());
            }
        }
    }

    #[test]
    fn curves_csv_examples() {
        let curves = LossCurves {
            points: vec![LossPoint {
                epoch: 0,
                recon: 1.5,
                kl: 0.2,
                tc: 0.0,
            }],
        };
        assert_eq!(curves_to_csv(&curves), "epoch,recon,kl,tc\n0,1.5,0.2,0\n");
        assert_eq!(curves_from_csv(&curves_to_csv(&curves)).unwrap(), curves);
        assert!(write_curves(&LossCurves::default(), Path::new("/nonexistent")).is_err());
        assert!(curves_from_csv("epoch,recon\n").is_err());
    }

    #[test]
    fn spectrum_csv_example() {
        let s = [3.25, 1.0 / 3.0, 1e-300];
        let csv = spectrum_to_csv(&s);
        assert!(csv.starts_with("rank,eigenvalue\n1,3.25\n"));
        assert_eq!(spectrum_from_csv(&csv).unwrap(), s);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_spectrum(&s, &p).unwrap();
        assert_eq!(read_spectrum(&p).unwrap(), s);
    }

    proptest! {
        #[test]
        fn curves_csv_round_trip_bitwise(
            rows in proptest::collection::vec(
                (any::<f64>(), any::<f64>(), any::<f64>()), 1..20)
        ) {
            let rows: Vec<_> = rows.into_iter().filter(|(a, b, c)| a.is_finite() && b.is_finite() && c.is_finite()).collect();
            prop_assume!(!rows.is_empty());
            let curves = LossCurves {
                points: rows.iter().enumerate().map(|(i, &(recon, kl, tc))| LossPoint { epoch: i, recon, kl, tc }).collect(),
            };
            let back = curves_from_csv(&curves_to_csv(&curves)).unwrap();
            for (a, b) in back.points.iter().zip(&curves.points) {
                prop_assert_eq!(a.recon.to_bits(), b.recon.to_bits());
                prop_assert_eq!(a.kl.to_bits(), b.kl.to_bits());
                prop_assert_eq!(a.tc.to_bits(), b.tc.to_bits());
            }
        }

        #[test]
        fn spectrum_csv_round_trip_bitwise(values in proptest::collection::vec(0.0f64..1e9, 1..16)) {
            let back = spectrum_from_csv(&spectrum_to_csv(&values)).unwrap();
            prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
