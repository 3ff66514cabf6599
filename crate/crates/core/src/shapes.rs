//! Procedural 2D-shapes corpus with ground-truth factors, plus the IDX
//! container used by MNIST.
//!
//! Every image is a pure function of its [`FactorTuple`]: a square, ellipse
//! or triangle rasterised by testing each pixel centre against the shape
//! after undoing rotation and translation.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_FACTORS: usize = 5;
pub const FACTOR_NAMES: [&str; NUM_FACTORS] = ["shape", "scale", "orientation", "pos_x", "pos_y"];

pub const SHAPE: usize = 0;
pub const SCALE: usize = 1;
pub const ORIENTATION: usize = 2;
pub const POS_X: usize = 3;
pub const POS_Y: usize = 4;

// Shape half-extent as a fraction of the canvas, over the scale grid.
const MIN_EXTENT: f64 = 0.075;
const MAX_EXTENT: f64 = 0.225;
const ELLIPSE_MINOR: f64 = 0.6;

/// `N × H × W` intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    n: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(n: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * height * width {
            return Err(Error::InvalidArgument(format!(
                "image batch {n}×{height}×{width} needs {} values, got {}",
                n * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain {
                op: "image batch",
                detail: format!("intensity {bad} outside [0, 1]"),
            });
        }
        Ok(Self {
            n,
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            n: 0,
            height,
            width,
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rows `indices` flattened into an `len × (H·W)` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let p = self.pixels();
        let mut out = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            if i >= self.n {
                return Err(Error::InvalidArgument(format!(
                    "image index {i} out of range for batch of {}",
                    self.n
                )));
            }
            out.extend_from_slice(self.image(i));
        }
        Tensor::matrix(indices.len(), p, out)
    }

    /// The whole batch as an `N × (H·W)` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.n, self.pixels(), self.data.clone())
    }

    fn push(&mut self, image: &[f64]) {
        debug_assert_eq!(image.len(), self.pixels());
        self.data.extend_from_slice(image);
        self.n += 1;
    }
}

/// Index of each generative factor's value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct FactorTuple(pub [usize; NUM_FACTORS]);

impl FactorTuple {
    pub fn get(&self, k: usize) -> usize {
        self.0[k]
    }
}

/// Sizes of the factor grids and the canvas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorSpace {
    pub counts: [usize; NUM_FACTORS],
    pub canvas: usize,
}

impl Default for FactorSpace {
    fn default() -> Self {
        Self {
            counts: [3, 6, 8, 16, 16],
            canvas: 32,
        }
    }
}

impl FactorSpace {
    pub fn new(counts: [usize; NUM_FACTORS], canvas: usize) -> Result<Self> {
        if counts.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "every factor needs at least one value, got {counts:?}"
            )));
        }
        if counts[SHAPE] > 3 {
            return Err(Error::InvalidArgument(format!(
                "only 3 shapes exist, asked for {}",
                counts[SHAPE]
            )));
        }
        if canvas < 4 {
            return Err(Error::InvalidArgument(format!("canvas {canvas} is too small")));
        }
        Ok(Self { counts, canvas })
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, f: &FactorTuple) -> Result<()> {
        for k in 0..NUM_FACTORS {
            if f.0[k] >= self.counts[k] {
                return Err(Error::InvalidArgument(format!(
                    "factor {} index {} out of range (count {})",
                    FACTOR_NAMES[k], f.0[k], self.counts[k]
                )));
            }
        }
        Ok(())
    }

    /// Tuple at position `index` of the lexicographic enumeration.
    pub fn tuple_at(&self, mut index: usize) -> FactorTuple {
        let mut t = [0; NUM_FACTORS];
        for k in (0..NUM_FACTORS).rev() {
            t[k] = index % self.counts[k];
            index /= self.counts[k];
        }
        FactorTuple(t)
    }

    pub fn index_of(&self, f: &FactorTuple) -> usize {
        f.0.iter()
            .zip(&self.counts)
            .fold(0, |acc, (&v, &c)| acc * c + v)
    }

    fn grid(count: usize, i: usize, lo: f64, hi: f64) -> f64 {
        if count == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (count - 1) as f64
        }
    }

    /// Shape half-extent in pixels.
    pub fn half_extent(&self, scale: usize) -> f64 {
        self.canvas as f64 * Self::grid(self.counts[SCALE], scale, MIN_EXTENT, MAX_EXTENT)
    }

    pub fn angle(&self, orientation: usize) -> f64 {
        2.0 * PI * orientation as f64 / self.counts[ORIENTATION] as f64
    }

    /// Pixel coordinate of the shape centre along one axis.
    pub fn position(&self, axis_count: usize, i: usize) -> f64 {
        let margin = self.canvas as f64 * MAX_EXTENT;
        Self::grid(axis_count, i, margin, self.canvas as f64 - margin)
    }
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u.abs() <= 1.0 && v.abs() <= 1.0,
        1 => u * u + (v / ELLIPSE_MINOR).powi(2) <= 1.0,
        _ => {
            // equilateral, circumradius 1, apex pointing up (−v)
            let s = 3f64.sqrt() / 2.0;
            v <= 0.5 && -s * u - 0.5 * v <= 0.5 && s * u - 0.5 * v <= 0.5
        }
    }
}

/// Rasterise one image as `canvas × canvas` binary intensities.
pub fn render_shape(f: &FactorTuple, space: &FactorSpace) -> Result<Vec<f64>> {
    space.validate(f)?;
    let w = space.canvas;
    let h = space.half_extent(f.get(SCALE));
    let theta = space.angle(f.get(ORIENTATION));
    let (sin, cos) = theta.sin_cos();
    let cx = space.position(space.counts[POS_X], f.get(POS_X));
    let cy = space.position(space.counts[POS_Y], f.get(POS_Y));
    let mut img = vec![0.0; w * w];
    for py in 0..w {
        let dy = py as f64 + 0.5 - cy;
        for px in 0..w {
            let dx = px as f64 + 0.5 - cx;
            let u = (dx * cos + dy * sin) / h;
            let v = (-dx * sin + dy * cos) / h;
            if inside(f.get(SHAPE), u, v) {
                img[py * w + px] = 1.0;
            }
        }
    }
    Ok(img)
}

/// Every factor combination in lexicographic order with its image.
pub fn enumerate_dataset(space: &FactorSpace) -> Result<(ImageBatch, Vec<FactorTuple>)> {
    let n = space.len();
    let mut images = ImageBatch::empty(space.canvas, space.canvas);
    images.data.reserve(n * space.canvas * space.canvas);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = space.tuple_at(i);
        images.push(&render_shape(&t, space)?);
        labels.push(t);
    }
    Ok((images, labels))
}

/// `n` images whose factor `k` is pinned to `value`, all other factors
/// drawn uniformly.
pub fn sample_fixed_factor<R: Rng>(
    space: &FactorSpace,
    k: usize,
    value: usize,
    n: usize,
    rng: &mut R,
) -> Result<(ImageBatch, Vec<FactorTuple>)> {
    if k >= NUM_FACTORS {
        return Err(Error::InvalidArgument(format!("factor index {k} out of range")));
    }
    if value >= space.counts[k] {
        return Err(Error::InvalidArgument(format!(
            "value {value} out of range for factor {} (count {})",
            FACTOR_NAMES[k], space.counts[k]
        )));
    }
    let mut images = ImageBatch::empty(space.canvas, space.canvas);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut t = [0; NUM_FACTORS];
        for (j, slot) in t.iter_mut().enumerate() {
            *slot = if j == k {
                value
            } else {
                rng.gen_range(0..space.counts[j])
            };
        }
        let t = FactorTuple(t);
        images.push(&render_shape(&t, space)?);
        labels.push(t);
    }
    Ok((images, labels))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: offset + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Parse an IDX image file (and optionally its label file); pixel bytes
/// are scaled by `1/255`.
pub fn load_idx(images: &[u8], labels: Option<&[u8]>) -> Result<(ImageBatch, Option<Vec<u8>>)> {
    check_magic(images, IDX_IMAGES_MAGIC)?;
    let n = read_u32(images, 4)? as usize;
    let rows = read_u32(images, 8)? as usize;
    let cols = read_u32(images, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if images.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: images.len(),
        });
    }
    let data = images[16..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let batch = ImageBatch::new(n, rows, cols, data)?;

    let labels = labels
        .map(|bytes| -> Result<Vec<u8>> {
            check_magic(bytes, IDX_LABELS_MAGIC)?;
            let count = read_u32(bytes, 4)? as usize;
            if count != n {
                return Err(Error::Format(format!(
                    "label count {count} does not match image count {n}"
                )));
            }
            let expected = 8 + count;
            if bytes.len() < expected {
                return Err(Error::Truncated {
                    expected,
                    actual: bytes.len(),
                });
            }
            Ok(bytes[8..expected].to_vec())
        })
        .transpose()?;
    Ok((batch, labels))
}

/// Serialise a batch as an IDX image file; intensities are stored as
/// `round(v·255)`.
pub fn encode_idx_images(batch: &ImageBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + batch.data.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [batch.n, batch.height, batch.width] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    out.extend(batch.data.iter().map(|&v| (v * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// CSV with header `index,shape,scale,orientation,pos_x,pos_y`.
pub fn factors_to_csv(labels: &[FactorTuple]) -> String {
    let mut out = String::from("index,");
    out.push_str(&FACTOR_NAMES.join(","));
    out.push('\n');
    for (i, t) in labels.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in t.0 {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn factors_from_csv(text: &str) -> Result<Vec<FactorTuple>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty factor CSV".into()))?;
    if header != format!("index,{}", FACTOR_NAMES.join(",")) {
        return Err(Error::Format(format!("unexpected factor CSV header {header:?}")));
    }
    lines
        .enumerate()
        .map(|(row, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != NUM_FACTORS + 1 {
                return Err(Error::Format(format!("factor CSV row {row} has {} fields", fields.len())));
            }
            let mut t = [0; NUM_FACTORS];
            for (slot, field) in t.iter_mut().zip(&fields[1..]) {
                *slot = field
                    .parse()
                    .map_err(|_| Error::Format(format!("bad factor value {field:?} in row {row}")))?;
            }
            Ok(FactorTuple(t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn centroid_x(img: &[f64], w: usize) -> f64 {
        let (mut sx, mut n) = (0.0, 0.0);
        for (i, &v) in img.iter().enumerate() {
            sx += v * ((i % w) as f64 + 0.5);
            n += v;
        }
        sx / n
    }

    #[test]
    fn translation_moves_centroid_monotonically() {
        let space = FactorSpace::default();
        for shape in 0..3 {
            let mut prev = f64::NEG_INFINITY;
            let mut steps = Vec::new();
            for x in 0..space.counts[POS_X] {
                let img = render_shape(&FactorTuple([shape, 2, 1, x, 7]), &space).unwrap();
                let c = centroid_x(&img, space.canvas);
                assert!(c > prev, "shape {shape} pos {x}");
                steps.push(c - prev);
                prev = c;
            }
        }
    }

    #[test]
    fn square_area_matches_supersampling() {
        // a large canvas keeps pixel-centre quantisation well under the tolerance
        let c = 128.0;
        let space = FactorSpace::new([3, 6, 8, 16, 16], 128).unwrap();
        let t = FactorTuple([0, 5, 0, 7, 7]);
        let img = render_shape(&t, &space).unwrap();
        let count: f64 = img.iter().sum();

        // independent rasteriser: 16×16 samples per pixel over the
        // axis-aligned square of half-side 0.225·canvas
        let half = 0.225 * c;
        let margin = 0.225 * c;
        let centre = margin + (c - 2.0 * margin) * 7.0 / 15.0;
        let sub = 16;
        let mut covered = 0usize;
        for sy in 0..128 * sub {
            let y = (sy as f64 + 0.5) / sub as f64;
            if (y - centre).abs() > half {
                continue;
            }
            for sx in 0..128 * sub {
                let x = (sx as f64 + 0.5) / sub as f64;
                if (x - centre).abs() <= half {
                    covered += 1;
                }
            }
        }
        let area = covered as f64 / (sub * sub) as f64;
        assert!((count - area).abs() / area <= 0.05, "{count} vs {area}");
    }

    #[test]
    fn rendering_is_pure() {
        let space = FactorSpace::default();
        let t = FactorTuple([2, 3, 5, 9, 4]);
        assert_eq!(render_shape(&t, &space).unwrap(), render_shape(&t, &space).unwrap());
    }

    #[test]
    fn out_of_range_factor_rejected() {
        let space = FactorSpace::default();
        assert!(render_shape(&FactorTuple([3, 0, 0, 0, 0]), &space).is_err());
        assert!(render_shape(&FactorTuple([0, 0, 8, 0, 0]), &space).is_err());
    }

    #[test]
    fn every_default_image_has_foreground() {
        let space = FactorSpace::default();
        for i in 0..space.len() {
            let t = space.tuple_at(i);
            let img = render_shape(&t, &space).unwrap();
            assert!(img.iter().any(|&v| v > 0.0), "{t:?} is empty");
        }
    }

    #[test]
    fn enumerate_small_space() {
        let space = FactorSpace::new([2, 2, 3, 2, 2], 16).unwrap();
        let (images, labels) = enumerate_dataset(&space).unwrap();
        assert_eq!(images.len(), 48);
        assert_eq!(labels.len(), 48);
        assert_eq!(labels[0], FactorTuple([0; 5]));
        assert_eq!(labels[1], FactorTuple([0, 0, 0, 0, 1]));
        for i in [0, 7, 31, 47] {
            assert_eq!(space.index_of(&labels[i]), i);
            assert_eq!(images.image(i), render_shape(&labels[i], &space).unwrap().as_slice());
        }
    }

    #[test]
    fn default_space_size() {
        assert_eq!(FactorSpace::default().len(), 36_864);
    }

    #[test]
    fn fixed_factor_sampling() {
        let space = FactorSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (imgs, labels) = sample_fixed_factor(&space, ORIENTATION, 3, 50, &mut rng).unwrap();
        assert_eq!(imgs.len(), 50);
        assert!(labels.iter().all(|t| t.get(ORIENTATION) == 3));
        let (imgs, labels) = sample_fixed_factor(&space, SHAPE, 0, 1, &mut rng).unwrap();
        assert_eq!((imgs.len(), labels.len()), (1, 1));
        assert_eq!(imgs.image(0), render_shape(&labels[0], &space).unwrap().as_slice());
        assert!(sample_fixed_factor(&space, 5, 0, 1, &mut rng).is_err());
        assert!(sample_fixed_factor(&space, SCALE, 6, 1, &mut rng).is_err());
    }

    /// Pearson χ² on each free factor; critical values at p = 0.01.
    #[test]
    fn fixed_factor_sampling_is_uniform() {
        let space = FactorSpace::new([3, 6, 8, 16, 16], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let (_, labels) = sample_fixed_factor(&space, SCALE, 2, n, &mut rng).unwrap();
        // df = count − 1: 2 → 9.210, 7 → 18.475, 15 → 30.578
        for (k, critical) in [(SHAPE, 9.210), (ORIENTATION, 18.475), (POS_X, 30.578), (POS_Y, 30.578)] {
            let c = space.counts[k];
            let mut hist = vec![0usize; c];
            for t in &labels {
                hist[t.get(k)] += 1;
            }
            let e = n as f64 / c as f64;
            let chi2: f64 = hist.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
            assert!(chi2 < critical, "factor {k}: χ² = {chi2}");
        }
    }

    #[test]
    fn idx_handcrafted() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend_from_slice(&[0, 255, 128, 0]);
        let (batch, labels) = load_idx(&bytes, None).unwrap();
        assert!(labels.is_none());
        assert_eq!((batch.len(), batch.height(), batch.width()), (1, 2, 2));
        assert_eq!(batch.image(0), &[0.0, 1.0, 128.0 / 255.0, 0.0]);
    }

    #[test]
    fn idx_empty_and_errors() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 28, 0, 0, 0, 28];
        let (batch, _) = load_idx(&bytes, None).unwrap();
        assert!(batch.is_empty());

        let bad = [0, 0, 8, 2, 0, 0, 0, 0, 0, 0, 0, 28, 0, 0, 0, 28];
        let err = load_idx(&bad, None).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found: 0x802, .. }));
        assert!(err.to_string().contains("0x00000802"));

        let short = [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3];
        assert!(matches!(
            load_idx(&short, None),
            Err(Error::Truncated { expected: 24, actual: 19 })
        ));
    }

    #[test]
    fn idx_labels() {
        let batch = ImageBatch::new(3, 1, 2, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let img = encode_idx_images(&batch);
        let lab = encode_idx_labels(&[7, 1, 4]);
        let (back, labels) = load_idx(&img, Some(&lab)).unwrap();
        assert_eq!(back, batch);
        assert_eq!(labels.unwrap(), vec![7, 1, 4]);
        let wrong = encode_idx_labels(&[1, 2]);
        assert!(load_idx(&img, Some(&wrong)).is_err());
    }

    #[test]
    fn factor_csv_round_trip() {
        let space = FactorSpace::new([2, 2, 2, 2, 2], 8).unwrap();
        let labels: Vec<_> = (0..space.len()).map(|i| space.tuple_at(i)).collect();
        let csv = factors_to_csv(&labels);
        assert!(csv.starts_with("index,shape,scale,orientation,pos_x,pos_y\n0,0,0,0,0,0\n"));
        assert_eq!(factors_from_csv(&csv).unwrap(), labels);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn idx_round_trip(n in 0usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let data = (0..n * h * w).map(|_| f64::from(rng.gen::<u8>()) / 255.0).collect();
                let batch = ImageBatch::new(n, h, w, data).unwrap();
                let (back, _) = load_idx(&encode_idx_images(&batch), None).unwrap();
                prop_assert_eq!(back, batch);
            }
        }
    }
}
