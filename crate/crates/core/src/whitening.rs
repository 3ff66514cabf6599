//! PCA whitening of a latent space.
//!
//! A [`WhiteningTransform`] is fitted on the encodings of a whole training
//! corpus and is fixed afterwards. It maps a latent code `z` to
//! `Λ^{-1/2} Uᵀ (z − mean)`, where `U` holds the eigenvectors of the sample
//! covariance as columns and `Λ` its eigenvalues in descending order, and
//! maps back with `U Λ^{1/2} z_w + mean`. Directions whose eigenvalue is
//! below [`DEGENERATE_EIGENVALUE`] carry no variance; their whitened
//! coordinate is pinned to zero.

use crate::error::{Error, Result};
use crate::latent::LatentBatch;

pub const DEGENERATE_EIGENVALUE: f64 = 1e-12;
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Row-major `d × d`; column `j` is the eigenvector of `values[j]`.
    pub vectors: Vec<f64>,
}

fn off_diagonal_max(a: &[f64], d: usize) -> f64 {
    let mut m = 0.0f64;
    for i in 0..d {
        for j in i + 1..d {
            m = m.max(a[i * d + j].abs());
        }
    }
    m
}

/// Cyclic Jacobi eigensolver for a row-major symmetric `d × d` matrix.
///
/// Sweeps over all `(p, q)` pairs until every off-diagonal entry is below
/// `JACOBI_TOLERANCE · max(1, ‖S‖_F)`. Each eigenvector is signed so that
/// its largest-magnitude component is positive.
pub fn jacobi_eigh(s: &[f64], d: usize) -> Result<SymmetricEigen> {
    if d == 0 || s.len() != d * d {
        return Err(Error::InvalidArgument(format!(
            "expected a {d}×{d} matrix, got {} entries",
            s.len()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("jacobi_eigh input".into()));
    }
    let mut asym = 0.0f64;
    for i in 0..d {
        for j in i + 1..d {
            asym = asym.max((s[i * d + j] - s[j * d + i]).abs());
        }
    }
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::NotSymmetric(asym));
    }

    let mut a = s.to_vec();
    // symmetrise exactly so rotations see one value per pair
    for i in 0..d {
        for j in i + 1..d {
            let m = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = m;
            a[j * d + i] = m;
        }
    }
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_TOLERANCE * norm.max(1.0);

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_max(&a, d);
        if off < tol {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off,
            });
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * d + p], a[q * d + q]);
                // rotation angle chosen to zero a[p][q] (Rutishauser's form)
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;

                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - sn * akq;
                    a[k * d + q] = sn * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - sn * aqk;
                    a[q * d + k] = sn * apk + c * aqk;
                }
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - sn * vkq;
                    v[k * d + q] = sn * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].total_cmp(&a[i * d + i]));
    let values: Vec<f64> = order.iter().map(|&i| a[i * d + i]).collect();
    let mut vectors = vec![0.0; d * d];
    for (col, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for k in 0..d {
            if v[k * d + src].abs() > v[pivot * d + src].abs() {
                pivot = k;
            }
        }
        let sign = if v[pivot * d + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..d {
            vectors[k * d + col] = sign * v[k * d + src];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Fitted PCA whitening map of a `d`-dimensional latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    /// Row-major `d × d`, eigenvectors as columns.
    pub eigvecs: Vec<f64>,
    /// Descending, clamped to be nonnegative.
    pub eigvals: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// Column means and the `(N−1)`-normalised covariance of `z`.
pub fn mean_and_covariance(z: &LatentBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = (z.len(), z.dim());
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples for a covariance, got {n}"
        )));
    }
    let mut mean = vec![0.0; d];
    for row in z.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    let mut centred = vec![0.0; d];
    for row in z.rows() {
        for j in 0..d {
            centred[j] = row[j] - mean[j];
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += centred[i] * centred[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let c = cov[i * d + j] / denom;
            cov[i * d + j] = c;
            cov[j * d + i] = c;
        }
    }
    Ok((mean, cov))
}

impl WhiteningTransform {
    pub fn fit(z: &LatentBatch) -> Result<Self> {
        let (mean, cov) = mean_and_covariance(z)?;
        let eig = jacobi_eigh(&cov, z.dim())?;
        let eigvals: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0)).collect();
        let degenerate = eigvals.iter().map(|&l| l < DEGENERATE_EIGENVALUE).collect();
        Ok(Self {
            mean,
            eigvecs: eig.vectors,
            eigvals,
            degenerate,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Eigenvalues in descending order.
    pub fn spectrum(&self) -> &[f64] {
        &self.eigvals
    }

    /// Column `j` of `U`.
    pub fn eigvec(&self, j: usize) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|k| self.eigvecs[k * d + j]).collect()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "transform is {}-dimensional, got a {len}-vector",
                self.dim()
            )));
        }
        Ok(())
    }

    /// `Λ^{-1/2} Uᵀ (z − mean)`.
    pub fn whiten(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z.len())?;
        let d = self.dim();
        let centred: Vec<f64> = z.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..d)
            .map(|j| {
                if self.degenerate[j] {
                    return 0.0;
                }
                let proj: f64 = (0..d).map(|k| self.eigvecs[k * d + j] * centred[k]).sum();
                proj / self.eigvals[j].sqrt()
            })
            .collect())
    }

    /// `U Λ^{1/2} z_w + mean`.
    pub fn unwhiten(&self, zw: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(zw.len())?;
        let d = self.dim();
        let scaled: Vec<f64> = (0..d)
            .map(|j| {
                if self.degenerate[j] {
                    0.0
                } else {
                    zw[j] * self.eigvals[j].sqrt()
                }
            })
            .collect();
        Ok((0..d)
            .map(|k| {
                let s: f64 = (0..d).map(|j| self.eigvecs[k * d + j] * scaled[j]).sum();
                s + self.mean[k]
            })
            .collect())
    }

    pub fn whiten_batch(&self, z: &LatentBatch) -> Result<LatentBatch> {
        self.map_batch(z, Self::whiten)
    }

    pub fn unwhiten_batch(&self, zw: &LatentBatch) -> Result<LatentBatch> {
        self.map_batch(zw, Self::unwhiten)
    }

    fn map_batch(
        &self,
        z: &LatentBatch,
        f: fn(&Self, &[f64]) -> Result<Vec<f64>>,
    ) -> Result<LatentBatch> {
        self.check_dim(z.dim())?;
        let mut out = Vec::with_capacity(z.data().len());
        for row in z.rows() {
            out.extend(f(self, row)?);
        }
        LatentBatch::new(z.len(), z.dim(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn reconstruct(e: &SymmetricEigen, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..d)
                    .map(|k| e.vectors[i * d + k] * e.values[k] * e.vectors[j * d + k])
                    .sum();
            }
        }
        out
    }

    fn frobenius(a: &[f64]) -> f64 {
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let v = rng.gen_range(-1.0..1.0);
                s[i * d + j] = v;
                s[j * d + i] = v;
            }
        }
        s
    }

    #[test]
    fn jacobi_two_by_two() {
        let e = jacobi_eigh(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);
        let r = 0.5f64.sqrt();
        let u0 = [e.vectors[0], e.vectors[2]];
        let u1 = [e.vectors[1], e.vectors[3]];
        assert!((u0[0].abs() - r).abs() < 1e-14 && (u0[0] - u0[1]).abs() < 1e-14);
        assert!((u1[0].abs() - r).abs() < 1e-14 && (u1[0] + u1[1]).abs() < 1e-14);
    }

    #[test]
    fn jacobi_identity() {
        let e = jacobi_eigh(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3).unwrap();
        assert_eq!(e.values, vec![1.0; 3]);
    }

    #[test]
    fn jacobi_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let s = random_symmetric(&mut rng, 10);
            let e = jacobi_eigh(&s, 10).unwrap();
            let r = reconstruct(&e, 10);
            let diff: Vec<f64> = r.iter().zip(&s).map(|(a, b)| a - b).collect();
            assert!(frobenius(&diff) / frobenius(&s) <= 1e-10);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn jacobi_rejects_asymmetric() {
        assert!(matches!(
            jacobi_eigh(&[1.0, 2.0, 2.1, 1.0], 2),
            Err(Error::NotSymmetric(_))
        ));
        assert!(jacobi_eigh(&[1.0, 2.0, 3.0], 2).is_err());
    }

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, scales: &[f64]) -> LatentBatch {
        let d = scales.len();
        let data = (0..n * d)
            .map(|i| scales[i % d] * rng.sample::<f64, _>(StandardNormal))
            .collect();
        LatentBatch::new(n, d, data).unwrap()
    }

    /// Correlated 4-d latents: a random rotation of independent Gaussians.
    fn correlated(rng: &mut ChaCha8Rng, n: usize) -> LatentBatch {
        let base = gaussian(rng, n, &[3.0, 1.5, 0.7, 0.2]);
        let mix = [
            0.8, 0.3, -0.2, 0.1, //
            -0.1, 0.9, 0.4, 0.0, //
            0.3, -0.2, 0.7, 0.5, //
            0.2, 0.1, -0.3, 0.9,
        ];
        let data = base
            .rows()
            .flat_map(|r| {
                (0..4)
                    .map(|i| (0..4).map(|k| mix[i * 4 + k] * r[k]).sum::<f64>() + 0.5 * i as f64)
                    .collect::<Vec<_>>()
            })
            .collect();
        LatentBatch::new(n, 4, data).unwrap()
    }

    #[test]
    fn fit_identical_rows_is_degenerate() {
        let z = LatentBatch::from_rows(&vec![vec![0.3, -1.0, 2.0]; 5]).unwrap();
        let t = WhiteningTransform::fit(&z).unwrap();
        assert_eq!(t.eigvals, vec![0.0; 3]);
        assert!(t.degenerate.iter().all(|&d| d));
        assert_eq!(t.whiten(&[1.0, 1.0, 1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn fit_needs_two_samples() {
        let z = LatentBatch::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(WhiteningTransform::fit(&z).is_err());
    }

    #[test]
    fn fit_axis_aligned_matches_sample_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = gaussian(&mut rng, 20_000, &[2.0, 1.0]);
        let (_, cov) = mean_and_covariance(&z).unwrap();
        let t = WhiteningTransform::fit(&z).unwrap();
        // sample covariance oracle: its diagonal holds (≈4, ≈1) and the
        // off-diagonal is small, so Λ ≈ diag and U ≈ I
        assert!((t.eigvals[0] - 4.0).abs() < 0.15 && (t.eigvals[1] - 1.0).abs() < 0.05);
        assert!((t.eigvals[0] - cov[0]).abs() < 1e-3 && (t.eigvals[1] - cov[3]).abs() < 1e-3);
        assert!(t.eigvecs[0] > 0.999 && t.eigvecs[3] > 0.999);
    }

    #[test]
    fn fit_invariant_to_duplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = correlated(&mut rng, 500);
        let a = WhiteningTransform::fit(&z).unwrap();
        let b = WhiteningTransform::fit(&z.concat(&z).unwrap()).unwrap();
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert!((x - y).abs() <= 1e-9);
        }
        for (x, y) in a.eigvecs.iter().zip(&b.eigvecs) {
            assert!((x - y).abs() <= 1e-9, "{x} {y}");
        }
        // the N−1 denominator becomes 2N−1 for twice the scatter
        let n = 500.0;
        let ratio = 2.0 * (n - 1.0) / (2.0 * n - 1.0);
        for (x, y) in a.eigvals.iter().zip(&b.eigvals) {
            assert!((x * ratio - y).abs() / x <= 1e-6, "{x} {y}");
        }
    }

    #[test]
    fn fit_invariant_to_row_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = correlated(&mut rng, 300);
        let rows: Vec<Vec<f64>> = z.rows().rev().map(|r| r.to_vec()).collect();
        let a = WhiteningTransform::fit(&z).unwrap();
        let b = WhiteningTransform::fit(&LatentBatch::from_rows(&rows).unwrap()).unwrap();
        for (x, y) in a.mean.iter().chain(&a.eigvals).zip(b.mean.iter().chain(&b.eigvals)) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in a.eigvecs.iter().zip(&b.eigvecs) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn transform_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = correlated(&mut rng, 2000);
        let t = WhiteningTransform::fit(&z).unwrap();
        let d = 4;
        // UᵀU = I
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| t.eigvecs[k * d + i] * t.eigvecs[k * d + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-9);
            }
        }
        // U Λ Uᵀ reproduces the covariance
        let (_, cov) = mean_and_covariance(&z).unwrap();
        let e = SymmetricEigen {
            values: t.eigvals.clone(),
            vectors: t.eigvecs.clone(),
        };
        let r = reconstruct(&e, d);
        let diff: Vec<f64> = r.iter().zip(&cov).map(|(a, b)| a - b).collect();
        assert!(frobenius(&diff) / frobenius(&cov) <= 1e-8);
        assert!(t.spectrum().windows(2).all(|w| w[0] >= w[1]));
        // sign convention
        for j in 0..d {
            let col = t.eigvec(j);
            let big = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn whiten_examples() {
        let t = WhiteningTransform {
            mean: vec![0.0, 0.0],
            eigvecs: vec![1.0, 0.0, 0.0, 1.0],
            eigvals: vec![4.0, 1.0],
            degenerate: vec![false, false],
        };
        assert_eq!(t.whiten(&[2.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(t.spectrum(), &[4.0, 1.0]);
        assert!(t.whiten(&[1.0]).is_err());
        assert!(t.unwhiten(&[1.0, 2.0, 3.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = correlated(&mut rng, 100);
        let t = WhiteningTransform::fit(&z).unwrap();
        let w = t.whiten(&t.mean).unwrap();
        assert!(w.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(t.unwhiten(&[0.0; 4]).unwrap(), t.mean);
    }

    #[test]
    fn whitened_training_latents_have_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = correlated(&mut rng, 5000);
        let t = WhiteningTransform::fit(&z).unwrap();
        let w = t.whiten_batch(&z).unwrap();
        let (mean, cov) = mean_and_covariance(&w).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((cov[i * 4 + j] - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn unwhiten_moves_along_scaled_eigenvector() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = correlated(&mut rng, 1000);
        let t = WhiteningTransform::fit(&z).unwrap();
        let base = vec![0.3, -0.4, 1.1, 0.2];
        let z0 = t.unwhiten(&base).unwrap();
        for j in 0..4 {
            let mut moved = base.clone();
            moved[j] += 1.0;
            let z1 = t.unwhiten(&moved).unwrap();
            let u = t.eigvec(j);
            for k in 0..4 {
                let expect = t.eigvals[j].sqrt() * u[k];
                assert!(((z1[k] - z0[k]) - expect).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_direction_pinned_to_zero() {
        // rank-1 data along (1, 1)
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1, i as f64 * 0.1]).collect();
        let z = LatentBatch::from_rows(&rows).unwrap();
        let t = WhiteningTransform::fit(&z).unwrap();
        assert_eq!(t.degenerate, vec![false, true]);
        let w = t.whiten(&[5.0, -3.0]).unwrap();
        assert_eq!(w[1], 0.0);
        assert!(w[0].is_finite());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn fitted(seed: u64) -> WhiteningTransform {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            WhiteningTransform::fit(&correlated(&mut rng, 200)).unwrap()
        }

        proptest! {
            #[test]
            fn round_trips(seed in 0u64..1000, v in proptest::collection::vec(-5.0f64..5.0, 4)) {
                let t = fitted(seed);
                let back = t.unwhiten(&t.whiten(&v).unwrap()).unwrap();
                for (a, b) in back.iter().zip(&v) {
                    prop_assert!((a - b).abs() <= 1e-9);
                }
                let fwd = t.whiten(&t.unwhiten(&v).unwrap()).unwrap();
                for (a, b) in fwd.iter().zip(&v) {
                    prop_assert!((a - b).abs() <= 1e-9);
                }
            }

            #[test]
            fn affine(seed in 0u64..1000,
                      a in proptest::collection::vec(-5.0f64..5.0, 4),
                      b in proptest::collection::vec(-5.0f64..5.0, 4),
                      alpha in 0.0f64..1.0) {
                let t = fitted(seed);
                let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
                for f in [WhiteningTransform::whiten, WhiteningTransform::unwhiten] {
                    let (fa, fb, fm) = (f(&t, &a).unwrap(), f(&t, &b).unwrap(), f(&t, &mix).unwrap());
                    for k in 0..4 {
                        prop_assert!((fm[k] - (alpha * fa[k] + (1.0 - alpha) * fb[k])).abs() <= 1e-9);
                    }
                }
            }
        }
    }
}
