//! Majority-vote disentanglement score.
//!
//! Each vote fixes one generative factor `k` at a random value, encodes `L`
//! images that share it, divides every latent dimension by its standard
//! deviation over the full corpus, and records the dimension `d*` with the
//! smallest variance. A classifier that maps each dimension to its most
//! frequent factor among training votes is then scored on held-out votes.

use std::cell::Cell;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::latent::LatentBatch;
use crate::objectives::Vae;
use crate::shapes::{self, FactorSpace, FactorTuple, ImageBatch};
use crate::whitening::WhiteningTransform;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    /// Images per vote.
    pub samples_per_vote: usize,
    pub train_votes: usize,
    pub test_votes: usize,
    /// Dimensions whose corpus std, relative to the largest, falls below
    /// this are excluded from the argmin.
    pub collapse_threshold: f64,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            samples_per_vote: 64,
            train_votes: 500,
            test_votes: 500,
            collapse_threshold: 0.05,
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_vote < 2 {
            return Err(Error::InvalidArgument("samples_per_vote must be ≥ 2".into()));
        }
        if self.train_votes == 0 || self.test_votes == 0 {
            return Err(Error::InvalidArgument("vote counts must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vote {
    pub dstar: usize,
    pub k: usize,
}

/// Per-dimension standard deviations of a reference corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct RescaleVector {
    pub std: Vec<f64>,
    pub collapsed: Vec<bool>,
}

/// Sample standard deviation of each column (`N−1` denominator). A column
/// is collapsed when its std is below `collapse_threshold · max_std`.
pub fn empirical_std(z: &LatentBatch, collapse_threshold: f64) -> Result<RescaleVector> {
    if z.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples for a standard deviation, got {}",
            z.len()
        )));
    }
    let std: Vec<f64> = column_variances(z).into_iter().map(f64::sqrt).collect();
    let max = std.iter().cloned().fold(0.0, f64::max);
    let collapsed = std
        .iter()
        .map(|&s| s <= 0.0 || s < collapse_threshold * max)
        .collect();
    Ok(RescaleVector { std, collapsed })
}

fn column_variances(z: &LatentBatch) -> Vec<f64> {
    let (n, d) = (z.len() as f64, z.dim());
    let mut mean = vec![0.0; d];
    for row in z.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in z.rows() {
        for j in 0..d {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v /= n - 1.0);
    var
}

/// Something that maps labelled images to latent codes. Learned encoders
/// ignore the labels; oracle encoders used for testing read them.
pub trait LatentEncoder {
    fn latent_dim(&self) -> usize;
    fn encode(&self, images: &ImageBatch, factors: &[FactorTuple]) -> Result<LatentBatch>;
}

/// A labelled corpus that can also draw images with one factor pinned.
pub trait FactorSource {
    fn factor_counts(&self) -> Vec<usize>;
    fn corpus(&self) -> Result<(ImageBatch, Vec<FactorTuple>)>;
    fn sample_fixed(
        &self,
        k: usize,
        value: usize,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ImageBatch, Vec<FactorTuple>)>;
}

impl FactorSource for FactorSpace {
    fn factor_counts(&self) -> Vec<usize> {
        self.counts.to_vec()
    }

    fn corpus(&self) -> Result<(ImageBatch, Vec<FactorTuple>)> {
        shapes::enumerate_dataset(self)
    }

    fn sample_fixed(
        &self,
        k: usize,
        value: usize,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ImageBatch, Vec<FactorTuple>)> {
        shapes::sample_fixed_factor(self, k, value, n, rng)
    }
}

/// One vote for factor `k`: the least-varying non-collapsed dimension of
/// the rescaled codes. Ties go to the lowest index.
pub fn cast_vote<S, E>(
    source: &S,
    encoder: &E,
    k: usize,
    rescale: &RescaleVector,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vote>
where
    S: FactorSource + ?Sized,
    E: LatentEncoder + ?Sized,
{
    let counts = source.factor_counts();
    let count = *counts
        .get(k)
        .ok_or_else(|| Error::InvalidArgument(format!("factor index {k} out of range")))?;
    if rescale.std.len() != encoder.latent_dim() {
        return Err(Error::InvalidArgument(format!(
            "rescale vector has {} entries for a {}-d encoder",
            rescale.std.len(),
            encoder.latent_dim()
        )));
    }
    if rescale.collapsed.iter().all(|&c| c) {
        return Err(Error::AllCollapsed);
    }
    let value = rng.gen_range(0..count);
    let (images, factors) = source.sample_fixed(k, value, samples, rng)?;
    let z = encoder.encode(&images, &factors)?;
    let variances = rescaled_variances(&z, rescale);
    let dstar = argmin_active(&variances, &rescale.collapsed).ok_or(Error::AllCollapsed)?;
    Ok(Vote { dstar, k })
}

/// Variance of each column after dividing by the corpus std.
pub fn rescaled_variances(z: &LatentBatch, rescale: &RescaleVector) -> Vec<f64> {
    column_variances(z)
        .into_iter()
        .zip(&rescale.std)
        .map(|(v, s)| if *s > 0.0 { v / (s * s) } else { f64::INFINITY })
        .collect()
}

fn argmin_active(values: &[f64], collapsed: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in values.iter().enumerate() {
        if collapsed[j] {
            continue;
        }
        if best.is_none_or(|b| v < values[b]) {
            best = Some(j);
        }
    }
    best
}

/// Majority-vote classifier from latent dimension to factor index.
#[derive(Clone, Debug, PartialEq)]
pub struct MajorityClassifier {
    /// `None` for dimensions never seen in training; they predict factor 0.
    pub assignment: Vec<Option<usize>>,
}

impl MajorityClassifier {
    pub fn fit(votes: &[Vote]) -> Result<Self> {
        if votes.is_empty() {
            return Err(Error::InvalidArgument("no training votes".into()));
        }
        let dims = votes.iter().map(|v| v.dstar).max().unwrap_or(0) + 1;
        let factors = votes.iter().map(|v| v.k).max().unwrap_or(0) + 1;
        let mut table = vec![vec![0usize; factors]; dims];
        for v in votes {
            table[v.dstar][v.k] += 1;
        }
        let assignment = table
            .iter()
            .map(|row| {
                let mut best: Option<usize> = None;
                for (k, &c) in row.iter().enumerate() {
                    if c > 0 && best.is_none_or(|b| c > row[b]) {
                        best = Some(k);
                    }
                }
                best
            })
            .collect();
        Ok(Self { assignment })
    }

    pub fn predict(&self, dstar: usize) -> usize {
        self.assignment.get(dstar).copied().flatten().unwrap_or(0)
    }
}

/// Accuracy on `test` of the majority-vote classifier fitted on `train`.
pub fn score(train: &[Vote], test: &[Vote]) -> Result<f64> {
    let clf = MajorityClassifier::fit(train)?;
    if test.is_empty() {
        return Ok(0.0);
    }
    let hits = test.iter().filter(|v| clf.predict(v.dstar) == v.k).count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub score: f64,
    pub rescale: RescaleVector,
    pub train_votes: Vec<Vote>,
    pub test_votes: Vec<Vote>,
}

const TEST_STREAM_BASE: u64 = 1 << 32;

fn vote_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Full metric: rescale vector from the corpus, then `train_votes +
/// test_votes` votes cycling through the factors. Vote `i` draws from its
/// own RNG stream, so results do not depend on evaluation order.
pub fn evaluate<S, E>(source: &S, encoder: &E, config: &MetricConfig) -> Result<MetricReport>
where
    S: FactorSource + ?Sized,
    E: LatentEncoder + ?Sized,
{
    config.validate()?;
    let (images, factors) = source.corpus()?;
    let z = encoder.encode(&images, &factors)?;
    drop(images);
    evaluate_with_corpus(source, encoder, &z, config)
}

/// [`evaluate`] with precomputed corpus encodings.
pub fn evaluate_with_corpus<S, E>(
    source: &S,
    encoder: &E,
    corpus_codes: &LatentBatch,
    config: &MetricConfig,
) -> Result<MetricReport>
where
    S: FactorSource + ?Sized,
    E: LatentEncoder + ?Sized,
{
    config.validate()?;
    let rescale = empirical_std(corpus_codes, config.collapse_threshold)?;
    let factors = source.factor_counts().len();
    let votes = |count: usize, base: u64| -> Result<Vec<Vote>> {
        (0..count)
            .map(|i| {
                let mut rng = vote_rng(config.seed, base + i as u64);
                cast_vote(
                    source,
                    encoder,
                    i % factors,
                    &rescale,
                    config.samples_per_vote,
                    &mut rng,
                )
            })
            .collect()
    };
    let train_votes = votes(config.train_votes, 0)?;
    let test_votes = votes(config.test_votes, TEST_STREAM_BASE)?;
    let score = score(&train_votes, &test_votes)?;
    Ok(MetricReport {
        score,
        rescale,
        train_votes,
        test_votes,
    })
}

/// Votes as CSV: `vote_index,dstar,k`.
pub fn votes_to_csv(votes: &[Vote]) -> String {
    let mut out = String::from("vote_index,dstar,k\n");
    for (i, v) in votes.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{}", v.dstar, v.k);
    }
    out
}

pub fn votes_from_csv(text: &str) -> Result<Vec<Vote>> {
    let mut lines = text.lines();
    if lines.next() != Some("vote_index,dstar,k") {
        return Err(Error::Format("missing votes CSV header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad value {s:?} in votes row {i}")))
            };
            match f.as_slice() {
                [_, d, k] => Ok(Vote {
                    dstar: parse(d)?,
                    k: parse(k)?,
                }),
                _ => Err(Error::Format(format!("votes row {i} has {} fields", f.len()))),
            }
        })
        .collect()
}

/// Posterior mean `μ(x)` of a trained model.
pub struct MeanEncoder<'a>(pub &'a Vae);

impl LatentEncoder for MeanEncoder<'_> {
    fn latent_dim(&self) -> usize {
        self.0.latent_dim()
    }

    fn encode(&self, images: &ImageBatch, _: &[FactorTuple]) -> Result<LatentBatch> {
        self.0.encode_images(images)
    }
}

/// Posterior mean followed by the whitening transform.
pub struct WhitenedEncoder<'a> {
    pub model: &'a Vae,
    pub transform: &'a WhiteningTransform,
}

impl LatentEncoder for WhitenedEncoder<'_> {
    fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn encode(&self, images: &ImageBatch, _: &[FactorTuple]) -> Result<LatentBatch> {
        self.transform.whiten_batch(&self.model.encode_images(images)?)
    }
}

/// A reparameterised sample `μ + σ·ε` instead of the mean. Each call draws
/// from the next stream of `seed`, so a fixed call sequence is
/// reproducible.
pub struct SampledEncoder<'a> {
    pub model: &'a Vae,
    pub transform: Option<&'a WhiteningTransform>,
    seed: u64,
    calls: Cell<u64>,
}

impl<'a> SampledEncoder<'a> {
    pub fn new(model: &'a Vae, transform: Option<&'a WhiteningTransform>, seed: u64) -> Self {
        Self {
            model,
            transform,
            seed,
            calls: Cell::new(0),
        }
    }
}

impl LatentEncoder for SampledEncoder<'_> {
    fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn encode(&self, images: &ImageBatch, _: &[FactorTuple]) -> Result<LatentBatch> {
        let call = self.calls.get();
        self.calls.set(call + 1);
        let mut rng = vote_rng(self.seed ^ 0x5eed_5a3d, call);
        let (mu, lv) = self.model.encode_image_posterior(images)?;
        let data = mu
            .data()
            .iter()
            .zip(lv.data())
            .map(|(m, l)| m + (0.5 * l).exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let z = LatentBatch::new(mu.len(), mu.dim(), data)?;
        match self.transform {
            Some(t) => t.whiten_batch(&z),
            None => Ok(z),
        }
    }
}

/// `z_j = factor_j` (as a float), padded with zeros up to `dim`.
pub struct IdentityOracle {
    pub dim: usize,
}

impl LatentEncoder for IdentityOracle {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _: &ImageBatch, factors: &[FactorTuple]) -> Result<LatentBatch> {
        let data = factors
            .iter()
            .flat_map(|t| (0..self.dim).map(move |j| t.0.get(j).map_or(0.0, |&v| v as f64)))
            .collect();
        LatentBatch::new(factors.len(), self.dim, data)
    }
}

/// Standard-normal codes independent of the input.
pub struct GaussianNoiseEncoder {
    pub dim: usize,
    pub seed: u64,
    calls: Cell<u64>,
}

impl GaussianNoiseEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            calls: Cell::new(0),
        }
    }
}

impl LatentEncoder for GaussianNoiseEncoder {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _: &ImageBatch, factors: &[FactorTuple]) -> Result<LatentBatch> {
        let call = self.calls.get();
        self.calls.set(call + 1);
        let mut rng = vote_rng(self.seed, call);
        let data = (&mut rng)
            .sample_iter(StandardNormal)
            .take(factors.len() * self.dim)
            .collect();
        LatentBatch::new(factors.len(), self.dim, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Factor space without images: encoders under test only read labels.
    struct LabelSource {
        counts: Vec<usize>,
    }

    impl LabelSource {
        fn tuple(&self, mut idx: usize) -> FactorTuple {
            let mut t = [0; shapes::NUM_FACTORS];
            for k in (0..self.counts.len()).rev() {
                t[k] = idx % self.counts[k];
                idx /= self.counts[k];
            }
            FactorTuple(t)
        }
    }

    impl FactorSource for LabelSource {
        fn factor_counts(&self) -> Vec<usize> {
            self.counts.clone()
        }

        fn corpus(&self) -> Result<(ImageBatch, Vec<FactorTuple>)> {
            let n: usize = self.counts.iter().product();
            Ok((ImageBatch::new(n, 0, 0, vec![])?, (0..n).map(|i| self.tuple(i)).collect()))
        }

        fn sample_fixed(
            &self,
            k: usize,
            value: usize,
            n: usize,
            rng: &mut ChaCha8Rng,
        ) -> Result<(ImageBatch, Vec<FactorTuple>)> {
            let labels = (0..n)
                .map(|_| {
                    let mut t = [0; shapes::NUM_FACTORS];
                    for (j, &c) in self.counts.iter().enumerate() {
                        t[j] = if j == k { value } else { rng.gen_range(0..c) };
                    }
                    FactorTuple(t)
                })
                .collect();
            Ok((ImageBatch::new(n, 0, 0, vec![])?, labels))
        }
    }

    fn source() -> LabelSource {
        LabelSource {
            counts: vec![3, 6, 8, 16, 16],
        }
    }

    /// Fixed linear map of the factor values.
    struct LinearMix {
        weights: Vec<f64>, // dim × factors
        dim: usize,
    }

    impl LatentEncoder for LinearMix {
        fn latent_dim(&self) -> usize {
            self.dim
        }

        fn encode(&self, _: &ImageBatch, factors: &[FactorTuple]) -> Result<LatentBatch> {
            let nf = shapes::NUM_FACTORS;
            let data = factors
                .iter()
                .flat_map(|t| {
                    (0..self.dim)
                        .map(|i| (0..nf).map(|k| self.weights[i * nf + k] * t.0[k] as f64).sum())
                        .collect::<Vec<f64>>()
                })
                .collect();
            LatentBatch::new(factors.len(), self.dim, data)
        }
    }

    fn random_mix(seed: u64, dim: usize) -> LinearMix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearMix {
            weights: (0..dim * shapes::NUM_FACTORS)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            dim,
        }
    }

    #[test]
    fn empirical_std_examples() {
        let z = LatentBatch::from_rows(&[vec![3.0, -1.0], vec![3.0, 1.0]]).unwrap();
        let s = empirical_std(&z, 0.05).unwrap();
        assert_eq!(s.std[0], 0.0);
        assert!((s.std[1] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.collapsed, vec![true, false]);

        let one = LatentBatch::from_rows(&[vec![1.0]]).unwrap();
        assert!(empirical_std(&one, 0.05).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f64> = (&mut rng).sample_iter(StandardNormal).take(100_000).collect();
        let s = empirical_std(&LatentBatch::new(100_000, 1, data).unwrap(), 0.05).unwrap();
        assert!((0.99..=1.01).contains(&s.std[0]));
    }

    #[test]
    fn identity_oracle_votes_for_its_factor() {
        let src = source();
        let enc = IdentityOracle { dim: 5 };
        let (_, labels) = src.corpus().unwrap();
        let z = enc.encode(&ImageBatch::empty(0, 0), &labels).unwrap();
        let s = empirical_std(&z, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 0..5 {
            let v = cast_vote(&src, &enc, k, &s, 64, &mut rng).unwrap();
            assert_eq!(v, Vote { dstar: k, k });
        }
    }

    #[test]
    fn constant_encoder_is_all_collapsed() {
        struct Constant;
        impl LatentEncoder for Constant {
            fn latent_dim(&self) -> usize {
                3
            }
            fn encode(&self, _: &ImageBatch, f: &[FactorTuple]) -> Result<LatentBatch> {
                LatentBatch::new(f.len(), 3, vec![0.25; f.len() * 3])
            }
        }
        let src = source();
        let z = Constant.encode(&ImageBatch::empty(0, 0), &[FactorTuple::default(); 10]).unwrap();
        let s = empirical_std(&z, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            cast_vote(&src, &Constant, 0, &s, 16, &mut rng),
            Err(Error::AllCollapsed)
        ));
        assert!(matches!(
            evaluate(&src, &Constant, &MetricConfig::default()),
            Err(Error::AllCollapsed)
        ));
    }

    /// Brute-force oracle: redraw the same samples, build the variance
    /// table by hand and take its argmin.
    #[test]
    fn linear_mix_vote_matches_brute_force() {
        let src = source();
        let enc = random_mix(3, 7);
        let (_, labels) = src.corpus().unwrap();
        let z = enc.encode(&ImageBatch::empty(0, 0), &labels).unwrap();
        let s = empirical_std(&z, 0.05).unwrap();
        for (seed, k) in (0..20).zip((0..5).cycle()) {
            let mut rng = vote_rng(99, seed);
            let vote = cast_vote(&src, &enc, k, &s, 32, &mut rng).unwrap();

            let mut rng = vote_rng(99, seed);
            let value = rng.gen_range(0..src.counts[k]);
            let (_, f) = src.sample_fixed(k, value, 32, &mut rng).unwrap();
            let mut best = (f64::INFINITY, usize::MAX);
            for dim in 0..7 {
                let col: Vec<f64> = f
                    .iter()
                    .map(|t| {
                        (0..5).map(|q| enc.weights[dim * 5 + q] * t.0[q] as f64).sum::<f64>()
                            / s.std[dim]
                    })
                    .collect();
                let m = col.iter().sum::<f64>() / 32.0;
                let var = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 31.0;
                if var < best.0 {
                    best = (var, dim);
                }
            }
            assert_eq!(vote, Vote { dstar: best.1, k });
        }
    }

    #[test]
    fn score_examples() {
        let votes: Vec<Vote> = (0..10).map(|i| Vote { dstar: i % 5, k: i % 5 }).collect();
        assert_eq!(score(&votes, &votes).unwrap(), 1.0);

        let train = [
            Vote { dstar: 0, k: 1 },
            Vote { dstar: 0, k: 1 },
            Vote { dstar: 0, k: 2 },
        ];
        assert_eq!(score(&train, &[Vote { dstar: 0, k: 1 }]).unwrap(), 1.0);
        assert!(score(&[], &train).is_err());

        // ties go to the lower factor, unseen dimensions predict 0
        let clf = MajorityClassifier::fit(&[Vote { dstar: 1, k: 3 }, Vote { dstar: 1, k: 2 }]).unwrap();
        assert_eq!(clf.predict(1), 2);
        assert_eq!(clf.predict(0), 0);
        assert_eq!(clf.predict(9), 0);
    }

    #[test]
    fn score_at_chance_for_uninformative_votes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vote> {
            (0..n)
                .map(|_| Vote {
                    dstar: rng.gen_range(0..10),
                    k: rng.gen_range(0..5),
                })
                .collect()
        };
        let train = draw(&mut rng, 10_000);
        let test = draw(&mut rng, 10_000);
        let s = score(&train, &test).unwrap();
        assert!((s - 0.2).abs() <= 0.05, "{s}");
    }

    #[test]
    fn identity_oracle_scores_one_and_is_deterministic() {
        let src = source();
        let cfg = MetricConfig {
            train_votes: 100,
            test_votes: 100,
            ..MetricConfig::default()
        };
        let enc = IdentityOracle { dim: 5 };
        let a = evaluate(&src, &enc, &cfg).unwrap();
        assert_eq!(a.score, 1.0);
        assert_eq!(a.train_votes.len(), 100);
        let b = evaluate(&src, &enc, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rescaling_dimensions_keeps_votes() {
        let src = source();
        let base = random_mix(7, 6);
        let mut scaled = LinearMix {
            weights: base.weights.clone(),
            dim: 6,
        };
        let factors = [0.5, 3.0, 10.0, 0.01, 2.0, 7.5];
        for i in 0..6 {
            for k in 0..5 {
                scaled.weights[i * 5 + k] *= factors[i];
            }
        }
        let cfg = MetricConfig {
            train_votes: 40,
            test_votes: 40,
            collapse_threshold: 0.0,
            ..MetricConfig::default()
        };
        let a = evaluate(&src, &base, &cfg).unwrap();
        let b = evaluate(&src, &scaled, &cfg).unwrap();
        assert_eq!(a.train_votes, b.train_votes);
        assert_eq!(a.test_votes, b.test_votes);
    }

    #[test]
    fn permuting_dimensions_permutes_votes() {
        let src = source();
        let base = random_mix(8, 5);
        let perm = [3, 0, 4, 1, 2];
        let mut permuted = LinearMix {
            weights: vec![0.0; base.weights.len()],
            dim: 5,
        };
        for (new, &old) in perm.iter().enumerate() {
            permuted.weights[new * 5..new * 5 + 5]
                .copy_from_slice(&base.weights[old * 5..old * 5 + 5]);
        }
        let cfg = MetricConfig {
            train_votes: 40,
            test_votes: 40,
            ..MetricConfig::default()
        };
        let a = evaluate(&src, &base, &cfg).unwrap();
        let b = evaluate(&src, &permuted, &cfg).unwrap();
        for (va, vb) in a.train_votes.iter().zip(&b.train_votes) {
            assert_eq!(perm[vb.dstar], va.dstar);
            assert_eq!(va.k, vb.k);
        }
        assert_eq!(a.score, b.score);
    }

    #[test]
    fn votes_ignore_sample_order() {
        let src = source();
        let enc = random_mix(9, 6);
        let (_, labels) = src.corpus().unwrap();
        let z = enc.encode(&ImageBatch::empty(0, 0), &labels).unwrap();
        let s = empirical_std(&z, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, f) = src.sample_fixed(2, 5, 64, &mut rng).unwrap();
        let forward = enc.encode(&ImageBatch::empty(0, 0), &f).unwrap();
        let rev: Vec<FactorTuple> = f.iter().rev().cloned().collect();
        let backward = enc.encode(&ImageBatch::empty(0, 0), &rev).unwrap();
        let a = rescaled_variances(&forward, &s);
        let b = rescaled_variances(&backward, &s);
        assert_eq!(argmin_active(&a, &s.collapsed), argmin_active(&b, &s.collapsed));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn votes_csv_round_trip() {
        let votes = vec![Vote { dstar: 3, k: 1 }, Vote { dstar: 0, k: 4 }];
        let csv = votes_to_csv(&votes);
        assert_eq!(csv, "vote_index,dstar,k\n0,3,1\n1,0,4\n");
        assert_eq!(votes_from_csv(&csv).unwrap(), votes);
    }
}
