//! The VAE model, its three training objectives and the training loop.
//!
//! All losses are minimised, so each is the negative of the corresponding
//! evidence lower bound: `recon + kl` for the plain VAE, `recon + β·kl` for
//! β-VAE and `recon + kl + γ·tc` for Factor-VAE, where `tc` is the
//! discriminator's estimate of the total correlation of `q(z)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::latent::LatentBatch;
use crate::nn::{
    bernoulli_recon, gaussian_kl, reparameterize, Activation, DenseLayer, EncoderOutput, Mlp,
    Mode, Rmsprop, RmspropConfig, LOGVAR_MAX, LOGVAR_MIN,
};
use crate::shapes::ImageBatch;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Vae,
    BetaVae,
    FactorVae,
}

impl Objective {
    pub fn tag(self) -> u8 {
        match self {
            Objective::Vae => 0,
            Objective::BetaVae => 1,
            Objective::FactorVae => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Objective::Vae,
            1 => Objective::BetaVae,
            2 => Objective::FactorVae,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Vae => "vae",
            Objective::BetaVae => "beta_vae",
            Objective::FactorVae => "factor_vae",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Objective::Vae),
            "beta_vae" | "beta-vae" => Ok(Objective::BetaVae),
            "factor_vae" | "factor-vae" => Ok(Objective::FactorVae),
            other => Err(Error::InvalidArgument(format!("unknown objective {other:?}"))),
        }
    }
}

/// Layer sizes of a [`Vae`]. The decoder mirrors the encoder's hidden
/// widths in reverse order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VaeArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
}

impl VaeArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidArgument(
                "input and latent dimensions must be ≥ 1".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "hidden layer sizes must be a nonempty list of positive widths, got {:?}",
                self.hidden
            )));
        }
        Ok(())
    }
}

/// Fully connected Gaussian encoder / Bernoulli-logit decoder.
#[derive(Clone, Debug)]
pub struct Vae {
    pub arch: VaeArch,
    pub store: ParamStore,
    encoder: Mlp,
    mu_head: DenseLayer,
    logvar_head: DenseLayer,
    decoder: Mlp,
}

const INFERENCE_CHUNK: usize = 512;

impl Vae {
    pub fn new<R: Rng>(arch: VaeArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let act = arch.activation;
        let mut enc_sizes = vec![arch.input_dim];
        enc_sizes.extend(&arch.hidden);
        let encoder = Mlp::new(&mut store, &enc_sizes, act, act, rng);
        let top = *arch.hidden.last().expect("validated nonempty");
        let mu_head = DenseLayer::new(&mut store, top, arch.latent_dim, Activation::Identity, rng);
        let logvar_head =
            DenseLayer::new(&mut store, top, arch.latent_dim, Activation::Identity, rng);
        let mut dec_sizes = vec![arch.latent_dim];
        dec_sizes.extend(arch.hidden.iter().rev());
        dec_sizes.push(arch.input_dim);
        let decoder = Mlp::new(&mut store, &dec_sizes, act, Activation::Identity, rng);
        Ok(Self {
            arch,
            store,
            encoder,
            mu_head,
            logvar_head,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    /// Posterior parameters for a batch `x` of flattened images.
    pub fn encode(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<EncoderOutput> {
        let h = self.encoder.forward(g, &self.store, x, mode)?;
        let mu = self.mu_head.forward(g, &self.store, h, mode)?;
        let raw = self.logvar_head.forward(g, &self.store, h, mode)?;
        let logvar = g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
        Ok(EncoderOutput { mu, logvar })
    }

    /// Bernoulli logits for a batch of latent codes.
    pub fn decode(&self, g: &mut Graph, z: Var, mode: Mode) -> Result<Var> {
        self.decoder.forward(g, &self.store, z, mode)
    }

    /// Posterior means `μ(x)` of every row of `x`, computed in chunks.
    pub fn encode_mean(&self, x: &Tensor) -> Result<LatentBatch> {
        let (mu, _) = self.encode_posterior(x)?;
        Ok(mu)
    }

    /// Posterior means and log-variances of every row of `x`.
    pub fn encode_posterior(&self, x: &Tensor) -> Result<(LatentBatch, LatentBatch)> {
        if x.cols() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "model expects {} inputs per row, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        self.posterior_rows(x.data(), x.rows())
    }

    fn posterior_rows(&self, data: &[f64], n: usize) -> Result<(LatentBatch, LatentBatch)> {
        let d = self.latent_dim();
        let width = self.input_dim();
        let mut mus = Vec::with_capacity(n * d);
        let mut lvs = Vec::with_capacity(n * d);
        for chunk in data.chunks(INFERENCE_CHUNK * width) {
            let rows = chunk.len() / width;
            let mut g = Graph::new();
            let xv = g.constant(Tensor::matrix(rows, width, chunk.to_vec())?);
            let enc = self.encode(&mut g, xv, Mode::Frozen)?;
            mus.extend_from_slice(g.value(enc.mu).data());
            lvs.extend_from_slice(g.value(enc.logvar).data());
        }
        Ok((LatentBatch::new(n, d, mus)?, LatentBatch::new(n, d, lvs)?))
    }

    /// Posterior means and log-variances of an image batch.
    pub fn encode_image_posterior(&self, images: &ImageBatch) -> Result<(LatentBatch, LatentBatch)> {
        if images.pixels() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "model expects {} pixels per image, batch has {}",
                self.input_dim(),
                images.pixels()
            )));
        }
        self.posterior_rows(images.data(), images.len())
    }

    pub fn encode_images(&self, images: &ImageBatch) -> Result<LatentBatch> {
        Ok(self.encode_image_posterior(images)?.0)
    }

    /// Decoder logits for each latent row.
    pub fn decode_logits(&self, z: &LatentBatch) -> Result<Tensor> {
        if z.dim() != self.latent_dim() {
            return Err(Error::InvalidArgument(format!(
                "decoder expects {}-d codes, got {}",
                self.latent_dim(),
                z.dim()
            )));
        }
        let mut out = Vec::with_capacity(z.len() * self.input_dim());
        for chunk in z.data().chunks(INFERENCE_CHUNK * z.dim()) {
            let rows = chunk.len() / z.dim();
            let mut g = Graph::new();
            let zv = g.constant(Tensor::matrix(rows, z.dim(), chunk.to_vec())?);
            let logits = self.decode(&mut g, zv, Mode::Frozen)?;
            out.extend_from_slice(g.value(logits).data());
        }
        Tensor::matrix(z.len(), self.input_dim(), out)
    }

    /// Decoder outputs mapped through the sigmoid, for rendering.
    pub fn decode_probs(&self, z: &LatentBatch) -> Result<Tensor> {
        Ok(self.decode_logits(z)?.map(|l| 1.0 / (1.0 + (-l).exp())))
    }
}

/// MLP mapping a latent code to one logit of "drawn from q(z)" versus
/// "drawn from the product of its marginals".
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub store: ParamStore,
    net: Mlp,
    latent_dim: usize,
}

pub const DEFAULT_DISC_HIDDEN: [usize; 3] = [256, 256, 256];

impl Discriminator {
    pub fn new<R: Rng>(latent_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if latent_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "discriminator sizes must be positive".into(),
            ));
        }
        let mut store = ParamStore::new();
        let mut sizes = vec![latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let net = Mlp::new(&mut store, &sizes, Activation::Relu, Activation::Identity, rng);
        Ok(Self {
            store,
            net,
            latent_dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// `N × 1` logits.
    pub fn forward(&self, g: &mut Graph, z: Var, mode: Mode) -> Result<Var> {
        let shape = g.value(z).shape();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "discriminator",
                left: shape.to_vec(),
                right: vec![self.latent_dim],
            });
        }
        self.net.forward(g, &self.store, z, mode)
    }

    pub fn logits(&self, z: &LatentBatch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let zv = g.constant(z.to_tensor()?);
        let out = self.forward(&mut g, zv, Mode::Frozen)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Overwrite the output layer so the network emits `logit` everywhere.
    pub fn set_constant_output(&mut self, logit: f64) {
        let last = self.net.layers.last().expect("at least one layer");
        let (w, b) = (last.weight, last.bias);
        self.store.value_mut(w).data_mut().fill(0.0);
        self.store.value_mut(b).data_mut().fill(logit);
    }
}

/// Graph nodes of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub tc: Option<Var>,
    /// The reparameterised latent sample.
    pub z: Var,
}

fn elbo_parts(g: &mut Graph, x: Var, model: &Vae, noise: Var) -> Result<(Var, Var, Var)> {
    let enc = model.encode(g, x, Mode::Train)?;
    let z = reparameterize(g, enc, noise)?;
    let logits = model.decode(g, z, Mode::Train)?;
    let recon = bernoulli_recon(g, x, logits)?;
    let kl = gaussian_kl(g, enc)?;
    Ok((z, recon, kl))
}

/// Negative ELBO: `recon + kl`.
pub fn vae_loss(g: &mut Graph, x: Var, model: &Vae, noise: Var) -> Result<LossTerms> {
    let (z, recon, kl) = elbo_parts(g, x, model, noise)?;
    let total = g.add(recon, kl)?;
    Ok(LossTerms {
        total,
        recon,
        kl,
        tc: None,
        z,
    })
}

/// `recon + β·kl`.
pub fn beta_vae_loss(
    g: &mut Graph,
    x: Var,
    model: &Vae,
    noise: Var,
    beta: f64,
) -> Result<LossTerms> {
    if !(beta >= 1.0) {
        return Err(Error::InvalidArgument(format!("beta must be ≥ 1, got {beta}")));
    }
    let (z, recon, kl) = elbo_parts(g, x, model, noise)?;
    let weighted = g.mul_scalar(kl, beta);
    let total = g.add(recon, weighted)?;
    Ok(LossTerms {
        total,
        recon,
        kl,
        tc: None,
        z,
    })
}

/// Batch mean of the discriminator logit, which equals `log D/(1−D)`.
pub fn tc_estimate(g: &mut Graph, z: Var, disc: &Discriminator, mode: Mode) -> Result<Var> {
    let logits = disc.forward(g, z, mode)?;
    if !g.value(logits).all_finite() {
        return Err(Error::NonFinite("discriminator logits".into()));
    }
    Ok(g.mean(logits))
}

/// `recon + kl + γ·tc`, with the discriminator frozen.
pub fn factor_vae_loss(
    g: &mut Graph,
    x: Var,
    model: &Vae,
    disc: &Discriminator,
    noise: Var,
    gamma: f64,
) -> Result<LossTerms> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be ≥ 0, got {gamma}")));
    }
    let (z, recon, kl) = elbo_parts(g, x, model, noise)?;
    let tc = tc_estimate(g, z, disc, Mode::Frozen)?;
    let base = g.add(recon, kl)?;
    let weighted = g.mul_scalar(tc, gamma);
    let total = g.add(base, weighted)?;
    Ok(LossTerms {
        total,
        recon,
        kl,
        tc: Some(tc),
        z,
    })
}

/// Shuffle each column independently, giving a sample from the product of
/// the batch's marginals.
pub fn permute_dims<R: Rng>(z: &LatentBatch, rng: &mut R) -> LatentBatch {
    let (n, d) = (z.len(), z.dim());
    let mut out = z.data().to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    for j in 0..d {
        order.shuffle(rng);
        for (i, &src) in order.iter().enumerate() {
            out[i * d + j] = z.get(src, j);
        }
    }
    LatentBatch::new(n, d, out).expect("same shape as input")
}

/// One RMSprop step on binary cross-entropy with label 1 for `z_real` and 0
/// for `z_perm`. Returns the accuracy of the pre-update logits.
pub fn discriminator_step(
    z_real: &LatentBatch,
    z_perm: &LatentBatch,
    disc: &mut Discriminator,
    opt: &mut Rmsprop,
) -> Result<f64> {
    if z_real.dim() != z_perm.dim() || z_real.is_empty() || z_perm.is_empty() {
        return Err(Error::InvalidArgument(
            "real and permuted batches must be nonempty with equal width".into(),
        ));
    }
    let mut g = Graph::new();
    let real = g.constant(z_real.to_tensor()?);
    let perm = g.constant(z_perm.to_tensor()?);
    let l_real = disc.forward(&mut g, real, Mode::Train)?;
    let l_perm = disc.forward(&mut g, perm, Mode::Train)?;

    let hits = g.value(l_real).data().iter().filter(|&&l| l > 0.0).count()
        + g.value(l_perm).data().iter().filter(|&&l| l <= 0.0).count();
    let accuracy = hits as f64 / (z_real.len() + z_perm.len()) as f64;

    // BCE(l, 1) = softplus(−l), BCE(l, 0) = softplus(l)
    let neg = g.neg(l_real);
    let a = g.softplus(neg);
    let b = g.softplus(l_perm);
    let sa = g.sum(a);
    let sb = g.sum(b);
    let s = g.add(sa, sb)?;
    let loss = g.mul_scalar(s, 1.0 / (z_real.len() + z_perm.len()) as f64);
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite("discriminator loss".into()));
    }
    disc.store.zero_grad();
    g.backward(loss, &mut disc.store)?;
    opt.step(&mut disc.store)?;
    disc.store.zero_grad();
    Ok(accuracy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub beta: f64,
    pub gamma: f64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: RmspropConfig,
    pub disc_hidden: Vec<usize>,
    pub disc_optimizer: RmspropConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Vae,
            beta: 4.0,
            gamma: 6.4,
            latent_dim: 10,
            hidden: vec![512],
            batch_size: 64,
            epochs: 30,
            optimizer: RmspropConfig::default(),
            disc_hidden: DEFAULT_DISC_HIDDEN.to_vec(),
            disc_optimizer: RmspropConfig {
                learning_rate: 1e-4,
                ..RmspropConfig::default()
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        if self.objective == Objective::BetaVae && !(self.beta >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must be ≥ 1, got {}",
                self.beta
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be ≥ 0, got {}",
                self.gamma
            )));
        }
        for opt in [&self.optimizer, &self.disc_optimizer] {
            if !(opt.learning_rate >= 0.0) || !(0.0..1.0).contains(&opt.rho) || !(opt.eps > 0.0)
            {
                return Err(Error::InvalidArgument(format!("invalid optimizer settings {opt:?}")));
            }
        }
        Ok(())
    }

    pub fn arch(&self, input_dim: usize) -> VaeArch {
        VaeArch {
            input_dim,
            hidden: self.hidden.clone(),
            latent_dim: self.latent_dim,
            activation: Activation::Relu,
        }
    }
}

/// Epoch means of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub tc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurves {
    pub points: Vec<LossPoint>,
}

impl LossCurves {
    pub fn first(&self) -> Option<&LossPoint> {
        self.points.first()
    }

    pub fn last(&self) -> Option<&LossPoint> {
        self.points.last()
    }
}

pub struct TrainOutcome {
    pub model: Vae,
    pub discriminator: Option<Discriminator>,
    pub curves: LossCurves,
    /// Mean discriminator accuracy per epoch (Factor-VAE only).
    pub disc_accuracy: Vec<f64>,
}

/// Independent generator `stream` of `seed`. Training uses stream 0 for
/// initialisation, 1 for shuffling and noise, 2 for permutations.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn train(data: &ImageBatch, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(data, config, |_| {})
}

/// Minibatch RMSprop training; `progress` sees each finished epoch.
///
/// Initialisation, shuffling and noise come from independent ChaCha streams
/// of `config.seed`, so the run is bitwise reproducible.
pub fn train_with_progress(
    data: &ImageBatch,
    config: &TrainConfig,
    mut progress: impl FnMut(&LossPoint),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut init_rng = rng_stream(config.seed, 0);
    let mut batch_rng = rng_stream(config.seed, 1);
    let mut perm_rng = rng_stream(config.seed, 2);

    let mut model = Vae::new(config.arch(data.pixels()), &mut init_rng)?;
    let mut opt = Rmsprop::new(config.optimizer, &model.store);
    let mut disc = match config.objective {
        Objective::FactorVae => {
            let d = Discriminator::new(config.latent_dim, &config.disc_hidden, &mut init_rng)?;
            let o = Rmsprop::new(config.disc_optimizer, &d.store);
            Some((d, o))
        }
        _ => None,
    };

    let d = config.latent_dim;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curves = LossCurves::default();
    let mut disc_accuracy = Vec::new();

    for epoch in 0..config.epochs {
        order.shuffle(&mut batch_rng);
        let (mut recon_sum, mut kl_sum, mut tc_sum, mut acc_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let n = batch.len();
            let x = data.gather(batch)?;
            let noise: Vec<f64> = (&mut batch_rng)
                .sample_iter(StandardNormal)
                .take(n * d)
                .collect();

            let mut g = Graph::new();
            let xv = g.constant(x);
            let nv = g.constant(Tensor::matrix(n, d, noise)?);
            let terms = match (config.objective, &disc) {
                (Objective::Vae, _) => vae_loss(&mut g, xv, &model, nv),
                (Objective::BetaVae, _) => beta_vae_loss(&mut g, xv, &model, nv, config.beta),
                (Objective::FactorVae, Some((dnet, _))) => {
                    factor_vae_loss(&mut g, xv, &model, dnet, nv, config.gamma)
                }
                (Objective::FactorVae, None) => unreachable!("discriminator built above"),
            }
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, step },
                other => other,
            })?;
            let total = g.value(terms.total).item()?;
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            recon_sum += g.value(terms.recon).item()? * n as f64;
            kl_sum += g.value(terms.kl).item()? * n as f64;
            if let Some(tc) = terms.tc {
                tc_sum += g.value(tc).item()? * n as f64;
            }
            let z = LatentBatch::try_from(g.value(terms.z).clone())?;

            g.backward(terms.total, &mut model.store)?;
            opt.step(&mut model.store)?;
            model.store.zero_grad();

            if let Some((dnet, dopt)) = &mut disc {
                let z_perm = permute_dims(&z, &mut perm_rng);
                acc_sum += discriminator_step(&z, &z_perm, dnet, dopt)?;
            }
            steps += 1;
        }
        let total_n = data.len() as f64;
        let point = LossPoint {
            epoch,
            recon: recon_sum / total_n,
            kl: kl_sum / total_n,
            tc: tc_sum / total_n,
        };
        progress(&point);
        curves.points.push(point);
        if disc.is_some() {
            disc_accuracy.push(acc_sum / steps as f64);
        }
    }

    Ok(TrainOutcome {
        model,
        discriminator: disc.map(|(d, _)| d),
        curves,
        disc_accuracy,
    })
}
