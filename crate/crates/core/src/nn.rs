//! Dense layers, the Gaussian encoder terms and the RMSprop optimizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Bounds applied to the encoder's log-variance before it is exponentiated.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Whether a layer's parameters take part in the gradient of this graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
}

/// Fully connected layer computing `act(x · Wᵀ + b)` on row-major batches.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl DenseLayer {
    /// Registers a `outputs × inputs` weight and an `outputs` bias, both
    /// drawn uniformly from `±1/√inputs`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut sample = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let w = Tensor::matrix(outputs, inputs, sample(outputs * inputs))
            .expect("layer sizes are positive");
        let b = Tensor::vector(sample(outputs)).expect("layer sizes are positive");
        Self {
            weight: store.register(w),
            bias: store.register(b),
            inputs,
            outputs,
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.inputs {
            return Err(Error::ShapeMismatch {
                op: "dense",
                left: shape,
                right: vec![self.outputs, self.inputs],
            });
        }
        let (w, b) = match mode {
            Mode::Train => (g.param(store, self.weight), g.param(store, self.bias)),
            Mode::Frozen => (g.frozen(store, self.weight), g.frozen(store, self.bias)),
        };
        let xw = g.matmul_t(x, w)?;
        // tile the bias over the batch: ones[N×1] · b[1×out]
        let ones = g.constant(Tensor::full(&[shape[0], 1], 1.0));
        let brow = g.reshape(b, &[1, self.outputs])?;
        let tiled = g.matmul(ones, brow)?;
        let pre = g.add(xw, tiled)?;
        Ok(self.activation.apply(g, pre))
    }
}

/// A chain of dense layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`; every layer but the last uses
    /// `hidden`, the last uses `output`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output } else { hidden };
                DenseLayer::new(store, w[0], w[1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(g, store, h, mode))
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }
}

/// Parameters of the diagonal Gaussian posterior `q(z|x)` for a batch.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub mu: Var,
    /// Natural log of σ², already clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Var,
}

/// `z = μ + exp(logvar / 2) ⊙ ε` with externally supplied standard-normal ε.
pub fn reparameterize(g: &mut Graph, enc: EncoderOutput, noise: Var) -> Result<Var> {
    let (mu, lv, eps) = (g.value(enc.mu), g.value(enc.logvar), g.value(noise));
    if mu.shape() != lv.shape() || mu.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            left: mu.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    let half = g.mul_scalar(enc.logvar, 0.5);
    let sigma = g.exp(half);
    let scaled = g.mul(sigma, noise)?;
    g.add(enc.mu, scaled)
}

/// Batch mean of `KL(N(μ, σ²) || N(0, I))`, i.e. of
/// `½ Σ_j (μ_j² + σ_j² − log σ_j² − 1)`.
pub fn gaussian_kl(g: &mut Graph, enc: EncoderOutput) -> Result<Var> {
    let batch = g.value(enc.mu).rows() as f64;
    let mu2 = g.square(enc.mu);
    let var = g.exp(enc.logvar);
    let t = g.add(mu2, var)?;
    let t = g.sub(t, enc.logvar)?;
    let t = g.add_scalar(t, -1.0);
    let s = g.sum(t);
    let kl = g.mul_scalar(s, 0.5 / batch);
    if !g.value(kl).all_finite() {
        return Err(Error::NonFinite("gaussian_kl".into()));
    }
    Ok(kl)
}

/// Batch mean of the negative Bernoulli log-likelihood of `x` under
/// `sigmoid(logits)`, summed over pixels: `softplus(l) − x·l`.
pub fn bernoulli_recon(g: &mut Graph, x: Var, logits: Var) -> Result<Var> {
    let xs = g.value(x);
    if xs.shape() != g.value(logits).shape() {
        return Err(Error::ShapeMismatch {
            op: "bernoulli_recon",
            left: xs.shape().to_vec(),
            right: g.value(logits).shape().to_vec(),
        });
    }
    if let Some(bad) = xs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain {
            op: "bernoulli_recon",
            detail: format!("target {bad} outside [0, 1]"),
        });
    }
    let batch = xs.rows() as f64;
    let sp = g.softplus(logits);
    let xl = g.mul(x, logits)?;
    let per_pixel = g.sub(sp, xl)?;
    let s = g.sum(per_pixel);
    Ok(g.mul_scalar(s, 1.0 / batch))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmspropConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

/// RMSprop: `acc ← ρ·acc + (1−ρ)·g²`, `θ ← θ − η·g / (√acc + ε)`.
#[derive(Clone, Debug)]
pub struct Rmsprop {
    pub config: RmspropConfig,
    acc: Vec<Tensor>,
}

impl Rmsprop {
    pub fn new(config: RmspropConfig, store: &ParamStore) -> Self {
        let acc = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect();
        Self { config, acc }
    }

    pub fn accumulator(&self, id: ParamId) -> &Tensor {
        &self.acc[id.0]
    }

    /// Apply one update from the gradients currently held by `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.acc.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.acc.len(),
                store.len()
            )));
        }
        if let Some(missing) = store.ids().find(|&id| store.grad(id).is_none()) {
            return Err(Error::MissingGradient(missing.0));
        }
        let RmspropConfig {
            learning_rate: lr,
            rho,
            eps,
        } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let (value, grad) = store.value_and_grad(id);
            let grad = grad.expect("checked above");
            let acc = self.acc[id.0].data_mut();
            for ((a, p), &gr) in acc.iter_mut().zip(value.data_mut()).zip(grad.data()) {
                *a = rho * *a + (1.0 - rho) * gr * gr;
                *p -= lr * gr / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}
