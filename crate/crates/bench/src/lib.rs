//! Fixtures shared by the criterion benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wvae_core::nn::{Activation, Rmsprop, RmspropConfig};
use wvae_core::objectives::{self, VaeArch};
use wvae_core::{Graph, Result, Tensor, Vae};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dimensions")
}

/// Random symmetric `d × d` matrix, row-major.
pub fn random_symmetric(d: usize, seed: u64) -> Vec<f64> {
    let a = random_matrix(d, d, seed);
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            s[i * d + j] = a.get2(i, j) + a.get2(j, i);
        }
    }
    s
}

/// One model, optimiser and input batch for timing single training steps.
pub struct StepFixture {
    pub model: Vae,
    pub opt: Rmsprop,
    pub batch: Tensor,
    pub noise: Tensor,
}

impl StepFixture {
    pub fn new(input: usize, hidden: usize, latent: usize, batch: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let arch = VaeArch {
            input_dim: input,
            hidden: vec![hidden],
            latent_dim: latent,
            activation: Activation::Relu,
        };
        let model = Vae::new(arch, &mut rng).expect("valid architecture");
        let opt = Rmsprop::new(RmspropConfig::default(), &model.store);
        let pixels = (0..batch * input).map(|_| rng.gen::<f64>()).collect();
        let noise = (0..batch * latent).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self {
            model,
            opt,
            batch: Tensor::matrix(batch, input, pixels).expect("positive dimensions"),
            noise: Tensor::matrix(batch, latent, noise).expect("positive dimensions"),
        }
    }

    /// Forward, backward and one RMSprop update; returns the loss.
    pub fn step(&mut self) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(self.batch.clone());
        let eps = g.constant(self.noise.clone());
        let terms = objectives::vae_loss(&mut g, x, &self.model, eps)?;
        let loss = g.value(terms.total).item()?;
        g.backward(terms.total, &mut self.model.store)?;
        self.opt.step(&mut self.model.store)?;
        self.model.store.zero_grad();
        Ok(loss)
    }
}
