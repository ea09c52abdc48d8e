//! Minimal differentiable building blocks with hand-written backward passes.
//!
//! Layers keep their parameters in [`Param`]s; `forward` returns a cache and
//! `backward` consumes it, accumulating parameter gradients and returning the
//! gradient with respect to the inputs.

mod adam;
mod attention;
mod checkpoint;
mod dense;
mod gradcheck;
mod gru;
mod loss;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use attention::{AttentionCache, SelfAttention};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, OptimizerState};
pub use dense::Dense;
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, GRAD_FLOOR};
pub use gru::{GruCache, GruCell};
pub use loss::{log_softmax, masked_softmax, softmax, softmax_cross_entropy};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { name: name.into(), shape: shape.to_vec(), value: vec![0.0; len], grad: vec![0.0; len] }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape);
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for v in &mut p.value {
            *v = dist.sample(rng);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters.
pub trait Module {
    /// Trainable parameters, in a stable order.
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Non-trainable tensors that still belong in checkpoints.
    fn frozen(&self) -> Vec<&Param> {
        Vec::new()
    }
    fn frozen_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
