use rand::Rng;

use super::{Module, Param};
use crate::error::{Error, Result};
use crate::linalg;

/// Single-head scaled dot-product self-attention.
///
/// Rows flagged `false` in the mask never receive attention, but still get an
/// output row (they attend over the unmasked rows like everyone else).
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    /// Projections stored `[d_model × d_in]`.
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    inputs: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Row-stochastic attention matrix, `t × t`.
    pub attn: Vec<Vec<f64>>,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, d_model: usize, rng: &mut R) -> Self {
        Self {
            w_q: Param::uniform(format!("{name}.w_q"), &[d_model, in_dim], in_dim, rng),
            w_k: Param::uniform(format!("{name}.w_k"), &[d_model, in_dim], in_dim, rng),
            w_v: Param::uniform(format!("{name}.w_v"), &[d_model, in_dim], in_dim, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_q.shape[1]
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape[0]
    }

    fn project(w: &Param, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.shape[0]];
        linalg::matvec(&w.value, w.shape[0], w.shape[1], x, &mut out);
        out
    }

    pub fn forward(&self, inputs: &[Vec<f64>], mask: &[bool]) -> Result<(Vec<Vec<f64>>, AttentionCache)> {
        let t = inputs.len();
        if t == 0 || mask.len() != t {
            return Err(Error::Shape(format!("attention: {t} rows with mask of length {}", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("attention: every row is masked".into()));
        }
        if let Some(row) = inputs.iter().find(|r| r.len() != self.in_dim()) {
            return Err(Error::Shape(format!("attention: row has {} dims, expected {}", row.len(), self.in_dim())));
        }
        let scale = 1.0 / (self.d_model() as f64).sqrt();
        let q: Vec<Vec<f64>> = inputs.iter().map(|x| Self::project(&self.w_q, x)).collect();
        let k: Vec<Vec<f64>> = inputs.iter().map(|x| Self::project(&self.w_k, x)).collect();
        let v: Vec<Vec<f64>> = inputs.iter().map(|x| Self::project(&self.w_v, x)).collect();

        let mut attn = vec![vec![0.0; t]; t];
        let mut out = vec![vec![0.0; self.d_model()]; t];
        for i in 0..t {
            let scores: Vec<f64> =
                (0..t).map(|j| if mask[j] { linalg::dot(&q[i], &k[j]) * scale } else { f64::NEG_INFINITY }).collect();
            attn[i] = super::masked_softmax(&scores, mask);
            for j in 0..t {
                if attn[i][j] != 0.0 {
                    linalg::axpy(attn[i][j], &v[j], &mut out[i]);
                }
            }
        }
        Ok((out, AttentionCache { inputs: inputs.to_vec(), q, k, v, attn }))
    }

    /// Accumulates projection gradients; returns the gradient for each input row.
    pub fn backward(&mut self, cache: &AttentionCache, d_out: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let t = cache.inputs.len();
        let dm = self.d_model();
        let scale = 1.0 / (dm as f64).sqrt();
        let mut dq = vec![vec![0.0; dm]; t];
        let mut dk = vec![vec![0.0; dm]; t];
        let mut dv = vec![vec![0.0; dm]; t];
        for i in 0..t {
            let a = &cache.attn[i];
            let da: Vec<f64> = (0..t).map(|j| if a[j] != 0.0 { linalg::dot(&d_out[i], &cache.v[j]) } else { 0.0 }).collect();
            let weighted: f64 = a.iter().zip(&da).map(|(a, d)| a * d).sum();
            for j in 0..t {
                if a[j] == 0.0 {
                    continue;
                }
                linalg::axpy(a[j], &d_out[i], &mut dv[j]);
                let ds = a[j] * (da[j] - weighted) * scale;
                linalg::axpy(ds, &cache.k[j], &mut dq[i]);
                linalg::axpy(ds, &cache.q[i], &mut dk[j]);
            }
        }
        let din = self.in_dim();
        let mut dx = vec![vec![0.0; din]; t];
        for i in 0..t {
            let x = &cache.inputs[i];
            for (w, g) in [(&mut self.w_q, &dq[i]), (&mut self.w_k, &dk[i]), (&mut self.w_v, &dv[i])] {
                linalg::outer_acc(&mut w.grad, dm, din, g, x);
                linalg::matvec_t_acc(&w.value, dm, din, g, &mut dx[i]);
            }
        }
        dx
    }
}

impl Module for SelfAttention {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w_q, &self.w_k, &self.w_v]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }
}
