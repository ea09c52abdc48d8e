use rand::Rng;

use super::{sigmoid, Module, Param};
use crate::error::{Error, Result};
use crate::linalg;

/// Single-layer GRU cell.
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// ĥ  = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ ĥ + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_z: Param,
    pub u_z: Param,
    pub b_z: Param,
    pub w_r: Param,
    pub u_r: Param,
    pub b_r: Param,
    pub w_h: Param,
    pub u_h: Param,
    pub b_h: Param,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    rh: Vec<f64>,
    h_cand: Vec<f64>,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let p = |suffix: &str, shape: &[usize], rng: &mut R| Param::uniform(format!("{name}.{suffix}"), shape, hidden, rng);
        Self {
            w_z: p("w_z", &[hidden, in_dim], rng),
            u_z: p("u_z", &[hidden, hidden], rng),
            b_z: p("b_z", &[hidden], rng),
            w_r: p("w_r", &[hidden, in_dim], rng),
            u_r: p("u_r", &[hidden, hidden], rng),
            b_r: p("b_r", &[hidden], rng),
            w_h: p("w_h", &[hidden, in_dim], rng),
            u_h: p("u_h", &[hidden, hidden], rng),
            b_h: p("b_h", &[hidden], rng),
        }
    }

    pub fn zeros(name: &str, in_dim: usize, hidden: usize) -> Self {
        let p = |suffix: &str, shape: &[usize]| Param::zeros(format!("{name}.{suffix}"), shape);
        Self {
            w_z: p("w_z", &[hidden, in_dim]),
            u_z: p("u_z", &[hidden, hidden]),
            b_z: p("b_z", &[hidden]),
            w_r: p("w_r", &[hidden, in_dim]),
            u_r: p("u_r", &[hidden, hidden]),
            b_r: p("b_r", &[hidden]),
            w_h: p("w_h", &[hidden, in_dim]),
            u_h: p("u_h", &[hidden, hidden]),
            b_h: p("b_h", &[hidden]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_z.shape[1]
    }

    pub fn hidden(&self) -> usize {
        self.w_z.shape[0]
    }

    fn affine(w: &Param, u: &Param, b: &Param, x: &[f64], h: &[f64]) -> Vec<f64> {
        let (hd, id) = (w.shape[0], w.shape[1]);
        let mut a = b.value.clone();
        for (k, ak) in a.iter_mut().enumerate() {
            *ak += linalg::dot(&w.value[k * id..(k + 1) * id], x) + linalg::dot(&u.value[k * hd..(k + 1) * hd], h);
        }
        a
    }

    pub fn try_forward(&self, x: &[f64], h: &[f64]) -> Result<(Vec<f64>, GruCache)> {
        if x.len() != self.in_dim() || h.len() != self.hidden() {
            return Err(Error::Shape(format!(
                "gru: got x[{}], h[{}], expected x[{}], h[{}]",
                x.len(),
                h.len(),
                self.in_dim(),
                self.hidden()
            )));
        }
        Ok(self.forward(x, h))
    }

    pub fn forward(&self, x: &[f64], h: &[f64]) -> (Vec<f64>, GruCache) {
        let z: Vec<f64> = Self::affine(&self.w_z, &self.u_z, &self.b_z, x, h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = Self::affine(&self.w_r, &self.u_r, &self.b_r, x, h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(r, h)| r * h).collect();
        let h_cand: Vec<f64> = Self::affine(&self.w_h, &self.u_h, &self.b_h, x, &rh).into_iter().map(f64::tanh).collect();
        let h_next: Vec<f64> = (0..h.len()).map(|k| (1.0 - z[k]) * h_cand[k] + z[k] * h[k]).collect();
        let cache = GruCache { x: x.to_vec(), h: h.to_vec(), z, r, rh, h_cand };
        (h_next, cache)
    }

    fn affine_backward(w: &mut Param, u: &mut Param, b: &mut Param, x: &[f64], h: &[f64], da: &[f64], dx: &mut [f64], dh: &mut [f64]) {
        let (hd, id) = (w.shape[0], w.shape[1]);
        linalg::outer_acc(&mut w.grad, hd, id, da, x);
        linalg::outer_acc(&mut u.grad, hd, hd, da, h);
        linalg::axpy(1.0, da, &mut b.grad);
        linalg::matvec_t_acc(&w.value, hd, id, da, dx);
        linalg::matvec_t_acc(&u.value, hd, hd, da, dh);
    }

    /// Returns `(dx, dh)` for upstream `dh_next`.
    pub fn backward(&mut self, cache: &GruCache, dh_next: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = self.hidden();
        let GruCache { x, h, z, r, rh, h_cand } = cache;
        let mut dx = vec![0.0; self.in_dim()];
        let mut dh: Vec<f64> = (0..hd).map(|k| dh_next[k] * z[k]).collect();

        let da_h: Vec<f64> = (0..hd).map(|k| dh_next[k] * (1.0 - z[k]) * (1.0 - h_cand[k] * h_cand[k])).collect();
        let da_z: Vec<f64> = (0..hd).map(|k| dh_next[k] * (h[k] - h_cand[k]) * z[k] * (1.0 - z[k])).collect();

        let mut drh = vec![0.0; hd];
        Self::affine_backward(&mut self.w_h, &mut self.u_h, &mut self.b_h, x, rh, &da_h, &mut dx, &mut drh);
        for k in 0..hd {
            dh[k] += drh[k] * r[k];
        }
        let da_r: Vec<f64> = (0..hd).map(|k| drh[k] * h[k] * r[k] * (1.0 - r[k])).collect();
        Self::affine_backward(&mut self.w_r, &mut self.u_r, &mut self.b_r, x, h, &da_r, &mut dx, &mut dh);
        Self::affine_backward(&mut self.w_z, &mut self.u_z, &mut self.b_z, x, h, &da_z, &mut dx, &mut dh);
        (dx, dh)
    }
}

impl Module for GruCell {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h, &self.u_h, &self.b_h]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }
}
