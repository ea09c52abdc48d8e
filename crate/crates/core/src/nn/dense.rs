use rand::Rng;

use super::{Module, Param};
use crate::error::{Error, Result};
use crate::linalg;

/// Fully connected layer `y = W x + b` with `W` stored row-major `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Param,
    pub b: Param,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            w: Param::uniform(format!("{name}.w"), &[out_dim, in_dim], in_dim, rng),
            b: Param::uniform(format!("{name}.b"), &[out_dim], in_dim, rng),
        }
    }

    pub fn zeros(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self { w: Param::zeros(format!("{name}.w"), &[out_dim, in_dim]), b: Param::zeros(format!("{name}.b"), &[out_dim]) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn try_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!("{}: input has {} dims, expected {}", self.w.name, x.len(), self.in_dim())));
        }
        Ok(self.forward(x))
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.value.clone();
        let (rows, cols) = (self.out_dim(), self.in_dim());
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += linalg::dot(&self.w.value[r * cols..(r + 1) * cols], x);
        }
        debug_assert_eq!(rows, y.len());
        y
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy`; returns `dx = Wᵀ dy`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.out_dim(), self.in_dim());
        linalg::outer_acc(&mut self.w.grad, rows, cols, dy, x);
        linalg::axpy(1.0, dy, &mut self.b.grad);
        let mut dx = vec![0.0; cols];
        linalg::matvec_t_acc(&self.w.value, rows, cols, dy, &mut dx);
        dx
    }
}

impl Module for Dense {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;
    use crate::rng;

    #[test]
    fn identity_and_constant_layers() {
        let mut d = Dense::zeros("id", 3, 3);
        for i in 0..3 {
            d.w.value[i * 3 + i] = 1.0;
        }
        assert_eq!(d.forward(&[1.0, -2.0, 0.5]), vec![1.0, -2.0, 0.5]);

        let mut c = Dense::zeros("c", 2, 2);
        c.b.value = vec![4.0, -1.0];
        assert_eq!(c.forward(&[9.0, 3.0]), vec![4.0, -1.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let d = Dense::zeros("d", 3, 2);
        assert!(matches!(d.try_forward(&[1.0]), Err(Error::Shape(_))));
    }

    /// Dense layer with its input exposed as a parameter so the check covers `dx`.
    struct WithInput {
        layer: Dense,
        x: Param,
        probe: Vec<f64>,
    }

    impl Module for WithInput {
        fn params(&self) -> Vec<&Param> {
            vec![&self.layer.w, &self.layer.b, &self.x]
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.layer.w, &mut self.layer.b, &mut self.x]
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut r = rng::from_seed(seed);
            let mut m = WithInput {
                layer: Dense::new("d", 3, 5, &mut r),
                x: Param::uniform("x", &[3], 1, &mut r),
                probe: Param::uniform("p", &[5], 1, &mut r).value,
            };
            let report = finite_diff_check(&mut m, 1e-5, |m| {
                let x = m.x.value.clone();
                let y = m.layer.forward(&x);
                // loss = Σ probe ⊙ tanh(y)
                let loss: f64 = y.iter().zip(&m.probe).map(|(y, p)| p * y.tanh()).sum();
                let dy: Vec<f64> = y.iter().zip(&m.probe).map(|(y, p)| p * (1.0 - y.tanh().powi(2))).collect();
                let dx = m.layer.backward(&x, &dy);
                linalg::axpy(1.0, &dx, &mut m.x.grad);
                loss
            });
            assert!(report.max_rel_error <= 1e-6, "seed {seed}: {report:?}");
        }
    }
}
