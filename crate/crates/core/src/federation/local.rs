use serde::{Deserialize, Serialize};

use super::FedError;

/// `w ← w − η(g + β(w − w_global))`.
pub fn prox_step(w: &mut [f64], grad: &[f64], w_global: &[f64], eta: f64, beta: f64) {
    for ((x, g), c) in w.iter_mut().zip(grad).zip(w_global) {
        *x -= eta * (g + beta * (*x - c));
    }
}

/// `iters` proximal gradient steps pulled toward `w_global`. `grad(k, w)`
/// returns the local objective's gradient at iteration `k`.
pub fn local_update<G>(
    w: &[f64],
    w_global: &[f64],
    iters: usize,
    eta: f64,
    beta: f64,
    mut grad: G,
) -> Result<Vec<f64>, FedError>
where
    G: FnMut(usize, &[f64]) -> Result<Vec<f64>, FedError>,
{
    if w.len() != w_global.len() {
        return Err(FedError::LengthMismatch {
            expected: w.len(),
            got: w_global.len(),
        });
    }
    if !(eta > 0.0) {
        return Err(FedError::Config(format!("step size {eta} must be positive")));
    }
    let mut w = w.to_vec();
    for k in 0..iters {
        let g = grad(k, &w)?;
        if g.len() != w.len() {
            return Err(FedError::LengthMismatch {
                expected: w.len(),
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(FedError::NonFiniteGradient { iteration: k });
        }
        prox_step(&mut w, &g, w_global, eta, beta);
    }
    Ok(w)
}

/// Adam state for the shared graph block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}
