use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate_personalized, aggregation_weights, RowParams};
use super::config::PhiRule;
use super::local::prox_step;
use super::FedError;

/// Constants of the convergence bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Smoothness.
    pub l: f64,
    /// Gradient-norm bound.
    pub m: f64,
    /// Local/global gap constant.
    pub q: f64,
    pub beta: f64,
    pub k: usize,
    pub t: usize,
    pub sigma: f64,
    /// `f_i(w_i(0)) − f_i*`.
    pub f0_minus_fstar: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub bound: f64,
    pub eta_max: f64,
    pub phi: f64,
    pub psi: f64,
}

/// Upper bound on `min_t ‖∇f_i(w_i(t))‖²` for `η_t = 1/√T`.
pub fn theoretical_bound(c: &BoundInputs) -> Result<Bound, FedError> {
    if c.k < 2 {
        return Err(FedError::KTooSmall(c.k));
    }
    for (name, v) in [("L", c.l), ("beta", c.beta), ("T", c.t as f64)] {
        if !(v > 0.0) {
            return Err(FedError::NonPositiveConstant(name));
        }
    }
    for (name, v) in [
        ("M", c.m),
        ("Q", c.q),
        ("sigma", c.sigma),
        ("f0 - f*", c.f0_minus_fstar),
    ] {
        if !(v >= 0.0) {
            return Err(FedError::NonPositiveConstant(name));
        }
    }
    let k = c.k as f64;
    let t = c.t as f64;
    let l2b2 = c.l * c.l + c.beta * c.beta;
    let eta_max = (1.0 / (c.l * k)).min(1.0 / (c.beta * (3.0 * (k - 1.0) * (k + 1.0)).sqrt()));
    let phi = 27.0 * l2b2 * (k + 1.0) * c.m * c.m;
    let psi = (9.0 * l2b2 / (c.beta * c.beta * (k - 1.0)) + 3.0 * c.beta * c.beta) * c.sigma * c.sigma * c.q * c.q;
    let bound = 2.0 * c.f0_minus_fstar / (k * t.sqrt()) + (phi + psi) / t;
    Ok(Bound {
        bound,
        eta_max,
        phi,
        psi,
    })
}

/// `f(w) = ½ Σ_k a_k (w_k − c_k)²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticObjective {
    pub diag: Vec<f64>,
    pub center: Vec<f64>,
}

impl QuadraticObjective {
    pub fn value(&self, w: &[f64]) -> f64 {
        0.5 * w
            .iter()
            .zip(&self.diag)
            .zip(&self.center)
            .map(|((x, a), c)| a * (x - c) * (x - c))
            .sum::<f64>()
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.diag)
            .zip(&self.center)
            .map(|((x, a), c)| a * (x - c))
            .collect()
    }

    pub fn smoothness(&self) -> f64 {
        self.diag.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticRun {
    pub rounds: usize,
    pub local_iters: usize,
    pub eta: f64,
    pub beta: f64,
    pub sigma: f64,
    pub tau: f64,
    pub alpha: f64,
}

/// Trajectory diagnostics of a personalized run on quadratic objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    /// `‖∇f_i(w_i(t))‖²` per client and round.
    pub grad_norm_sq: Vec<Vec<f64>>,
    /// Largest smoothness constant.
    pub l: f64,
    /// Largest gradient norm over all iterates.
    pub m: f64,
    /// `max_t ‖w_i(t) − w^G_i(t)‖ / (σ η)`.
    pub q: f64,
    pub f0_minus_fstar: Vec<f64>,
}

impl ConvergenceTrace {
    pub fn min_grad_norm_sq(&self, i: usize) -> f64 {
        self.grad_norm_sq[i].iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Personalized federated optimization of quadratic objectives from a
/// shared start `w0`, with attention aggregation and no spatial channel.
pub fn simulate_quadratic(
    objectives: &[QuadraticObjective],
    w0: &[f64],
    run: &QuadraticRun,
) -> Result<ConvergenceTrace, FedError> {
    let n = objectives.len();
    let mut w: Vec<Vec<f64>> = vec![w0.to_vec(); n];
    let mut anchors = w.clone();
    let mut grad_norm_sq = vec![Vec::with_capacity(run.rounds); n];
    let mut m = 0.0f64;
    let mut gap = 0.0f64;
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    for _ in 0..run.rounds {
        for i in 0..n {
            grad_norm_sq[i].push(sq(&objectives[i].grad(&w[i])));
            let d: Vec<f64> = w[i].iter().zip(&anchors[i]).map(|(a, b)| a - b).collect();
            gap = gap.max(sq(&d).sqrt());
            for _ in 0..run.local_iters {
                let g = objectives[i].grad(&w[i]);
                m = m.max(sq(&g).sqrt());
                prox_step(&mut w[i], &g, &anchors[i], run.eta, run.beta);
            }
        }
        if n > 1 {
            let refs: Vec<&[f64]> = w.iter().map(Vec::as_slice).collect();
            let p = RowParams {
                sigma: run.sigma,
                tau: run.tau,
                alpha: run.alpha,
                rule: PhiRule::Squared,
                gate_spatial: true,
            };
            let spatial = vec![1.0; n];
            for (i, anchor) in anchors.iter_mut().enumerate() {
                let row = aggregation_weights(&refs, i, &spatial, p)?;
                *anchor = aggregate_personalized(&refs, &row.lambda)?;
            }
        } else {
            anchors = w.clone();
        }
    }
    Ok(ConvergenceTrace {
        grad_norm_sq,
        l: objectives
            .iter()
            .map(QuadraticObjective::smoothness)
            .fold(0.0, f64::max),
        m,
        q: gap / (run.sigma * run.eta),
        f0_minus_fstar: objectives.iter().map(|o| o.value(w0)).collect(),
    })
}
