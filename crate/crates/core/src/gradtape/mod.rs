//! Minimal reverse-mode differentiation engine.
//!
//! Two entry points share one engine: [`Tape`] is the define-by-run API the
//! model code records onto directly, and [`Expr`] is an immutable expression
//! graph that [`evaluate`] and [`gradient`] compile onto a fresh tape.

mod expr;
mod tape;
mod tensor;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub use expr::{Bindings, Expr, OpTag};
pub use tape::{tilted, tilted_slope, Gradients, Tape, Var};
pub use tensor::{matmul2, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("gradient requested of non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),
}

/// Forward value of `expr` under `bindings`.
pub fn evaluate(expr: &Expr, bindings: &Bindings) -> Result<Tensor, TapeError> {
    let c = expr::compile(expr, bindings)?;
    Ok(c.tape.value(c.root).clone())
}

/// Reverse-mode gradients of a scalar `expr` with respect to the named inputs.
///
/// Names in `wrt` that the expression never reads get a zero tensor shaped
/// like their binding.
pub fn gradient(
    expr: &Expr,
    bindings: &Bindings,
    wrt: &BTreeSet<String>,
) -> Result<BTreeMap<String, Tensor>, TapeError> {
    let c = expr::compile(expr, bindings)?;
    let grads = c.tape.backward(c.root)?;
    wrt.iter()
        .map(|name| {
            let g = match c.inputs.get(name) {
                Some(v) => grads.wrt(*v),
                None => {
                    let b = bindings
                        .get(name)
                        .ok_or_else(|| TapeError::UnboundInput(name.clone()))?;
                    Tensor::zeros(b.shape())
                }
            };
            Ok((name.clone(), g))
        })
        .collect()
}

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients: `max |g_ad - g_fd| / max(1, |g_ad|)` over every component.
pub fn finite_diff_check(expr: &Expr, bindings: &Bindings, wrt: &BTreeSet<String>, eps: f64) -> Result<f64, TapeError> {
    let ad = gradient(expr, bindings, wrt)?;
    let scalar = |b: &Bindings| -> Result<f64, TapeError> {
        let v = evaluate(expr, b)?;
        v.item().ok_or_else(|| TapeError::NonScalarOutput(v.shape().to_vec()))
    };
    let mut worst: f64 = 0.0;
    let mut probe = bindings.clone();
    for name in wrt {
        let g = &ad[name];
        for k in 0..g.len() {
            let orig = bindings[name].data()[k];
            probe.get_mut(name).expect("bound").data_mut()[k] = orig + eps;
            let up = scalar(&probe)?;
            probe.get_mut(name).expect("bound").data_mut()[k] = orig - eps;
            let down = scalar(&probe)?;
            probe.get_mut(name).expect("bound").data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = g.data()[k];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
