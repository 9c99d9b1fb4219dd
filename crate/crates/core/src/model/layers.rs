//! Encoder, spatial-temporal graph block and decoder.
//!
//! Every layer is recorded on a [`Tape`] with a leading batch axis. The
//! free functions at the bottom wrap them for a single sample and plain
//! tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::same_padding;
use super::params::ParamLayout;
use super::ModelError;
use crate::gradtape::{matmul2, Tape, Tensor, Var};

/// 1-D convolution encoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `[f, F, k]`
    pub w: Tensor,
    /// `[f]`
    pub b: Tensor,
}

/// Decoder: convolution over the concatenated features, then a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// `[c, f_graph + f, k]`
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    /// `[c · d, Q · p]`
    pub lin_w: Tensor,
    pub lin_b: Tensor,
}

/// Parameters of one spatial-temporal graph block.
#[derive(Clone, Debug, PartialEq)]
pub struct StBlockParams {
    /// Spatial attention `V_s`, `b_s` (`[N, N]`), `W_1` (`[d]`), `W_2` (`[f, d]`), `W_3` (`[f]`).
    pub sat_v: Tensor,
    pub sat_b: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    /// Temporal attention `V_e`, `b_e` (`[d, d]`), `U_1` (`[N]`), `U_2` (`[f, N]`), `U_3` (`[f]`).
    pub tat_v: Tensor,
    pub tat_b: Tensor,
    pub u1: Tensor,
    pub u2: Tensor,
    pub u3: Tensor,
    /// Chebyshev coefficients `[K]`.
    pub theta: Tensor,
    /// Temporal convolution kernel `[f_out, f, k]`.
    pub phi: Tensor,
}

impl EncoderParams {
    pub fn from_flat(layout: &ParamLayout, v: &[f64]) -> Self {
        Self {
            w: layout.tensor(v, "enc.w"),
            b: layout.tensor(v, "enc.b"),
        }
    }
}

impl DecoderParams {
    pub fn from_flat(layout: &ParamLayout, v: &[f64]) -> Self {
        Self {
            conv_w: layout.tensor(v, "dec.conv.w"),
            conv_b: layout.tensor(v, "dec.conv.b"),
            lin_w: layout.tensor(v, "dec.lin.w"),
            lin_b: layout.tensor(v, "dec.lin.b"),
        }
    }
}

impl StBlockParams {
    pub fn from_flat(layout: &ParamLayout, v: &[f64], block: usize) -> Self {
        let t = |s: &str| layout.tensor(v, &format!("block{block}.{s}"));
        Self {
            sat_v: t("sat.v"),
            sat_b: t("sat.b"),
            w1: t("sat.w1"),
            w2: t("sat.w2"),
            w3: t("sat.w3"),
            tat_v: t("tat.v"),
            tat_b: t("tat.b"),
            u1: t("tat.u1"),
            u2: t("tat.u2"),
            u3: t("tat.u3"),
            theta: t("cheb.theta"),
            phi: t("tconv.phi"),
        }
    }

    /// All-zero parameters for `n` stations, `f` input and `f_out` output channels, `d` steps.
    pub fn zeros(n: usize, f: usize, f_out: usize, d: usize, k: usize, kt: usize) -> Self {
        Self {
            sat_v: Tensor::zeros(&[n, n]),
            sat_b: Tensor::zeros(&[n, n]),
            w1: Tensor::zeros(&[d]),
            w2: Tensor::zeros(&[f, d]),
            w3: Tensor::zeros(&[f]),
            tat_v: Tensor::zeros(&[d, d]),
            tat_b: Tensor::zeros(&[d, d]),
            u1: Tensor::zeros(&[n]),
            u2: Tensor::zeros(&[f, n]),
            u3: Tensor::zeros(&[f]),
            theta: Tensor::zeros(&[k]),
            phi: Tensor::zeros(&[f_out, f, kt]),
        }
    }

    pub fn on_tape(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            sat_v: tape.leaf(self.sat_v.clone()),
            sat_b: tape.leaf(self.sat_b.clone()),
            w1: tape.leaf(self.w1.clone()),
            w2: tape.leaf(self.w2.clone()),
            w3: tape.leaf(self.w3.clone()),
            tat_v: tape.leaf(self.tat_v.clone()),
            tat_b: tape.leaf(self.tat_b.clone()),
            u1: tape.leaf(self.u1.clone()),
            u2: tape.leaf(self.u2.clone()),
            u3: tape.leaf(self.u3.clone()),
            theta: tape.leaf(self.theta.clone()),
            phi: tape.leaf(self.phi.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub lin_w: Var,
    pub lin_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub sat_v: Var,
    pub sat_b: Var,
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub tat_v: Var,
    pub tat_b: Var,
    pub u1: Var,
    pub u2: Var,
    pub u3: Var,
    pub theta: Var,
    pub phi: Var,
}

impl EncoderParams {
    pub fn on_tape(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
        }
    }
}

impl DecoderParams {
    pub fn on_tape(&self, tape: &mut Tape) -> DecoderVars {
        DecoderVars {
            conv_w: tape.leaf(self.conv_w.clone()),
            conv_b: tape.leaf(self.conv_b.clone()),
            lin_w: tape.leaf(self.lin_w.clone()),
            lin_b: tape.leaf(self.lin_b.clone()),
        }
    }
}

/// Rescaled graph Laplacian and its spectral radius.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledLaplacian {
    /// `L = I - D^{-1/2} A D^{-1/2}` with `A` the off-diagonal adjacency.
    pub laplacian: Tensor,
    /// `L̃ = (2 / λ_max) L - I`.
    pub scaled: Tensor,
    pub lambda_max: f64,
    pub converged: bool,
    /// Nodes without neighbours.
    pub isolated: Vec<usize>,
}

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 1_000_000;

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, or `None`
/// if the residual `‖Lv − ρv‖` does not fall below tolerance.
fn power_iteration(m: &Tensor) -> Option<f64> {
    let n = m.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|a| *a /= nv);
    let apply = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    };
    for _ in 0..POWER_MAX_ITERS {
        let w = apply(&v);
        let rho: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let resid = w.iter().zip(&v).map(|(a, b)| (a - rho * b).powi(2)).sum::<f64>().sqrt();
        if resid < POWER_TOL {
            return Some(rho);
        }
        let nw = norm(&w);
        if nw == 0.0 {
            return None;
        }
        v = w.into_iter().map(|a| a / nw).collect();
    }
    None
}

/// Symmetric normalized Laplacian of the off-diagonal adjacency, rescaled so
/// its spectrum lies in `[-1, 1]`. Zero-degree nodes use `D^{-1/2} = 0`.
pub fn normalized_laplacian(adjacency: &[Vec<f64>]) -> Result<ScaledLaplacian, ModelError> {
    let n = adjacency.len();
    if n == 0 || adjacency.iter().any(|r| r.len() != n) {
        return Err(ModelError::Graph("adjacency must be a nonempty square matrix".into()));
    }
    for i in 0..n {
        for j in 0..n {
            let a = adjacency[i][j];
            if !(a >= 0.0) || a != adjacency[j][i] {
                return Err(ModelError::Graph(format!(
                    "adjacency must be symmetric and nonnegative (entry {i},{j})"
                )));
            }
        }
    }
    let degree: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| adjacency[i][j]).sum())
        .collect();
    let isolated: Vec<usize> = (0..n).filter(|&i| degree[i] == 0.0).collect();
    if !isolated.is_empty() {
        log::info!("graph nodes {isolated:?} have no neighbours");
    }
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut l = Tensor::eye(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                l.data_mut()[i * n + j] -= inv_sqrt[i] * adjacency[i][j] * inv_sqrt[j];
            }
        }
    }
    let (lambda_max, converged) = match power_iteration(&l) {
        Some(v) if v > 0.0 => (v, true),
        _ => {
            log::warn!("power iteration did not converge; using lambda_max = 2");
            (2.0, false)
        }
    };
    let mut scaled = l.map(|x| 2.0 * x / lambda_max);
    for i in 0..n {
        scaled.data_mut()[i * n + i] -= 1.0;
    }
    Ok(ScaledLaplacian {
        laplacian: l,
        scaled,
        lambda_max,
        converged,
        isolated,
    })
}

/// `T_0 = I`, `T_1 = L̃`, `T_k = 2 L̃ T_{k-1} - T_{k-2}`.
pub fn chebyshev_basis(scaled: &Tensor, order: usize) -> Vec<Tensor> {
    let n = scaled.shape()[0];
    let mut out: Vec<Tensor> = Vec::with_capacity(order);
    for k in 0..order {
        let t = match k {
            0 => Tensor::eye(n),
            1 => scaled.clone(),
            _ => {
                let prod = matmul2(scaled, &out[k - 1]);
                let prev = &out[k - 2];
                let data = prod.data().iter().zip(prev.data()).map(|(a, b)| 2.0 * a - b).collect();
                Tensor::new(vec![n, n], data).expect("square")
            }
        };
        out.push(t);
    }
    out
}

fn dims4(tape: &Tape, h: Var, op: &str) -> Result<[usize; 4], ModelError> {
    match *tape.shape(h) {
        [b, n, f, d] => Ok([b, n, f, d]),
        ref s => Err(ModelError::Shape(format!("{op}: expected [B, N, f, d], got {s:?}"))),
    }
}

/// `H` contracted with `w` (`[f]`) over the feature axis: `[B, N, f, d] -> [B, N, d]`.
fn contract_features(tape: &mut Tape, h: Var, w: Var, dims: [usize; 4]) -> Result<Var, ModelError> {
    let [b, n, f, d] = dims;
    let ht = tape.permute(h, &[0, 1, 3, 2])?;
    let flat = tape.reshape(ht, &[b * n * d, f])?;
    let wc = tape.reshape(w, &[f, 1])?;
    let out = tape.matmul(flat, wc)?;
    Ok(tape.reshape(out, &[b, n, d])?)
}

/// Row-softmaxed spatial attention `[B, N, N]`.
pub fn tape_spatial_attention(tape: &mut Tape, h: Var, p: &BlockVars) -> Result<Var, ModelError> {
    let dims @ [b, n, f, d] = dims4(tape, h, "spatial attention")?;
    // (H W1) W2 : [B N f d]·[d] -> [B N f] -> ·[f d] -> [B N d]
    let flat = tape.reshape(h, &[b * n * f, d])?;
    let w1 = tape.reshape(p.w1, &[d, 1])?;
    let hw1 = tape.matmul(flat, w1)?;
    let hw1 = tape.reshape(hw1, &[b * n, f])?;
    let lhs = tape.matmul(hw1, p.w2)?;
    let lhs = tape.reshape(lhs, &[b, n, d])?;
    // (W3 H)^T : [B d N]
    let rhs = contract_features(tape, h, p.w3, dims)?;
    let rhs = tape.transpose(rhs)?;
    let prod = tape.matmul(lhs, rhs)?;
    let pre = tape.add(prod, p.sat_b)?;
    let act = tape.sigmoid(pre);
    let s = tape.matmul(p.sat_v, act)?;
    Ok(tape.softmax_rows(s)?)
}

/// Row-softmaxed temporal attention `Ē` (`[B, d, d]`) and `Ĥ = H · Ē` (`[B, N, f, d]`).
pub fn tape_temporal_attention(tape: &mut Tape, h: Var, p: &BlockVars) -> Result<(Var, Var), ModelError> {
    let dims @ [b, n, f, d] = dims4(tape, h, "temporal attention")?;
    // (Hᵀ U1) U2 : [B d f N]·[N] -> [B d f] -> ·[f N] -> [B d N]
    let ht = tape.permute(h, &[0, 3, 2, 1])?;
    let flat = tape.reshape(ht, &[b * d * f, n])?;
    let u1 = tape.reshape(p.u1, &[n, 1])?;
    let hu1 = tape.matmul(flat, u1)?;
    let hu1 = tape.reshape(hu1, &[b * d, f])?;
    let lhs = tape.matmul(hu1, p.u2)?;
    let lhs = tape.reshape(lhs, &[b, d, n])?;
    // U3 H : [B N d]
    let rhs = contract_features(tape, h, p.u3, dims)?;
    let prod = tape.matmul(lhs, rhs)?;
    let pre = tape.add(prod, p.tat_b)?;
    let act = tape.sigmoid(pre);
    let e = tape.matmul(p.tat_v, act)?;
    let e_bar = tape.softmax_rows(e)?;
    let hf = tape.reshape(h, &[b, n * f, d])?;
    let hhat = tape.matmul(hf, e_bar)?;
    let hhat = tape.reshape(hhat, &[b, n, f, d])?;
    Ok((e_bar, hhat))
}

/// `Σ_k θ_k (T_k ⊙ S̄) Ĥ` applied to every feature/time slice: `[B, N, f, d]`.
pub fn tape_graph_convolution(
    tape: &mut Tape,
    hhat: Var,
    basis: &[Var],
    s_bar: Var,
    theta: Var,
) -> Result<Var, ModelError> {
    let [b, n, f, d] = dims4(tape, hhat, "graph convolution")?;
    if tape.shape(theta) != [basis.len()] {
        return Err(ModelError::Shape(format!(
            "graph convolution: {} Chebyshev terms but theta {:?}",
            basis.len(),
            tape.shape(theta)
        )));
    }
    let mut kernel: Option<Var> = None;
    for (k, t_k) in basis.iter().enumerate() {
        let masked = tape.mul(s_bar, *t_k)?;
        let th = tape.select(theta, 0, k)?;
        let term = tape.mul_scalar(th, masked)?;
        kernel = Some(match kernel {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let kernel = kernel.ok_or_else(|| ModelError::Shape("graph convolution needs K >= 1".into()))?;
    let flat = tape.reshape(hhat, &[b, n, f * d])?;
    let out = tape.matmul(kernel, flat)?;
    Ok(tape.reshape(out, &[b, n, f, d])?)
}

/// `ReLU(Φ * X)` along time for every station, same-length padding.
pub fn tape_temporal_convolution(tape: &mut Tape, x: Var, phi: Var) -> Result<Var, ModelError> {
    let [b, n, f, d] = dims4(tape, x, "temporal convolution")?;
    let [o, _, k] = *tape.shape(phi) else {
        return Err(ModelError::Shape(format!("temporal kernel {:?}", tape.shape(phi))));
    };
    let flat = tape.reshape(x, &[b * n, f, d])?;
    let (pl, pr) = same_padding(k);
    let y = tape.conv1d(flat, phi, None, pl, pr)?;
    let y = tape.relu(y);
    Ok(tape.reshape(y, &[b, n, o, d])?)
}

/// Temporal attention, attention-weighted Chebyshev convolution, ReLU,
/// temporal convolution, ReLU.
pub fn tape_st_block(tape: &mut Tape, h: Var, basis: &[Var], p: &BlockVars) -> Result<Var, ModelError> {
    let s_bar = tape_spatial_attention(tape, h, p)?;
    let (_, hhat) = tape_temporal_attention(tape, h, p)?;
    let g = tape_graph_convolution(tape, hhat, basis, s_bar, p.theta)?;
    let g = tape.relu(g);
    tape_temporal_convolution(tape, g, p.phi)
}

/// `[B, F, h] -> [B, f, h]`.
pub fn tape_encode(tape: &mut Tape, x: Var, p: &EncoderVars) -> Result<Var, ModelError> {
    let k = *tape.shape(p.w).last().unwrap_or(&1);
    let (pl, pr) = same_padding(k);
    Ok(tape.conv1d(x, p.w, Some(p.b), pl, pr)?)
}

/// Concatenate graph features `[B, f_g, d]` with encoder features `[B, f, d]`,
/// convolve, ReLU, flatten and project to `[B, Q, p]`.
pub fn tape_decode(
    tape: &mut Tape,
    graph_features: Var,
    encoded: Var,
    p: &DecoderVars,
    levels: usize,
    horizon: usize,
) -> Result<Var, ModelError> {
    let cat = tape.concat(&[graph_features, encoded], 1)?;
    let k = *tape.shape(p.conv_w).last().unwrap_or(&1);
    let (pl, pr) = same_padding(k);
    let y = tape.conv1d(cat, p.conv_w, Some(p.conv_b), pl, pr)?;
    let y = tape.relu(y);
    let [b, c, d] = *tape.shape(y) else {
        unreachable!("conv output is rank 3")
    };
    let flat = tape.reshape(y, &[b, c * d])?;
    let lin = tape.matmul(flat, p.lin_w)?;
    let out = tape.add(lin, p.lin_b)?;
    Ok(tape.reshape(out, &[b, levels, horizon])?)
}

fn batch1(t: &Tensor) -> Result<Tensor, ModelError> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    Ok(t.clone().reshaped(&s)?)
}

fn unbatch(t: &Tensor) -> Tensor {
    t.clone().reshaped(&t.shape()[1..]).expect("leading unit axis")
}

/// Encode one station's `[h × F]` window into an `[f × h]` feature map.
pub fn encode(window: &Tensor, params: &EncoderParams) -> Result<Tensor, ModelError> {
    let [_, feat] = *window.shape() else {
        return Err(ModelError::Shape(format!(
            "window must be [h, F], got {:?}",
            window.shape()
        )));
    };
    if params.w.shape().get(1) != Some(&feat) {
        return Err(ModelError::Shape(format!(
            "window has {feat} features, encoder expects {:?}",
            params.w.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(batch1(window)?);
    let xt = tape.transpose(x)?;
    let vars = params.on_tape(&mut tape);
    let y = tape_encode(&mut tape, xt, &vars)?;
    Ok(unbatch(tape.value(y)))
}

/// Spatial attention `S̄` (`[N, N]`) for features `[N, f, d]`.
pub fn spatial_attention(h: &Tensor, params: &StBlockParams) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let hv = tape.constant(batch1(h)?);
    let vars = params.on_tape(&mut tape);
    let s = tape_spatial_attention(&mut tape, hv, &vars)?;
    Ok(unbatch(tape.value(s)))
}

/// Temporal attention `Ē` (`[d, d]`) and the reweighted features `Ĥ`.
pub fn temporal_attention(h: &Tensor, params: &StBlockParams) -> Result<(Tensor, Tensor), ModelError> {
    let mut tape = Tape::new();
    let hv = tape.constant(batch1(h)?);
    let vars = params.on_tape(&mut tape);
    let (e, hh) = tape_temporal_attention(&mut tape, hv, &vars)?;
    Ok((unbatch(tape.value(e)), unbatch(tape.value(hh))))
}

/// Attention-weighted Chebyshev graph convolution of `Ĥ` (`[N, f, d]`).
pub fn graph_convolution(hhat: &Tensor, scaled: &Tensor, s_bar: &Tensor, theta: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let hv = tape.constant(batch1(hhat)?);
    let basis: Vec<Var> = chebyshev_basis(scaled, theta.len())
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    let sv = tape.constant(batch1(s_bar)?);
    let tv = tape.constant(theta.clone());
    let out = tape_graph_convolution(&mut tape, hv, &basis, sv, tv)?;
    Ok(unbatch(tape.value(out)))
}

/// `ReLU(Φ * X)` for `X` of shape `[N, f, d]`.
pub fn temporal_convolution(x: &Tensor, phi: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let xv = tape.constant(batch1(x)?);
    let pv = tape.constant(phi.clone());
    let out = tape_temporal_convolution(&mut tape, xv, pv)?;
    Ok(unbatch(tape.value(out)))
}

/// One spatial-temporal block applied to `[N, f, d]` over the graph with
/// weighted adjacency `adjacency`.
pub fn st_block(h: &Tensor, adjacency: &[Vec<f64>], params: &StBlockParams) -> Result<Tensor, ModelError> {
    let lap = normalized_laplacian(adjacency)?;
    let mut tape = Tape::new();
    let hv = tape.constant(batch1(h)?);
    let basis: Vec<Var> = chebyshev_basis(&lap.scaled, params.theta.len())
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    let vars = params.on_tape(&mut tape);
    let out = tape_st_block(&mut tape, hv, &basis, &vars)?;
    Ok(unbatch(tape.value(out)))
}

/// Forecast `[Q × p]` from graph features `[f_g, d]` and encoder features `[f, d]`.
pub fn decode(
    graph_features: &Tensor,
    encoded: &Tensor,
    params: &DecoderParams,
    levels: usize,
    horizon: usize,
) -> Result<Tensor, ModelError> {
    if params.lin_b.len() != levels * horizon {
        return Err(ModelError::Shape(format!(
            "decoder head has {} outputs, expected {levels} x {horizon}",
            params.lin_b.len()
        )));
    }
    let mut tape = Tape::new();
    let g = tape.constant(batch1(graph_features)?);
    let e = tape.constant(batch1(encoded)?);
    let vars = params.on_tape(&mut tape);
    let out = tape_decode(&mut tape, g, e, &vars, levels, horizon)?;
    Ok(unbatch(tape.value(out)))
}

/// `Σ_q Σ_p` tilted loss of a `[Q × p]` forecast against `p` observations.
pub fn quantile_loss(y: &[f64], y_hat: &Tensor, levels: &[f64]) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::vector(y.to_vec()));
    let p = tape.constant(y_hat.clone());
    let l = tape.pinball(p, t, levels)?;
    Ok(tape.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_block(rng: &mut ChaCha8Rng, n: usize, f: usize, fo: usize, d: usize, k: usize) -> StBlockParams {
        StBlockParams {
            sat_v: rand_tensor(rng, &[n, n]),
            sat_b: rand_tensor(rng, &[n, n]),
            w1: rand_tensor(rng, &[d]),
            w2: rand_tensor(rng, &[f, d]),
            w3: rand_tensor(rng, &[f]),
            tat_v: rand_tensor(rng, &[d, d]),
            tat_b: rand_tensor(rng, &[d, d]),
            u1: rand_tensor(rng, &[n]),
            u2: rand_tensor(rng, &[f, n]),
            u3: rand_tensor(rng, &[f]),
            theta: rand_tensor(rng, &[k]),
            phi: rand_tensor(rng, &[fo, f, 3]),
        }
    }

    fn assert_stochastic_rows(t: &Tensor) {
        let c = *t.shape().last().unwrap();
        for row in t.data().chunks(c) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0 || c == 1));
        }
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn spatial_attention_examples() {
        let p = StBlockParams::zeros(4, 2, 2, 5, 3, 3);
        let h = rand_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[4, 2, 5]);
        let s = spatial_attention(&h, &p).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p1 = rand_block(&mut rng, 1, 3, 3, 4, 3);
        let s1 = spatial_attention(&rand_tensor(&mut rng, &[1, 3, 4]), &p1).unwrap();
        assert_eq!(s1.data(), &[1.0]);

        let p3 = rand_block(&mut rng, 3, 4, 4, 6, 3);
        let s3 = spatial_attention(&rand_tensor(&mut rng, &[3, 4, 6]), &p3).unwrap();
        assert_eq!(s3.shape(), &[3, 3]);
        assert_stochastic_rows(&s3);

        assert!(matches!(
            spatial_attention(&rand_tensor(&mut rng, &[2, 4, 6]), &p3),
            Err(ModelError::Tape(_))
        ));
    }

    #[test]
    fn temporal_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, f, d) = (3, 2, 5);
        let h = rand_tensor(&mut rng, &[n, f, d]);
        let (e, hh) = temporal_attention(&h, &StBlockParams::zeros(n, f, f, d, 3, 3)).unwrap();
        assert!(e.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
        for (src, dst) in h.data().chunks(d).zip(hh.data().chunks(d)) {
            let mean = src.iter().sum::<f64>() / d as f64;
            assert!(dst.iter().all(|v| (v - mean).abs() < 1e-12));
        }

        let h1 = rand_tensor(&mut rng, &[n, f, 1]);
        let (e1, hh1) = temporal_attention(&h1, &rand_block(&mut rng, n, f, f, 1, 3)).unwrap();
        assert_eq!(e1.data(), &[1.0]);
        close(&hh1, &h1, 1e-15);

        let (er, _) = temporal_attention(&h, &rand_block(&mut rng, n, f, f, d, 3)).unwrap();
        assert_eq!(er.shape(), &[d, d]);
        assert_stochastic_rows(&er);
    }

    #[test]
    fn laplacian_examples() {
        let two = normalized_laplacian(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        close(
            &two.laplacian,
            &Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap(),
            1e-15,
        );
        assert!((two.lambda_max - 2.0).abs() < 1e-9);
        close(
            &two.scaled,
            &Tensor::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]).unwrap(),
            1e-9,
        );

        // No edges: L = I, λ_max = 1, L̃ = I.
        let empty = normalized_laplacian(&vec![vec![0.0; 3]; 3]).unwrap();
        close(&empty.laplacian, &Tensor::eye(3), 0.0);
        assert!((empty.lambda_max - 1.0).abs() < 1e-12);
        close(&empty.scaled, &Tensor::eye(3), 1e-12);
        assert_eq!(empty.isolated, vec![0, 1, 2]);

        // Self-loops do not change the result.
        let looped = normalized_laplacian(&[vec![5.0, 1.0], vec![1.0, 3.0]]).unwrap();
        close(&looped.scaled, &two.scaled, 1e-9);

        assert!(matches!(
            normalized_laplacian(&[vec![0.0, 1.0], vec![0.5, 0.0]]),
            Err(ModelError::Graph(_))
        ));
        assert!(matches!(
            normalized_laplacian(&[vec![0.0, -1.0], vec![-1.0, 0.0]]),
            Err(ModelError::Graph(_))
        ));
        assert!(normalized_laplacian(&[]).is_err());
    }

    #[test]
    fn scaled_spectrum_matches_dense_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let n = 5;
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    if trial % 4 == 0 || rng.random_bool(0.6) {
                        let w = rng.random_range(0.0..2.0);
                        a[i][j] = w;
                        a[j][i] = w;
                    }
                }
            }
            let lap = normalized_laplacian(&a).unwrap();
            let dense = nalgebra::DMatrix::from_row_slice(n, n, lap.laplacian.data());
            let eig = dense.symmetric_eigen().eigenvalues;
            let top = eig.iter().cloned().fold(f64::MIN, f64::max);
            assert!((lap.lambda_max - top).abs() < 1e-8, "{} vs {top}", lap.lambda_max);
            let scaled = nalgebra::DMatrix::from_row_slice(n, n, lap.scaled.data());
            for v in scaled.symmetric_eigen().eigenvalues.iter() {
                assert!(*v >= -1.0 - 1e-6 && *v <= 1.0 + 1e-6, "eigenvalue {v}");
            }
        }
    }

    #[test]
    fn chebyshev_scalar_basis() {
        let x = 0.3;
        let b = chebyshev_basis(&Tensor::from_rows(&[vec![x]]).unwrap(), 3);
        let vals: Vec<f64> = b.iter().map(|t| t.data()[0]).collect();
        assert_eq!(vals, vec![1.0, x, 2.0 * x * x - 1.0]);
    }

    proptest! {
        #[test]
        fn chebyshev_matches_cosine_form(x in -1.0f64..=1.0, k in 0usize..12) {
            let b = chebyshev_basis(&Tensor::from_rows(&[vec![x]]).unwrap(), k + 1);
            let want = (k as f64 * x.acos()).cos();
            prop_assert!((b[k].data()[0] - want).abs() < 1e-9);
        }

        #[test]
        fn attention_rows_are_distributions(seed in 0u64..1000, n in 1usize..5, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rand_block(&mut rng, n, 3, 3, d, 2);
            let h = rand_tensor(&mut rng, &[n, 3, d]).map(|v| 3.0 * v);
            let s = spatial_attention(&h, &p).unwrap();
            let (e, _) = temporal_attention(&h, &p).unwrap();
            for t in [s, e] {
                let c = *t.shape().last().unwrap();
                for row in t.data().chunks(c) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(row.iter().all(|v| *v > 0.0));
                }
            }
        }
    }

    #[test]
    fn graph_convolution_identity_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, f, d) = (4, 3, 5);
        let hh = rand_tensor(&mut rng, &[n, f, d]);
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if (i as i64 - j as i64).abs() == 1 { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let lt = normalized_laplacian(&a).unwrap().scaled;
        let ones = Tensor::filled(&[n, n], 1.0);
        let id = graph_convolution(&hh, &lt, &ones, &Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap();
        close(&id, &hh, 1e-15);
        let id1 = graph_convolution(&hh, &lt, &ones, &Tensor::vector(vec![1.0])).unwrap();
        close(&id1, &hh, 1e-15);

        // Direct summation with an independently built basis.
        let s = rand_tensor(&mut rng, &[n, n]);
        let theta = rand_tensor(&mut rng, &[3]);
        let l = |i: usize, j: usize| lt.data()[i * n + j];
        let mut t = vec![vec![vec![0.0; n]; n]; 3];
        for i in 0..n {
            t[0][i][i] = 1.0;
            for j in 0..n {
                t[1][i][j] = l(i, j);
            }
        }
        for i in 0..n {
            for j in 0..n {
                t[2][i][j] = 2.0 * (0..n).map(|m| l(i, m) * l(m, j)).sum::<f64>() - t[0][i][j];
            }
        }
        let out = graph_convolution(&hh, &lt, &s, &theta).unwrap();
        for i in 0..n {
            for c in 0..f {
                for tt in 0..d {
                    let mut want = 0.0;
                    for (k, tk) in t.iter().enumerate() {
                        for j in 0..n {
                            want += theta.data()[k] * tk[i][j] * s.data()[i * n + j] * hh.data()[(j * f + c) * d + tt];
                        }
                    }
                    assert!((out.data()[(i * f + c) * d + tt] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn temporal_convolution_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, f, o, d) = (2, 3, 4, 6);
        let x = rand_tensor(&mut rng, &[n, f, d]);
        let zero = temporal_convolution(&x, &Tensor::zeros(&[o, f, 3])).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));

        let mut delta = Tensor::zeros(&[f, f, 3]);
        for c in 0..f {
            delta.data_mut()[(c * f + c) * 3 + 1] = 1.0;
        }
        close(&temporal_convolution(&x, &delta).unwrap(), &x.map(|v| v.max(0.0)), 0.0);

        let phi = rand_tensor(&mut rng, &[o, f, 3]);
        let y = temporal_convolution(&x, &phi).unwrap();
        assert_eq!(y.shape(), &[n, o, d]);
        let xv = |s: usize, c: usize, t: i64| {
            if t < 0 || t >= d as i64 {
                0.0
            } else {
                x.data()[(s * f + c) * d + t as usize]
            }
        };
        for s in 0..n {
            for oc in 0..o {
                for t in 0..d {
                    let mut acc = 0.0;
                    for c in 0..f {
                        for k in 0..3 {
                            acc += phi.data()[(oc * f + c) * 3 + k] * xv(s, c, t as i64 + k as i64 - 1);
                        }
                    }
                    assert!((y.data()[(s * o + oc) * d + t] - acc.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn st_block_examples() {
        let f = 3;
        let mut p = StBlockParams::zeros(1, f, f, 1, 1, 3);
        p.theta = Tensor::vector(vec![1.0]);
        for c in 0..f {
            p.phi.data_mut()[(c * f + c) * 3 + 1] = 1.0;
        }
        let h = Tensor::new(vec![1, f, 1], vec![0.7, -0.4, 1.3]).unwrap();
        let out = st_block(&h, &[vec![0.0]], &p).unwrap();
        close(&out, &h.map(|v| v.max(0.0).max(0.0)), 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, d) = (3, 8);
        let a = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]];
        let p = rand_block(&mut rng, n, 64, 64, d, 3);
        let z = st_block(&Tensor::zeros(&[n, 64, d]), &a, &p).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
        let r = st_block(&rand_tensor(&mut rng, &[n, 64, d]), &a, &p).unwrap();
        assert_eq!(r.shape(), &[n, 64, d]);
    }

    #[test]
    fn encode_examples() {
        let (h, feat, f) = (10, 7, 64);
        let zero = EncoderParams {
            w: rand_tensor(&mut ChaCha8Rng::seed_from_u64(8), &[f, feat, 3]),
            b: Tensor::zeros(&[f]),
        };
        let out = encode(&Tensor::zeros(&[h, feat]), &zero).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let window = rand_tensor(&mut rng, &[h, feat]);
        let mut w = Tensor::zeros(&[1, feat, 3]);
        w.data_mut()[1] = 1.0;
        let id = encode(
            &window,
            &EncoderParams {
                w,
                b: Tensor::zeros(&[1]),
            },
        )
        .unwrap();
        let col: Vec<f64> = (0..h).map(|t| window.data()[t * feat]).collect();
        assert_eq!(id.data(), col.as_slice());

        let out = encode(&window, &zero).unwrap();
        assert_eq!(out.shape(), &[f, h]);
        assert!(matches!(
            encode(&rand_tensor(&mut rng, &[h, 5]), &zero),
            Err(ModelError::Shape(_))
        ));
    }

    #[test]
    fn decode_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (fg, f, d, c) = (4, 5, 6, 3);
        let hd = rand_tensor(&mut rng, &[fg, d]);
        let hh = rand_tensor(&mut rng, &[f, d]);
        let params = |q: usize, p: usize, rng: &mut ChaCha8Rng| DecoderParams {
            conv_w: rand_tensor(rng, &[c, fg + f, 3]),
            conv_b: rand_tensor(rng, &[c]),
            lin_w: rand_tensor(rng, &[c * d, q * p]),
            lin_b: rand_tensor(rng, &[q * p]),
        };
        let zero = DecoderParams {
            conv_w: Tensor::zeros(&[c, fg + f, 3]),
            conv_b: Tensor::zeros(&[c]),
            lin_w: Tensor::zeros(&[c * d, 18]),
            lin_b: Tensor::zeros(&[18]),
        };
        let z = decode(&hd, &hh, &zero, 3, 6).unwrap();
        assert_eq!(z.shape(), &[3, 6]);
        assert!(z.data().iter().all(|v| *v == 0.0));
        assert_eq!(decode(&hd, &hh, &params(3, 6, &mut rng), 3, 6).unwrap().len(), 18);
        assert_eq!(
            decode(&hd, &hh, &params(1, 1, &mut rng), 1, 1).unwrap().shape(),
            &[1, 1]
        );
        assert!(decode(&hd, &hh, &params(1, 1, &mut rng), 3, 6).is_err());
    }

    #[test]
    fn quantile_loss_examples() {
        let y = [0.2, -1.0, 3.0];
        let yh = Tensor::new(vec![2, 3], [y, y].concat()).unwrap();
        assert_eq!(quantile_loss(&y, &yh, &[0.1, 0.9]).unwrap(), 0.0);
        assert_eq!(quantile_loss(&[1.0], &Tensor::zeros(&[1, 1]), &[0.5]).unwrap(), 0.5);
        let l = quantile_loss(&[1.0], &Tensor::zeros(&[3, 1]), &[0.1, 0.5, 0.9]).unwrap();
        assert!((l - 1.5).abs() < 1e-15);
        assert!(quantile_loss(&[1.0, 2.0], &Tensor::zeros(&[3, 1]), &[0.1, 0.5, 0.9]).is_err());
    }
}
