//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the nodes in reverse order and accumulates adjoints for every node that
//! (transitively) depends on a differentiable leaf.

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use super::TapeError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad_left: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Sum(Var),
    Power(Var, f64),
    Pinball {
        pred: Var,
        target: Var,
        quantiles: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> TapeError {
    TapeError::ShapeMismatch { op, detail }
}

/// Shape of the broadcast result when `small` is a trailing suffix of `big`.
fn suffix_broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Some(a.to_vec());
    }
    if nb == 1 {
        return Some(a.to_vec());
    }
    if na == 1 {
        return Some(b.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Some(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Some(b.to_vec());
    }
    None
}

/// Reduce `g` (laid out over the broadcast output) back onto an operand of `len` elements.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    if len == g.len() {
        return Tensor::from_parts(shape.to_vec(), g.data().to_vec());
    }
    let mut out = vec![0.0; len];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % len] += v;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permute axes: output axis `k` is input axis `perm[k]`.
fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let data = t.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Batch layout of a matmul operand: (batch, rows, cols, batched?).
fn mm_dims(s: &[usize]) -> Option<(usize, usize, usize, bool)> {
    match *s {
        [m, k] => Some((1, m, k, false)),
        [b, m, k] => Some((b, m, k, true)),
        _ => None,
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TapeError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = suffix_broadcast(ta.shape(), tb.shape())
            .ok_or_else(|| mismatch(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())))?;
        let n: usize = shape.iter().product();
        let (la, lb) = (ta.len(), tb.len());
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Elementwise sum; either operand may be a trailing-suffix broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product with suffix broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Hadamard product; shapes must match exactly.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                "hadamard",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        self.mul(a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Multiply `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, s: Var, x: Var) -> Result<Var, TapeError> {
        let sv = self
            .value(s)
            .item()
            .ok_or_else(|| mismatch("mul_scalar", format!("{:?} is not a scalar", self.shape(s))))?;
        let v = self.value(x).map(|e| e * sv);
        let rg = self.rg(&[s, x]);
        Ok(self.push(v, Op::MulScalar(s, x), rg))
    }

    /// Matrix product. Supports `[m,k]·[k,n]` and batched forms where either
    /// side carries a leading batch axis (the other side is then shared).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || mismatch("matmul", format!("{sa:?} x {sb:?}"));
        let (ba, m, k, a_b) = mm_dims(&sa).ok_or_else(err)?;
        let (bb, k2, n, b_b) = mm_dims(&sb).ok_or_else(err)?;
        if k != k2 || (a_b && b_b && ba != bb) {
            return Err(err());
        }
        let batch = ba.max(bb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = if a_b { bi * m * k } else { 0 };
            let bo = if b_b { bi * k * n } else { 0 };
            gemm_acc(
                &da[ao..ao + m * k],
                &db[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if a_b || b_b { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    /// 1-D convolution (cross-correlation) over the last axis.
    ///
    /// `x` is `[B, C, T]` (or `[C, T]`), `w` is `[O, C, W]`, optional `bias`
    /// is `[O]`. Zero padding of `pad_left`/`pad_right` is applied to time.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var, TapeError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let err = |d: &str| mismatch("conv1d", format!("x {sx:?}, w {sw:?}: {d}"));
        let (batch, c, t, batched) = match *sx.as_slice() {
            [c, t] => (1, c, t, false),
            [b, c, t] => (b, c, t, true),
            _ => return Err(err("x rank")),
        };
        let [o, c2, kw] = *sw.as_slice() else {
            return Err(err("w rank"));
        };
        if c != c2 {
            return Err(err("channels"));
        }
        if t + pad_left + pad_right < kw {
            return Err(err("kernel wider than padded input"));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(err("bias"));
            }
        }
        let t_out = t + pad_left + pad_right - kw + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = bias.map(|bv| self.value(bv).data());
        let mut out = vec![0.0; batch * o * t_out];
        for b in 0..batch {
            for oc in 0..o {
                let orow = &mut out[(b * o + oc) * t_out..(b * o + oc + 1) * t_out];
                if let Some(bd) = bd {
                    orow.iter_mut().for_each(|v| *v = bd[oc]);
                }
                for ic in 0..c {
                    let xrow = &xd[(b * c + ic) * t..(b * c + ic + 1) * t];
                    let wrow = &wd[(oc * c + ic) * kw..(oc * c + ic + 1) * kw];
                    for (j, &wv) in wrow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        // output position tt reads input tt + j - pad_left
                        let lo = pad_left.saturating_sub(j);
                        let hi = (t + pad_left - j).min(t_out);
                        for tt in lo..hi {
                            orow[tt] += wv * xrow[tt + j - pad_left];
                        }
                    }
                }
            }
        }
        let shape = if batched { vec![batch, o, t_out] } else { vec![o, t_out] };
        let mut parents = vec![x, w];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv1d { x, w, bias, pad_left }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.value(a);
        let Some(&cols) = t.shape().last() else {
            return Err(mismatch("softmax_rows", "scalar input".into()));
        };
        let mut out = t.data().to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SoftmaxRows(a), rg))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TapeError> {
        let first = parts.first().ok_or_else(|| mismatch("concat", "no operands".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(mismatch("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let lifted = parts
            .iter()
            .map(|&p| {
                let mut s = vec![1];
                s.extend_from_slice(self.shape(p));
                self.reshape(p, &s)
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.concat(&lifted, 0)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TapeError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(mismatch("transpose", format!("{:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        let v = permute_data(self.value(a), &perm);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    /// General axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TapeError> {
        let r = self.shape(a).len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", format!("{perm:?} for rank {r}")));
        }
        let v = permute_data(self.value(a), perm);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TapeError> {
        let v = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Pick `index` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var, TapeError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(mismatch("select", format!("axis {axis} index {index} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * s[axis] + index) * inner;
            out.extend_from_slice(&d[start..start + inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Select { x: a, axis, index }, rg))
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Elementwise `x^p`.
    pub fn power(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(&[a]);
        self.push(v, Op::Power(a, p), rg)
    }

    /// Summed pinball (tilted) loss.
    ///
    /// `pred` is `[B, Q, P]` (or `[Q, P]`), `target` is `[B, P]` (or `[P]`).
    /// Returns `(1/B) Σ_b Σ_q Σ_p [q (y - ŷ)_+ + (1 - q)(ŷ - y)_+]`.
    pub fn pinball(&mut self, pred: Var, target: Var, quantiles: &[f64]) -> Result<Var, TapeError> {
        let (sp, st) = (self.shape(pred).to_vec(), self.shape(target).to_vec());
        let err = || {
            mismatch(
                "pinball",
                format!("pred {sp:?}, target {st:?}, {} levels", quantiles.len()),
            )
        };
        let (b, nq, np) = match (sp.as_slice(), st.as_slice()) {
            ([q, p], [p2]) if p == p2 => (1, *q, *p),
            ([b, q, p], [b2, p2]) if p == p2 && b == b2 => (*b, *q, *p),
            _ => return Err(err()),
        };
        if nq != quantiles.len() {
            return Err(err());
        }
        let (pd, td) = (self.value(pred).data(), self.value(target).data());
        let mut total = 0.0;
        for bi in 0..b {
            for (qi, &q) in quantiles.iter().enumerate() {
                for pi in 0..np {
                    let y = td[bi * np + pi];
                    let yh = pd[(bi * nq + qi) * np + pi];
                    total += tilted(q, y, yh);
                }
            }
        }
        let rg = self.rg(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::Pinball {
                pred,
                target,
                quantiles: quantiles.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, TapeError> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(TapeError::NonScalarOutput(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::from_parts(rv.shape().to_vec(), vec![1.0]));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(delta.data())
                    .for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, self.shape(*a)));
                acc(*b, reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, self.shape(*a)));
                acc(*b, reduce_to(&g.map(|x| -x), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (la, lb) = (ta.len(), tb.len());
                let ga = Tensor::from_parts(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * tb.data()[i % lb])
                        .collect(),
                );
                let gb = Tensor::from_parts(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * ta.data()[i % la])
                        .collect(),
                );
                acc(*a, reduce_to(&ga, ta.shape()));
                acc(*b, reduce_to(&gb, tb.shape()));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::MulScalar(s, x) => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x);
                let ds: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                acc(*s, Tensor::from_parts(self.shape(*s).to_vec(), vec![ds]));
                acc(*x, g.map(|v| v * sv));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ba, m, k, a_b) = mm_dims(ta.shape()).expect("checked");
                let (bb, _, n, b_b) = mm_dims(tb.shape()).expect("checked");
                let batch = ba.max(bb);
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                let gd = g.data();
                for bi in 0..batch {
                    let ao = if a_b { bi * m * k } else { 0 };
                    let bo = if b_b { bi * k * n } else { 0 };
                    let gs = &gd[bi * m * n..(bi + 1) * m * n];
                    // dA = dC · Bᵀ ; dB = Aᵀ · dC
                    gemm_nt_acc(gs, &tb.data()[bo..bo + k * n], &mut da[ao..ao + m * k], m, n, k);
                    gemm_tn_acc(&ta.data()[ao..ao + m * k], gs, &mut db[bo..bo + k * n], m, k, n);
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                acc(*b, Tensor::from_parts(tb.shape().to_vec(), db));
            }
            Op::Conv1d { x, w, bias, pad_left } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (batch, c, t) = match *tx.shape() {
                    [c, t] => (1, c, t),
                    [b, c, t] => (b, c, t),
                    _ => unreachable!(),
                };
                let [o, _, kw] = *tw.shape() else { unreachable!() };
                let t_out = node.value.shape()[node.value.rank() - 1];
                let pl = *pad_left;
                let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
                let mut dx = vec![0.0; tx.len()];
                let mut dw = vec![0.0; tw.len()];
                let mut dbias = vec![0.0; o];
                for b in 0..batch {
                    for oc in 0..o {
                        let grow = &gd[(b * o + oc) * t_out..(b * o + oc + 1) * t_out];
                        dbias[oc] += grow.iter().sum::<f64>();
                        for ic in 0..c {
                            let xoff = (b * c + ic) * t;
                            let woff = (oc * c + ic) * kw;
                            for j in 0..kw {
                                let lo = pl.saturating_sub(j);
                                let hi = (t + pl - j).min(t_out);
                                let wv = wd[woff + j];
                                let mut dwj = 0.0;
                                for tt in lo..hi {
                                    let xi = xoff + tt + j - pl;
                                    dwj += grow[tt] * xd[xi];
                                    dx[xi] += grow[tt] * wv;
                                }
                                dw[woff + j] += dwj;
                            }
                        }
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), dx));
                acc(*w, Tensor::from_parts(tw.shape().to_vec(), dw));
                if let Some(bv) = bias {
                    acc(*bv, Tensor::from_parts(vec![o], dbias));
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                acc(*a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                if cols > 0 {
                    for ((yr, gr), dr) in y.data().chunks(cols).zip(g.data().chunks(cols)).zip(d.chunks_mut(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                }
                acc(*a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let ps = self.shape(*p);
                    let chunk = ps[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let start = o * shape[*axis] * inner + offset;
                        d.extend_from_slice(&g.data()[start..start + chunk]);
                    }
                    offset += chunk;
                    acc(*p, Tensor::from_parts(ps.to_vec(), d));
                }
            }
            Op::Transpose(a) => {
                let r = g.rank();
                let mut perm: Vec<usize> = (0..r).collect();
                perm.swap(r - 2, r - 1);
                acc(*a, permute_data(g, &perm));
            }
            Op::Permute(a, perm) => acc(*a, permute_data(g, &inverse_perm(perm))),
            Op::Reshape(a) => acc(*a, Tensor::from_parts(self.shape(*a).to_vec(), g.data().to_vec())),
            Op::Select { x, axis, index } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut d = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let start = (o * s[*axis] + index) * inner;
                    d[start..start + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
                acc(*x, Tensor::from_parts(s.to_vec(), d));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                acc(*a, Tensor::filled(self.shape(*a), gv));
            }
            Op::Power(a, p) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| gv * p * xv.powf(p - 1.0))
                    .collect();
                acc(*a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::Pinball {
                pred,
                target,
                quantiles,
            } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let nq = quantiles.len();
                let np = *tt.shape().last().expect("checked");
                let b = tt.len() / np;
                let scale = g.data()[0] / b as f64;
                let mut dp = vec![0.0; tp.len()];
                let mut dt = vec![0.0; tt.len()];
                for bi in 0..b {
                    for (qi, &q) in quantiles.iter().enumerate() {
                        for pi in 0..np {
                            let y = tt.data()[bi * np + pi];
                            let idx = (bi * nq + qi) * np + pi;
                            let s = tilted_slope(q, y, tp.data()[idx]) * scale;
                            dp[idx] += s;
                            dt[bi * np + pi] -= s;
                        }
                    }
                }
                acc(*pred, Tensor::from_parts(tp.shape().to_vec(), dp));
                acc(*target, Tensor::from_parts(tt.shape().to_vec(), dt));
            }
        }
    }
}

/// Tilted loss `q (y - ŷ)_+ + (1 - q)(ŷ - y)_+`.
pub fn tilted(q: f64, y: f64, y_hat: f64) -> f64 {
    let r = y - y_hat;
    if r >= 0.0 {
        q * r
    } else {
        (q - 1.0) * r
    }
}

/// d/dŷ of the tilted loss; the kink `y == ŷ` takes the `-q` branch.
pub fn tilted_slope(q: f64, y: f64, y_hat: f64) -> f64 {
    if y >= y_hat {
        -q
    } else {
        1.0 - q
    }
}
