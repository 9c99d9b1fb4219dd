//! Immutable expression graphs compiled onto a [`Tape`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TapeError;

/// Operation carried by an [`Expr`] op node.
#[derive(Clone, Debug, PartialEq)]
pub enum OpTag {
    Add,
    Sub,
    /// Elementwise product with suffix broadcasting (scalars broadcast anywhere).
    Mul,
    /// Elementwise product of identically shaped operands.
    Hadamard,
    MatMul,
    /// Same-length 1-D convolution: operands `(x, w)` or `(x, w, bias)`.
    Conv1d,
    Sigmoid,
    Relu,
    SoftmaxRows,
    Concat {
        axis: usize,
    },
    Transpose,
    Sum,
    Scale(f64),
    Power(f64),
    /// Summed tilted loss: operands `(prediction, target)`.
    Pinball(Vec<f64>),
}

#[derive(Debug)]
enum Node {
    Input(String),
    Constant(Tensor),
    Op { tag: OpTag, operands: Vec<Expr> },
}

/// Shared, acyclic expression graph. Cloning is cheap.
#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

pub type Bindings = BTreeMap<String, Tensor>;

impl Expr {
    pub fn input(name: impl Into<String>) -> Self {
        Self(Arc::new(Node::Input(name.into())))
    }

    pub fn constant(t: Tensor) -> Self {
        Self(Arc::new(Node::Constant(t)))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub fn op(tag: OpTag, operands: Vec<Expr>) -> Self {
        Self(Arc::new(Node::Op { tag, operands }))
    }

    pub fn add(&self, o: &Expr) -> Self {
        Self::op(OpTag::Add, vec![self.clone(), o.clone()])
    }

    pub fn sub(&self, o: &Expr) -> Self {
        Self::op(OpTag::Sub, vec![self.clone(), o.clone()])
    }

    pub fn mul(&self, o: &Expr) -> Self {
        Self::op(OpTag::Mul, vec![self.clone(), o.clone()])
    }

    pub fn hadamard(&self, o: &Expr) -> Self {
        Self::op(OpTag::Hadamard, vec![self.clone(), o.clone()])
    }

    pub fn matmul(&self, o: &Expr) -> Self {
        Self::op(OpTag::MatMul, vec![self.clone(), o.clone()])
    }

    pub fn conv1d(&self, kernel: &Expr) -> Self {
        Self::op(OpTag::Conv1d, vec![self.clone(), kernel.clone()])
    }

    pub fn sigmoid(&self) -> Self {
        Self::op(OpTag::Sigmoid, vec![self.clone()])
    }

    pub fn relu(&self) -> Self {
        Self::op(OpTag::Relu, vec![self.clone()])
    }

    pub fn softmax_rows(&self) -> Self {
        Self::op(OpTag::SoftmaxRows, vec![self.clone()])
    }

    pub fn transpose(&self) -> Self {
        Self::op(OpTag::Transpose, vec![self.clone()])
    }

    pub fn sum(&self) -> Self {
        Self::op(OpTag::Sum, vec![self.clone()])
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::op(OpTag::Scale(c), vec![self.clone()])
    }

    pub fn power(&self, p: f64) -> Self {
        Self::op(OpTag::Power(p), vec![self.clone()])
    }

    pub fn concat(parts: &[Expr], axis: usize) -> Self {
        Self::op(OpTag::Concat { axis }, parts.to_vec())
    }

    pub fn pinball(&self, target: &Expr, quantiles: &[f64]) -> Self {
        Self::op(OpTag::Pinball(quantiles.to_vec()), vec![self.clone(), target.clone()])
    }

    /// Names of every input reachable from this node.
    pub fn inputs(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![self.clone()];
        let mut seen = BTreeSet::new();
        while let Some(e) = stack.pop() {
            if !seen.insert(Arc::as_ptr(&e.0) as usize) {
                continue;
            }
            match &*e.0 {
                Node::Input(n) => {
                    out.insert(n.clone());
                }
                Node::Constant(_) => {}
                Node::Op { operands, .. } => stack.extend(operands.iter().cloned()),
            }
        }
        out
    }
}

/// Result of compiling an expression: the tape, its root and the input vars.
pub(crate) struct Compiled {
    pub tape: Tape,
    pub root: Var,
    pub inputs: BTreeMap<String, Var>,
}

pub(crate) fn compile(expr: &Expr, bindings: &Bindings) -> Result<Compiled, TapeError> {
    let mut c = Compiler {
        tape: Tape::new(),
        memo: HashMap::new(),
        inputs: BTreeMap::new(),
        bindings,
    };
    let root = c.visit(expr)?;
    Ok(Compiled {
        tape: c.tape,
        root,
        inputs: c.inputs,
    })
}

struct Compiler<'a> {
    tape: Tape,
    memo: HashMap<usize, Var>,
    inputs: BTreeMap<String, Var>,
    bindings: &'a Bindings,
}

impl Compiler<'_> {
    fn visit(&mut self, e: &Expr) -> Result<Var, TapeError> {
        let key = Arc::as_ptr(&e.0) as usize;
        if let Some(v) = self.memo.get(&key) {
            return Ok(*v);
        }
        let v = match &*e.0 {
            Node::Input(name) => {
                if let Some(v) = self.inputs.get(name) {
                    *v
                } else {
                    let t = self
                        .bindings
                        .get(name)
                        .ok_or_else(|| TapeError::UnboundInput(name.clone()))?;
                    let v = self.tape.leaf(t.clone());
                    self.inputs.insert(name.clone(), v);
                    v
                }
            }
            Node::Constant(t) => self.tape.constant(t.clone()),
            Node::Op { tag, operands } => {
                let args = operands.iter().map(|o| self.visit(o)).collect::<Result<Vec<_>, _>>()?;
                self.apply(tag, &args)?
            }
        };
        self.memo.insert(key, v);
        Ok(v)
    }

    fn apply(&mut self, tag: &OpTag, a: &[Var]) -> Result<Var, TapeError> {
        let arity = |n: usize| -> Result<(), TapeError> {
            if a.len() == n {
                Ok(())
            } else {
                Err(TapeError::ShapeMismatch {
                    op: "expr",
                    detail: format!("{tag:?} takes {n} operands, got {}", a.len()),
                })
            }
        };
        let t = &mut self.tape;
        Ok(match tag {
            OpTag::Add => {
                arity(2)?;
                t.add(a[0], a[1])?
            }
            OpTag::Sub => {
                arity(2)?;
                t.sub(a[0], a[1])?
            }
            OpTag::Mul => {
                arity(2)?;
                if t.value(a[0]).len() == 1 && t.value(a[1]).len() != 1 {
                    t.mul_scalar(a[0], a[1])?
                } else if t.value(a[1]).len() == 1 && t.value(a[0]).len() != 1 {
                    t.mul_scalar(a[1], a[0])?
                } else {
                    t.mul(a[0], a[1])?
                }
            }
            OpTag::Hadamard => {
                arity(2)?;
                t.hadamard(a[0], a[1])?
            }
            OpTag::MatMul => {
                arity(2)?;
                t.matmul(a[0], a[1])?
            }
            OpTag::Conv1d => {
                if a.len() != 2 && a.len() != 3 {
                    arity(2)?;
                }
                let kw = *t.shape(a[1]).last().unwrap_or(&1);
                let left = kw.saturating_sub(1) / 2;
                let right = kw.saturating_sub(1) - left;
                t.conv1d(a[0], a[1], a.get(2).copied(), left, right)?
            }
            OpTag::Sigmoid => {
                arity(1)?;
                t.sigmoid(a[0])
            }
            OpTag::Relu => {
                arity(1)?;
                t.relu(a[0])
            }
            OpTag::SoftmaxRows => {
                arity(1)?;
                t.softmax_rows(a[0])?
            }
            OpTag::Concat { axis } => t.concat(a, *axis)?,
            OpTag::Transpose => {
                arity(1)?;
                t.transpose(a[0])?
            }
            OpTag::Sum => {
                arity(1)?;
                t.sum(a[0])
            }
            OpTag::Scale(c) => {
                arity(1)?;
                t.scale(a[0], *c)
            }
            OpTag::Power(p) => {
                arity(1)?;
                t.power(a[0], *p)
            }
            OpTag::Pinball(q) => {
                arity(2)?;
                t.pinball(a[0], a[1], q)?
            }
        })
    }
}
