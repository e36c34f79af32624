//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation records its inputs and a backward closure on the output
//! node; the resulting structure is an implicit DAG (node ids grow
//! monotonically, so parents always have smaller ids than children).
//! [`Tensor::backward`] walks reachable nodes in descending id order —
//! a valid reverse topological order — accumulating vector-Jacobian
//! products into gradient buffers.
//!
//! Design constraints honored throughout:
//! - storage is `f64`; an optional process-wide precision switch rounds
//!   every op result through `f32` for reduced-precision training runs,
//! - tensors are immutable after creation except their gradient buffers,
//! - broadcasting is restricted to scalar-vs-tensor (plus the explicit
//!   shape-expansion ops in [`ops`]),
//! - in debug builds every op output is checked for NaN/Inf and panics
//!   with the op name; release builds skip the scan.

mod ops;

pub(crate) use ops::reflect_index;


use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

pub type Real = f64;

/// Numeric precision for op results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Set the process-wide (per-thread) op-result precision.
///
/// `F32` rounds every op result to the nearest `f32` value; storage stays
/// `f64`, so the same code path serves both modes deterministically.
pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

pub fn precision() -> Precision {
    PRECISION.with(|c| c.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) type BackwardFn = Box<dyn Fn(&[Real])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<Real>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<Real>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to a node in the autodiff graph. Cloning is cheap (refcount).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    // ── Construction ────────────────────────────────────────────────

    fn new_node(
        data: Vec<Real>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    /// Internal op-output constructor: applies the precision switch, runs
    /// the debug NaN/Inf scan, prunes the backward edge when no parent
    /// needs gradients.
    pub(crate) fn from_op(
        op: &'static str,
        mut data: Vec<Real>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        if precision() == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as Real;
            }
        }
        #[cfg(debug_assertions)]
        check_finite(op, &data);
        #[cfg(not(debug_assertions))]
        let _ = op;
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        if requires_grad {
            Tensor::new_node(data, shape, true, parents, Some(backward))
        } else {
            Tensor::new_node(data, shape, false, Vec::new(), None)
        }
    }

    /// Non-differentiable leaf holding fixed data.
    pub fn constant(data: Vec<Real>, shape: Vec<usize>) -> Result<Tensor> {
        check_len("constant", &data, &shape)?;
        Ok(Tensor::new_node(data, shape, false, Vec::new(), None))
    }

    /// Differentiable leaf (parameter or checked input).
    pub fn param(data: Vec<Real>, shape: Vec<usize>) -> Result<Tensor> {
        check_len("param", &data, &shape)?;
        Ok(Tensor::new_node(data, shape, true, Vec::new(), None))
    }

    pub fn scalar(v: Real) -> Tensor {
        Tensor::new_node(vec![v], vec![1], false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: Real) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_node(vec![v; n], shape.to_vec(), false, Vec::new(), None)
    }

    /// Leaf with the same data but detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new_node(
            self.inner.data.clone(),
            self.inner.shape.clone(),
            false,
            Vec::new(),
            None,
        )
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<Real> {
        self.inner.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> Real {
        assert_eq!(self.numel(), 1, "value() requires a single-element tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.parents.is_empty()
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<Real>> {
        self.inner.grad.borrow().clone()
    }

    /// Clear the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[Real]) {
        if !self.inner.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode gradient accumulation from a scalar loss.
    ///
    /// Gradients of leaf tensors accumulate across calls until
    /// [`Tensor::zero_grad`]; interior-node gradients are reset at the
    /// start of each call, so repeated backward on the same graph doubles
    /// leaf gradients (call `zero_grad` to reset).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Err(Error::Usage(
                "backward on a tensor that depends on no differentiable leaf".into(),
            ));
        }
        // Parents are created before children, so ids ascend toward the
        // loss; descending-id order is a valid reverse topological order.
        let mut nodes = self.reachable();
        nodes.sort_by_key(|t| std::cmp::Reverse(t.inner.id));
        for t in &nodes {
            if !t.is_leaf() {
                t.zero_grad();
            }
        }
        self.accumulate_grad(&[1.0]);
        for t in &nodes {
            if let Some(bw) = &t.inner.backward {
                let grad = t.inner.grad.borrow();
                if let Some(g) = grad.as_ref() {
                    bw(g);
                }
            }
        }
        Ok(())
    }

    fn reachable(&self) -> Vec<Tensor> {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut out = Vec::new();
        seen.insert(self.inner.id);
        while let Some(t) = stack.pop() {
            for p in &t.inner.parents {
                if p.inner.requires_grad && seen.insert(p.inner.id) {
                    stack.push(p.clone());
                }
            }
            out.push(t);
        }
        out
    }
}

fn check_len(op: &'static str, data: &[Real], shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if data.len() != n {
        return Err(Error::Shape {
            op,
            detail: format!("data length {} does not match shape {:?}", data.len(), shape),
        });
    }
    Ok(())
}

#[cfg(debug_assertions)]
fn check_finite(op: &str, data: &[Real]) {
    for (i, v) in data.iter().enumerate() {
        assert!(
            v.is_finite(),
            "non-finite value {v} at flat index {i} in output of op `{op}`"
        );
    }
}

// ── Finite-difference gradient verification ─────────────────────────

/// Central-difference check of `d f / d x` against the recorded backward
/// pass, over every coordinate of `x0`. Returns the maximum relative error
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x0: &[Real], shape: &[usize], eps: Real) -> Result<Real>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let coords: Vec<usize> = (0..x0.len()).collect();
    finite_diff_check_coords(f, x0, shape, eps, &coords)
}

/// Same as [`finite_diff_check`] but restricted to the given coordinates
/// (used to sample a few weights of a large model).
pub fn finite_diff_check_coords<F>(
    f: F,
    x0: &[Real],
    shape: &[usize],
    eps: Real,
    coords: &[usize],
) -> Result<Real>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = Tensor::param(x0.to_vec(), shape.to_vec())?;
    let loss = f(&x)?;
    if loss.numel() != 1 {
        return Err(Error::Usage(format!(
            "finite_diff_check requires a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.value().is_finite() {
        return Err(Error::Numeric("non-finite loss at the expansion point".into()));
    }
    loss.backward()?;
    let analytic = x
        .grad()
        .ok_or_else(|| Error::Numeric("no gradient reached the checked input".into()))?;

    let eval = |data: Vec<Real>| -> Result<Real> {
        let t = Tensor::constant(data, shape.to_vec())?;
        let v = f(&t)?.value();
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite value during finite differencing".into()));
        }
        Ok(v)
    };

    let mut max_rel: Real = 0.0;
    for &i in coords {
        assert!(i < x0.len(), "finite-diff coordinate out of range");
        let mut xp = x0.to_vec();
        xp[i] += eps;
        let mut xm = x0.to_vec();
        xm[i] -= eps;
        let numeric = (eval(xp)? - eval(xm)?) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
