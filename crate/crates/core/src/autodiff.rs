//! Define-by-run reverse-mode automatic differentiation over `f64` tensors.
//!
//! Every op builds a [`Value`] node that records its parents and a backward
//! closure. Calling [`backward`] on a scalar root walks the recorded graph
//! in reverse topological order and accumulates gradients additively into
//! every non-constant node, so parameters reached through several paths sum
//! their contributions. Graph traversal order is fixed by construction
//! order, which keeps gradient accumulation bit-for-bit deterministic from
//! run to run.
//!
//! Two ops are deliberately non-smooth: [`Value::spike`] (a hard threshold
//! whose backward pass substitutes a fast-sigmoid surrogate factor) and
//! [`Value::straight_through`] (identity gradient through an arbitrary
//! forward replacement). [`finite_diff_check`] refuses graphs containing
//! either, since a numeric difference of the true forward function would
//! not match the substituted gradient.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{
    Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Dimension, Ix2, Ix4, IxDyn,
    Slice,
};

use crate::error::{Error, Result};

/// Dynamic-dimension `f64` tensor used throughout the crate.
pub type Arr = ArrayD<f64>;

/// Rows whose L2 norm falls below this are treated as silent and excluded
/// from normalisation (output and gradient are zero for them).
pub const NORM_EPS: f64 = 1e-12;

/// Suggested probe step for [`finite_diff_check`].
pub const FD_EPS: f64 = 1e-5;

/// Absolute floor added to `|analytic|` in the relative-error denominator;
/// keeps coordinates with near-zero gradient from amplifying probe noise.
const FD_ABS_FLOOR: f64 = 1e-6;

// ───────────────────────── surrogate spec ─────────────────────────

/// Fast-sigmoid surrogate used for the backward pass of the spike op.
///
/// The forward op is the Heaviside step at `threshold` (with the convention
/// that exactly-at-threshold fires). The backward factor is
/// `1 / (1 + |slope * (u - threshold)|)^2`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurrogateSpec {
    pub slope: f64,
    pub threshold: f64,
}

impl SurrogateSpec {
    pub fn new(slope: f64, threshold: f64) -> Result<Self> {
        if !(slope > 0.0) || !slope.is_finite() {
            return Err(Error::InvalidParam(format!(
                "surrogate slope must be positive and finite, got {slope}"
            )));
        }
        if !threshold.is_finite() {
            return Err(Error::InvalidParam(format!(
                "surrogate threshold must be finite, got {threshold}"
            )));
        }
        Ok(Self { slope, threshold })
    }

    /// Surrogate derivative factor at membrane value `u`.
    #[inline]
    pub fn factor(&self, u: f64) -> f64 {
        let d = (self.slope * (u - self.threshold)).abs();
        1.0 / ((1.0 + d) * (1.0 + d))
    }
}

// ───────────────────────── graph node ─────────────────────────

type BackwardFn = Box<dyn Fn(&Arr, &[Value])>;

struct Node {
    data: Arc<Arr>,
    grad: RefCell<Option<Arr>>,
    parents: Vec<Value>,
    backward: Option<BackwardFn>,
    tag: &'static str,
    constant: bool,
    nonsmooth: bool,
}

/// A tensor in the autodiff graph. Cloning is cheap (reference-counted);
/// clones alias the same node and gradient slot.
#[derive(Clone)]
pub struct Value(Rc<Node>);

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Value")
            .field("tag", &self.0.tag)
            .field("shape", &self.shape())
            .field("constant", &self.0.constant)
            .finish()
    }
}

impl Value {
    fn new(data: Arr, parents: Vec<Value>, tag: &'static str, nonsmooth: bool, backward: Option<BackwardFn>) -> Self {
        Value(Rc::new(Node {
            data: Arc::new(data),
            grad: RefCell::new(None),
            parents,
            backward,
            tag,
            constant: false,
            nonsmooth,
        }))
    }

    /// A differentiable leaf; gradients accumulate here.
    pub fn leaf(data: Arr) -> Self {
        Value::new(data, Vec::new(), "leaf", false, None)
    }

    /// A differentiable leaf sharing storage with `data` (no copy). Used for
    /// model parameters so each forward pass can alias the stored tensor.
    pub fn shared(data: Arc<Arr>) -> Self {
        Value(Rc::new(Node {
            data,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            tag: "leaf",
            constant: false,
            nonsmooth: false,
        }))
    }

    /// A non-differentiable input; gradient accumulation is skipped and ops
    /// may skip computing its gradient entirely.
    pub fn constant(data: Arr) -> Self {
        Value(Rc::new(Node {
            data: Arc::new(data),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            tag: "constant",
            constant: true,
            nonsmooth: false,
        }))
    }

    pub fn data(&self) -> &Arr {
        &self.0.data
    }

    pub fn data_arc(&self) -> Arc<Arr> {
        Arc::clone(&self.0.data)
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn is_constant(&self) -> bool {
        self.0.constant
    }

    /// Scalar contents; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.0.data.len(), 1, "item() on non-scalar value");
        *self.0.data.iter().next().unwrap()
    }

    /// Accumulated gradient, or zeros if backward never reached this node.
    pub fn grad(&self) -> Arr {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| Arr::zeros(self.0.data.raw_dim()))
    }

    pub fn grad_opt(&self) -> Option<Arr> {
        self.0.grad.borrow().clone()
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn accum(&self, g: &Arr) {
        if self.0.constant {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.clone()),
        }
    }

    fn accum_owned(&self, g: Arr) {
        if self.0.constant {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Accumulate `g` into rows `start..start + g.rows` along axis 0.
    fn accum_axis0_region(&self, start: usize, g: &Arr) {
        if self.0.constant {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        if slot.is_none() {
            *slot = Some(Arr::zeros(self.0.data.raw_dim()));
        }
        let acc = slot.as_mut().unwrap();
        let end = start + g.len_of(Axis(0));
        let mut region = acc.slice_axis_mut(Axis(0), Slice::from(start..end));
        region += g;
    }

    fn check_same_shape(&self, rhs: &Value, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        Ok(())
    }
}

// ───────────────────────── elementwise ops ─────────────────────────

impl Value {
    pub fn add(&self, rhs: &Value) -> Result<Value> {
        self.check_same_shape(rhs, "add")?;
        let data = &*self.0.data + &*rhs.0.data;
        Ok(Value::new(
            data,
            vec![self.clone(), rhs.clone()],
            "add",
            false,
            Some(Box::new(|g, ps| {
                ps[0].accum(g);
                ps[1].accum(g);
            })),
        ))
    }

    pub fn sub(&self, rhs: &Value) -> Result<Value> {
        self.check_same_shape(rhs, "sub")?;
        let data = &*self.0.data - &*rhs.0.data;
        Ok(Value::new(
            data,
            vec![self.clone(), rhs.clone()],
            "sub",
            false,
            Some(Box::new(|g, ps| {
                ps[0].accum(g);
                ps[1].accum_owned(g.mapv(|x| -x));
            })),
        ))
    }

    pub fn mul(&self, rhs: &Value) -> Result<Value> {
        self.check_same_shape(rhs, "mul")?;
        let a = self.data_arc();
        let b = rhs.data_arc();
        let data = &*a * &*b;
        Ok(Value::new(
            data,
            vec![self.clone(), rhs.clone()],
            "mul",
            false,
            Some(Box::new(move |g, ps| {
                if !ps[0].is_constant() {
                    ps[0].accum_owned(g * &*b);
                }
                if !ps[1].is_constant() {
                    ps[1].accum_owned(g * &*a);
                }
            })),
        ))
    }

    pub fn scale(&self, c: f64) -> Value {
        let data = self.0.data.mapv(|x| c * x);
        Value::new(
            data,
            vec![self.clone()],
            "scale",
            false,
            Some(Box::new(move |g, ps| {
                ps[0].accum_owned(g.mapv(|x| c * x));
            })),
        )
    }

    /// Add a length-`C` bias row to every row of an `(R, C)` matrix.
    pub fn add_bias(&self, bias: &Value) -> Result<Value> {
        if self.shape().len() != 2 || bias.shape().len() != 1 || self.shape()[1] != bias.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let data = &*self.0.data + &*bias.0.data;
        Ok(Value::new(
            data,
            vec![self.clone(), bias.clone()],
            "add_bias",
            false,
            Some(Box::new(|g, ps| {
                ps[0].accum(g);
                if !ps[1].is_constant() {
                    ps[1].accum_owned(g.sum_axis(Axis(0)));
                }
            })),
        ))
    }

    pub fn tanh(&self) -> Value {
        let y = Arc::new(self.0.data.mapv(f64::tanh));
        let data = (*y).clone();
        Value::new(
            data,
            vec![self.clone()],
            "tanh",
            false,
            Some(Box::new(move |g, ps| {
                if ps[0].is_constant() {
                    return;
                }
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &yy| *d *= 1.0 - yy * yy);
                ps[0].accum_owned(dx);
            })),
        )
    }

    pub fn sigmoid(&self) -> Value {
        let y = Arc::new(self.0.data.mapv(|x| 1.0 / (1.0 + (-x).exp())));
        let data = (*y).clone();
        Value::new(
            data,
            vec![self.clone()],
            "sigmoid",
            false,
            Some(Box::new(move |g, ps| {
                if ps[0].is_constant() {
                    return;
                }
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &yy| *d *= yy * (1.0 - yy));
                ps[0].accum_owned(dx);
            })),
        )
    }

    pub fn exp(&self) -> Value {
        let y = Arc::new(self.0.data.mapv(f64::exp));
        let data = (*y).clone();
        Value::new(
            data,
            vec![self.clone()],
            "exp",
            false,
            Some(Box::new(move |g, ps| {
                if ps[0].is_constant() {
                    return;
                }
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &yy| *d *= yy);
                ps[0].accum_owned(dx);
            })),
        )
    }

    /// `ln(max(x, floor))`. Below the floor the output is `ln(floor)` and the
    /// gradient is zero, so tiny rates cannot blow the backward pass up.
    pub fn log_clamped(&self, floor: f64) -> Value {
        let x = self.data_arc();
        let data = x.mapv(|v| v.max(floor).ln());
        Value::new(
            data,
            vec![self.clone()],
            "log_clamped",
            false,
            Some(Box::new(move |g, ps| {
                if ps[0].is_constant() {
                    return;
                }
                let mut dx = g.clone();
                dx.zip_mut_with(&x, |d, &xx| *d *= if xx >= floor { 1.0 / xx } else { 0.0 });
                ps[0].accum_owned(dx);
            })),
        )
    }

    /// Hard threshold producing 0/1 spikes; exactly-at-threshold fires.
    /// Backward substitutes the fast-sigmoid surrogate factor.
    pub fn spike(&self, spec: SurrogateSpec) -> Value {
        let u = self.data_arc();
        let data = u.mapv(|x| if x >= spec.threshold { 1.0 } else { 0.0 });
        Value::new(
            data,
            vec![self.clone()],
            "spike_threshold",
            true,
            Some(Box::new(move |g, ps| {
                if ps[0].is_constant() {
                    return;
                }
                let mut dx = g.clone();
                dx.zip_mut_with(&u, |d, &uu| *d *= spec.factor(uu));
                ps[0].accum_owned(dx);
            })),
        )
    }

    /// Forward pass is `replacement`; backward passes the incoming gradient
    /// straight to `self`, bypassing whatever produced `replacement`.
    pub fn straight_through(&self, replacement: Arr) -> Result<Value> {
        if self.shape() != replacement.shape() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: self.shape().to_vec(),
                rhs: replacement.shape().to_vec(),
            });
        }
        Ok(Value::new(
            replacement,
            vec![self.clone()],
            "straight_through",
            true,
            Some(Box::new(|g, ps| {
                ps[0].accum(g);
            })),
        ))
    }
}

// ───────────────────────── matrix ops ─────────────────────────

fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d view")
}

impl Value {
    fn check_matmul(&self, rhs: &Value, op: &'static str, rhs_rows_axis: usize) -> Result<()> {
        let l = self.shape();
        let r = rhs.shape();
        if l.len() != 2 || r.len() != 2 || l[1] != r[rhs_rows_axis] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: l.to_vec(),
                rhs: r.to_vec(),
            });
        }
        Ok(())
    }

    /// `(M, K) x (K, N) -> (M, N)`.
    pub fn matmul(&self, rhs: &Value) -> Result<Value> {
        self.check_matmul(rhs, "matmul", 0)?;
        let a = self.data_arc();
        let b = rhs.data_arc();
        let data = as2(&a).dot(&as2(&b)).into_dyn();
        Ok(Value::new(
            data,
            vec![self.clone(), rhs.clone()],
            "matmul",
            false,
            Some(Box::new(move |g, ps| {
                let g2 = as2(g);
                if !ps[0].is_constant() {
                    ps[0].accum_owned(g2.dot(&as2(&b).t()).into_dyn());
                }
                if !ps[1].is_constant() {
                    ps[1].accum_owned(as2(&a).t().dot(&g2).into_dyn());
                }
            })),
        ))
    }

    /// `(M, K) x (N, K)^T -> (M, N)`; saves materialising the transpose.
    pub fn matmul_tb(&self, rhs: &Value) -> Result<Value> {
        self.check_matmul(rhs, "matmul_tb", 1)?;
        let a = self.data_arc();
        let b = rhs.data_arc();
        let data = as2(&a).dot(&as2(&b).t()).into_dyn();
        Ok(Value::new(
            data,
            vec![self.clone(), rhs.clone()],
            "matmul_tb",
            false,
            Some(Box::new(move |g, ps| {
                let g2 = as2(g);
                if !ps[0].is_constant() {
                    ps[0].accum_owned(g2.dot(&as2(&b)).into_dyn());
                }
                if !ps[1].is_constant() {
                    ps[1].accum_owned(g2.t().dot(&as2(&a)).into_dyn());
                }
            })),
        ))
    }
}

// ───────────────────────── reductions and reshaping ─────────────────────────

fn scalar(x: f64) -> Arr {
    Arr::from_elem(IxDyn(&[]), x)
}

fn scalar_of(g: &Arr) -> f64 {
    *g.iter().next().expect("scalar gradient")
}

impl Value {
    pub fn sum(&self) -> Value {
        let shape = self.0.data.raw_dim();
        let data = scalar(self.0.data.sum());
        Value::new(
            data,
            vec![self.clone()],
            "sum",
            false,
            Some(Box::new(move |g, ps| {
                if ps[0].is_constant() {
                    return;
                }
                ps[0].accum_owned(Arr::from_elem(shape.clone(), scalar_of(g)));
            })),
        )
    }

    pub fn mean(&self) -> Value {
        let shape = self.0.data.raw_dim();
        let n = self.0.data.len() as f64;
        let data = scalar(self.0.data.sum() / n);
        Value::new(
            data,
            vec![self.clone()],
            "mean",
            false,
            Some(Box::new(move |g, ps| {
                if ps[0].is_constant() {
                    return;
                }
                ps[0].accum_owned(Arr::from_elem(shape.clone(), scalar_of(g) / n));
            })),
        )
    }

    /// Row sums of an `(R, C)` matrix, producing shape `(R,)`.
    pub fn row_sum(&self) -> Result<Value> {
        if self.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_sum",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let data = self.0.data.sum_axis(Axis(1));
        Ok(Value::new(
            data,
            vec![self.clone()],
            "row_sum",
            false,
            Some(Box::new(move |g, ps| {
                if ps[0].is_constant() {
                    return;
                }
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().expect("1-d grad");
                let mut dx = Array2::<f64>::zeros((r, c));
                for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    row.fill(g1[i]);
                }
                ps[0].accum_owned(dx.into_dyn());
            })),
        ))
    }

    /// Divide each row `i` of an `(R, C)` matrix by `denom[i]`.
    /// Caller guarantees the denominators are nonzero.
    pub fn div_rows(&self, denom: &Value) -> Result<Value> {
        let l = self.shape();
        let r = denom.shape();
        if l.len() != 2 || r.len() != 1 || l[0] != r[0] {
            return Err(Error::ShapeMismatch {
                op: "div_rows",
                lhs: l.to_vec(),
                rhs: r.to_vec(),
            });
        }
        let m = self.data_arc();
        let d = denom.data_arc();
        let mut data = as2(&m).to_owned();
        for (i, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|x| x / d[[i]]);
        }
        Ok(Value::new(
            data.into_dyn(),
            vec![self.clone(), denom.clone()],
            "div_rows",
            false,
            Some(Box::new(move |g, ps| {
                let g2 = as2(g);
                if !ps[0].is_constant() {
                    let mut dm = g2.to_owned();
                    for (i, mut row) in dm.axis_iter_mut(Axis(0)).enumerate() {
                        row.mapv_inplace(|x| x / d[[i]]);
                    }
                    ps[0].accum_owned(dm.into_dyn());
                }
                if !ps[1].is_constant() {
                    let m2 = as2(&m);
                    let mut dd = Array1::<f64>::zeros(m2.nrows());
                    for i in 0..m2.nrows() {
                        let di = d[[i]];
                        let mut s = 0.0;
                        for j in 0..m2.ncols() {
                            s -= g2[[i, j]] * m2[[i, j]];
                        }
                        dd[i] = s / (di * di);
                    }
                    ps[1].accum_owned(dd.into_dyn());
                }
            })),
        ))
    }

    /// Rows `range.start..range.end` along axis 0, any rank.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Value> {
        let rows = self.shape()[0];
        if start > end || end > rows {
            return Err(Error::InvalidParam(format!(
                "slice_rows {start}..{end} out of bounds for {rows} rows"
            )));
        }
        let data = self
            .0
            .data
            .slice_axis(Axis(0), Slice::from(start..end))
            .to_owned();
        Ok(Value::new(
            data,
            vec![self.clone()],
            "slice_rows",
            false,
            Some(Box::new(move |g, ps| {
                ps[0].accum_axis0_region(start, g);
            })),
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Value> {
        let total: usize = new_shape.iter().product();
        if total != self.0.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let old_shape = self.0.data.raw_dim();
        let data = reshaped(&self.0.data, new_shape);
        Ok(Value::new(
            data,
            vec![self.clone()],
            "reshape",
            false,
            Some(Box::new(move |g, ps| {
                if ps[0].is_constant() {
                    return;
                }
                ps[0].accum_owned(reshaped(g, old_shape.slice()));
            })),
        ))
    }
}

/// Copy-reshape that works regardless of the source memory layout.
fn reshaped(a: &Arr, new_shape: &[usize]) -> Arr {
    if let Some(s) = a.as_slice() {
        Arr::from_shape_vec(IxDyn(new_shape), s.to_vec()).expect("element count checked")
    } else {
        let v: Vec<f64> = a.iter().copied().collect();
        Arr::from_shape_vec(IxDyn(new_shape), v).expect("element count checked")
    }
}

// ───────────────────────── concatenation ─────────────────────────

/// Stack along axis 0; parts must agree on the remaining axes.
pub fn concat_rows(parts: &[Value]) -> Result<Value> {
    concat_axis(parts, 0)
}

/// Stack 2-d matrices side by side along axis 1.
pub fn concat_cols(parts: &[Value]) -> Result<Value> {
    concat_axis(parts, 1)
}

fn concat_axis(parts: &[Value], axis: usize) -> Result<Value> {
    if parts.is_empty() {
        return Err(Error::EmptySequence);
    }
    let views: Vec<_> = parts.iter().map(|p| p.0.data.view()).collect();
    let data = ndarray::concatenate(Axis(axis), &views).map_err(|_| Error::ShapeMismatch {
        op: "concat",
        lhs: parts[0].shape().to_vec(),
        rhs: parts.last().unwrap().shape().to_vec(),
    })?;
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Ok(Value::new(
        data,
        parts.to_vec(),
        "concat",
        false,
        Some(Box::new(move |g, ps| {
            let mut off = 0;
            for (p, &sz) in ps.iter().zip(&sizes) {
                if !p.is_constant() {
                    let piece = g.slice_axis(Axis(axis), Slice::from(off..off + sz)).to_owned();
                    p.accum_owned(piece);
                }
                off += sz;
            }
        })),
    ))
}

// ───────────────────────── generic op recorder ─────────────────────────

/// Symbolic tags accepted by [`record`], covering the core op set; the
/// remaining ops have dedicated constructors because they carry extra
/// configuration (padding, surrogate spec, labels, ...).
#[derive(Clone, Debug)]
pub enum OpTag {
    Add,
    Mul,
    MatMul,
    Tanh,
    Sigmoid,
    Sum,
    Mean,
    Concat,
    Reshape(Vec<usize>),
}

/// Record one op by tag. Arity is checked against the tag.
pub fn record(tag: &OpTag, inputs: &[Value]) -> Result<Value> {
    fn want(n: usize, got: usize, tag: &OpTag) -> Result<()> {
        if n != got {
            return Err(Error::InvalidParam(format!(
                "{tag:?} expects {n} inputs, got {got}"
            )));
        }
        Ok(())
    }
    match tag {
        OpTag::Add => {
            want(2, inputs.len(), tag)?;
            inputs[0].add(&inputs[1])
        }
        OpTag::Mul => {
            want(2, inputs.len(), tag)?;
            inputs[0].mul(&inputs[1])
        }
        OpTag::MatMul => {
            want(2, inputs.len(), tag)?;
            inputs[0].matmul(&inputs[1])
        }
        OpTag::Tanh => {
            want(1, inputs.len(), tag)?;
            Ok(inputs[0].tanh())
        }
        OpTag::Sigmoid => {
            want(1, inputs.len(), tag)?;
            Ok(inputs[0].sigmoid())
        }
        OpTag::Sum => {
            want(1, inputs.len(), tag)?;
            Ok(inputs[0].sum())
        }
        OpTag::Mean => {
            want(1, inputs.len(), tag)?;
            Ok(inputs[0].mean())
        }
        OpTag::Concat => concat_rows(inputs),
        OpTag::Reshape(shape) => {
            want(1, inputs.len(), tag)?;
            inputs[0].reshape(shape)
        }
    }
}

// ───────────────────────── convolution ─────────────────────────

fn as4(a: &Arr) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("4-d view")
}

/// 2-d convolution, stride 1, zero padding `pad`.
///
/// `x` is `(N, C, H, W)`, `w` is `(OC, C, KH, KW)`, `b` is `(OC,)`; the
/// output is `(N, OC, OH, OW)` with `OH = H + 2*pad - KH + 1`. Internally
/// samples are lowered to column matrices in fixed-size chunks so both
/// directions run as a handful of large GEMMs; chunk partials are reduced
/// in index order, keeping results deterministic under parallelism.
pub fn conv2d(x: &Value, w: &Value, b: &Value, pad: usize) -> Result<Value> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if b.shape() != [oc] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: ws.to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::InvalidParam(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            wd + 2 * pad
        )));
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;

    let xd = x.data_arc();
    let wdta = w.data_arc();
    let geom = ConvGeom {
        n,
        c,
        h,
        w: wd,
        oc,
        kh,
        kw,
        pad,
        oh,
        ow,
    };

    let out = conv_forward(&xd, &wdta, b.data(), &geom);
    let geom_b = geom.clone();
    Ok(Value::new(
        out.into_dyn(),
        vec![x.clone(), w.clone(), b.clone()],
        "conv2d",
        false,
        Some(Box::new(move |g, ps| {
            conv_backward(g, &xd, &wdta, &geom_b, &ps[0], &ps[1], &ps[2]);
        })),
    ))
}

#[derive(Clone)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Sample chunks sized so each lowered column matrix stays near 8k rows.
    /// Chunk boundaries depend only on the geometry, never on thread count.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let rows_per_sample = self.oh * self.ow;
        let per = (8192 / rows_per_sample.max(1)).clamp(1, 128);
        let mut out = Vec::new();
        let mut s = 0;
        while s < self.n {
            let e = (s + per).min(self.n);
            out.push((s, e));
            s = e;
        }
        out
    }
}

/// Lower samples `s..e` into a `( (e-s)*OH*OW, C*KH*KW )` column matrix.
fn im2col(x: &ArrayView4<'_, f64>, s: usize, e: usize, g: &ConvGeom) -> Array2<f64> {
    let rows = (e - s) * g.oh * g.ow;
    let mut cols = Array2::<f64>::zeros((rows, g.ckk()));
    for (ni, n) in (s..e).enumerate() {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ni * g.oh * g.ow + oy * g.ow + ox;
                for cc in 0..g.c {
                    for ky in 0..g.kh {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            cols[[row, cc * g.kh * g.kw + ky * g.kw + kx]] =
                                x[[n, cc, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter a `( (e-s)*OH*OW, C*KH*KW )` gradient back onto the input plane.
fn col2im(dcols: &Array2<f64>, s: usize, e: usize, g: &ConvGeom) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros((e - s, g.c, g.h, g.w));
    for ni in 0..(e - s) {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ni * g.oh * g.ow + oy * g.ow + ox;
                for cc in 0..g.c {
                    for ky in 0..g.kh {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dx[[ni, cc, iy as usize, ix as usize]] +=
                                dcols[[row, cc * g.kh * g.kw + ky * g.kw + kx]];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward(x: &Arr, w: &Arr, b: &Arr, g: &ConvGeom) -> Array4<f64> {
    use rayon::prelude::*;
    let x4 = as4(x);
    let w2 = w
        .view()
        .into_shape_with_order((g.oc, g.ckk()))
        .expect("weights contiguous");
    let chunks = g.chunks();
    let pieces: Vec<Array4<f64>> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let cols = im2col(&x4, s, e, g);
            let mut out_mat = cols.dot(&w2.t());
            for mut row in out_mat.axis_iter_mut(Axis(0)) {
                for (oc, v) in row.iter_mut().enumerate() {
                    *v += b[[oc]];
                }
            }
            // (G*OH*OW, OC) -> (G, OC, OH, OW)
            let gsz = e - s;
            let mut out = Array4::<f64>::zeros((gsz, g.oc, g.oh, g.ow));
            for ni in 0..gsz {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let row = ni * g.oh * g.ow + oy * g.ow + ox;
                        for oc in 0..g.oc {
                            out[[ni, oc, oy, ox]] = out_mat[[row, oc]];
                        }
                    }
                }
            }
            out
        })
        .collect();
    let mut out = Array4::<f64>::zeros((g.n, g.oc, g.oh, g.ow));
    for (&(s, e), piece) in chunks.iter().zip(&pieces) {
        out.slice_mut(ndarray::s![s..e, .., .., ..]).assign(piece);
    }
    out
}

fn conv_backward(gout: &Arr, x: &Arr, w: &Arr, g: &ConvGeom, px: &Value, pw: &Value, pb: &Value) {
    use rayon::prelude::*;
    let g4 = as4(gout);
    if !pb.is_constant() {
        let db = gout.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        pb.accum_owned(db);
    }
    let want_dx = !px.is_constant();
    let want_dw = !pw.is_constant();
    if !want_dx && !want_dw {
        return;
    }
    let x4 = as4(x);
    let w2 = w
        .view()
        .into_shape_with_order((g.oc, g.ckk()))
        .expect("weights contiguous");
    let chunks = g.chunks();
    // Each chunk yields its own partial dW and dx slab; partials are summed
    // sequentially in chunk order so the result never depends on scheduling.
    let pieces: Vec<(Option<Array2<f64>>, Option<Array4<f64>>)> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let gsz = e - s;
            let mut gmat = Array2::<f64>::zeros((gsz * g.oh * g.ow, g.oc));
            for ni in 0..gsz {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let row = ni * g.oh * g.ow + oy * g.ow + ox;
                        for oc in 0..g.oc {
                            gmat[[row, oc]] = g4[[s + ni, oc, oy, ox]];
                        }
                    }
                }
            }
            let dw = if want_dw {
                let cols = im2col(&x4, s, e, g);
                let mut dw = Array2::<f64>::zeros((g.ckk(), g.oc));
                general_mat_mul(1.0, &cols.t(), &gmat.view(), 0.0, &mut dw);
                Some(dw)
            } else {
                None
            };
            let dx = if want_dx {
                let dcols = gmat.dot(&w2);
                Some(col2im(&dcols, s, e, g))
            } else {
                None
            };
            (dw, dx)
        })
        .collect();
    if want_dw {
        let mut dw = Array2::<f64>::zeros((g.ckk(), g.oc));
        for (p, _) in &pieces {
            dw += p.as_ref().unwrap();
        }
        let dw_ochw = dw
            .t()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((g.oc, g.c, g.kh, g.kw))
            .expect("dW shape");
        pw.accum_owned(dw_ochw.into_dyn());
    }
    if want_dx {
        let mut dx = Array4::<f64>::zeros((g.n, g.c, g.h, g.w));
        for (&(s, e), (_, p)) in chunks.iter().zip(&pieces) {
            dx.slice_mut(ndarray::s![s..e, .., .., ..])
                .assign(p.as_ref().unwrap());
        }
        px.accum_owned(dx.into_dyn());
    }
}

/// 2x2 average pooling with stride 2 on `(N, C, H, W)`. Odd trailing rows
/// or columns are dropped (floor semantics) and receive zero gradient.
pub fn avg_pool2(x: &Value) -> Result<Value> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "avg_pool2",
            lhs: xs.to_vec(),
            rhs: vec![],
        });
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidParam(format!(
            "avg_pool2 input {h}x{w} too small for a 2x2 window"
        )));
    }
    let x4 = as4(x.data());
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for cc in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[[ni, cc, oy, ox]] = 0.25
                        * (x4[[ni, cc, 2 * oy, 2 * ox]]
                            + x4[[ni, cc, 2 * oy, 2 * ox + 1]]
                            + x4[[ni, cc, 2 * oy + 1, 2 * ox]]
                            + x4[[ni, cc, 2 * oy + 1, 2 * ox + 1]]);
                }
            }
        }
    }
    Ok(Value::new(
        out.into_dyn(),
        vec![x.clone()],
        "avg_pool2",
        false,
        Some(Box::new(move |g, ps| {
            if ps[0].is_constant() {
                return;
            }
            let g4 = as4(g);
            let mut dx = Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for cc in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = 0.25 * g4[[ni, cc, oy, ox]];
                            dx[[ni, cc, 2 * oy, 2 * ox]] += v;
                            dx[[ni, cc, 2 * oy, 2 * ox + 1]] += v;
                            dx[[ni, cc, 2 * oy + 1, 2 * ox]] += v;
                            dx[[ni, cc, 2 * oy + 1, 2 * ox + 1]] += v;
                        }
                    }
                }
            }
            ps[0].accum_owned(dx.into_dyn());
        })),
    ))
}

// ───────────────────────── fused losses and normalisation ─────────────────────────

/// Numerically stable softmax + cross-entropy on `(B, C)` logits against
/// integer labels. Returns a scalar; `mean` divides by the batch size.
pub fn softmax_cross_entropy(logits: &Value, labels: &[usize], mean: bool) -> Result<Value> {
    let ls = logits.shape();
    if ls.len() != 2 || ls[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: ls.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (bsz, ncls) = (ls[0], ls[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= ncls) {
        return Err(Error::InvalidParam(format!(
            "label {bad} out of range for {ncls} classes"
        )));
    }
    let l2 = as2(logits.data());
    let mut probs = Array2::<f64>::zeros((bsz, ncls));
    let mut total = 0.0;
    for i in 0..bsz {
        let row = l2.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for j in 0..ncls {
            let e = (row[j] - m).exp();
            probs[[i, j]] = e;
            s += e;
        }
        for j in 0..ncls {
            probs[[i, j]] /= s;
        }
        total += s.ln() + m - row[labels[i]];
    }
    if mean {
        total /= bsz as f64;
    }
    let labels: Vec<usize> = labels.to_vec();
    let probs = Arc::new(probs);
    Ok(Value::new(
        scalar(total),
        vec![logits.clone()],
        "softmax_ce",
        false,
        Some(Box::new(move |g, ps| {
            if ps[0].is_constant() {
                return;
            }
            let gv = scalar_of(g) * if mean { 1.0 / bsz as f64 } else { 1.0 };
            let mut dl = probs.as_ref().clone();
            for (i, &y) in labels.iter().enumerate() {
                dl[[i, y]] -= 1.0;
            }
            dl.mapv_inplace(|v| v * gv);
            ps[0].accum_owned(dl.into_dyn());
        })),
    ))
}

/// L2-normalise each row of a `(B, D)` matrix. Rows with norm below
/// [`NORM_EPS`] come back as zero rows with zero gradient; the returned mask
/// marks them `true` (excluded).
pub fn l2_normalize_rows(h: &Value) -> Result<(Value, Vec<bool>)> {
    let hs = h.shape();
    if hs.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "l2_normalize_rows",
            lhs: hs.to_vec(),
            rhs: vec![],
        });
    }
    let (bsz, dim) = (hs[0], hs[1]);
    let h2 = as2(h.data());
    let mut z = Array2::<f64>::zeros((bsz, dim));
    let mut norms = Array1::<f64>::zeros(bsz);
    let mut excluded = vec![false; bsz];
    for i in 0..bsz {
        let n = h2.row(i).dot(&h2.row(i)).sqrt();
        norms[i] = n;
        if n < NORM_EPS {
            excluded[i] = true;
        } else {
            for j in 0..dim {
                z[[i, j]] = h2[[i, j]] / n;
            }
        }
    }
    let z = Arc::new(z);
    let zc = Arc::clone(&z);
    let out = Value::new(
        (*z).clone().into_dyn(),
        vec![h.clone()],
        "l2_normalize_rows",
        false,
        Some(Box::new(move |g, ps| {
            if ps[0].is_constant() {
                return;
            }
            let g2 = as2(g);
            let mut dh = Array2::<f64>::zeros((bsz, dim));
            for i in 0..bsz {
                let n = norms[i];
                if n < NORM_EPS {
                    continue;
                }
                let zi = zc.row(i);
                let gi = g2.row(i);
                let dot = zi.dot(&gi);
                for j in 0..dim {
                    dh[[i, j]] = (gi[j] - zi[j] * dot) / n;
                }
            }
            ps[0].accum_owned(dh.into_dyn());
        })),
    );
    Ok((out, excluded))
}

// ───────────────────────── backward driver ─────────────────────────

/// Reverse-topological order of the graph below `root` (dependencies first).
fn topo_order(root: &Value) -> Vec<Value> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Value, usize)> = Vec::new();
    visited.insert(root.ptr());
    stack.push((root.clone(), 0));
    while let Some((node, idx)) = stack.pop() {
        if idx < node.0.parents.len() {
            stack.push((node.clone(), idx + 1));
            let parent = node.0.parents[idx].clone();
            if visited.insert(parent.ptr()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Run reverse-mode accumulation from a scalar `root`. Every non-constant
/// node reached from the root ends up with its gradient; leaves keep theirs
/// until dropped, so callers read `Value::grad` after this returns.
pub fn backward(root: &Value) -> Result<()> {
    if root.0.data.len() != 1 {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    *root.0.grad.borrow_mut() = Some(Arr::from_elem(root.0.data.raw_dim(), 1.0));
    let order = topo_order(root);
    for node in order.iter().rev() {
        let g = node.0.grad.borrow().clone();
        if let (Some(g), Some(bw)) = (g, node.0.backward.as_ref()) {
            bw(&g, &node.0.parents);
        }
    }
    Ok(())
}

/// First non-smooth op tag reachable from `root`, if any.
fn first_nonsmooth(root: &Value) -> Option<&'static str> {
    topo_order(root)
        .iter()
        .find(|n| n.0.nonsmooth)
        .map(|n| n.0.tag)
}

/// Compare the analytic gradient of `f` at `x` against central finite
/// differences with probe step `eps`, returning the worst relative error
/// `|analytic - fd| / (|analytic| + floor)` over all coordinates.
///
/// `f` must be deterministic and build a scalar-rooted graph. Graphs that
/// contain a spike threshold or straight-through op are rejected with
/// [`Error::NonSmoothGraph`] since their backward pass intentionally
/// disagrees with the true forward derivative.
pub fn finite_diff_check<F>(f: &F, x: &Arr, eps: f64) -> Result<f64>
where
    F: Fn(&Value) -> Result<Value>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidParam(format!("probe step must be positive, got {eps}")));
    }
    let leaf = Value::leaf(x.clone());
    let root = f(&leaf)?;
    if let Some(tag) = first_nonsmooth(&root) {
        return Err(Error::NonSmoothGraph(tag));
    }
    if root.0.data.len() != 1 {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    backward(&root)?;
    let analytic = leaf.grad();
    let mut worst = 0.0f64;
    for (idx, _) in x.indexed_iter() {
        let mut xp = x.clone();
        xp[&idx] += eps;
        let fp = f(&Value::leaf(xp))?.item();
        let mut xm = x.clone();
        xm[&idx] -= eps;
        let fm = f(&Value::leaf(xm))?.item();
        let fd = (fp - fm) / (2.0 * eps);
        let a = analytic[&idx];
        let rel = (a - fd).abs() / (a.abs() + FD_ABS_FLOOR);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn add_requires_matching_shapes() {
        let a = Value::leaf(randn(&mut ChaCha8Rng::seed_from_u64(0), &[2, 3]));
        let b = Value::leaf(randn(&mut ChaCha8Rng::seed_from_u64(1), &[3, 2]));
        match a.add(&b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let a = Value::leaf(randn(&mut ChaCha8Rng::seed_from_u64(2), &[2, 2]));
        let y = a.tanh();
        assert!(matches!(backward(&y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn gradient_accumulates_over_reused_nodes() {
        // y = sum(x + x) => dy/dx = 2 everywhere.
        let x = Value::leaf(arr1(&[1.0, -2.0, 3.0]).into_dyn());
        let y = x.add(&x).unwrap().sum();
        backward(&y).unwrap();
        assert_eq!(x.grad(), Arr::from_elem(IxDyn(&[3]), 2.0));
    }

    #[test]
    fn mul_self_doubles_gradient() {
        // y = sum(x*x) => dy/dx = 2x.
        let x = Value::leaf(arr1(&[1.5, -0.5]).into_dyn());
        let y = x.mul(&x).unwrap().sum();
        backward(&y).unwrap();
        assert_eq!(x.grad(), arr1(&[3.0, -1.0]).into_dyn());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = Value::constant(arr1(&[1.0, 2.0]).into_dyn());
        let w = Value::leaf(arr1(&[3.0, 4.0]).into_dyn());
        let y = x.mul(&w).unwrap().sum();
        backward(&y).unwrap();
        assert!(x.grad_opt().is_none());
        assert_eq!(w.grad(), arr1(&[1.0, 2.0]).into_dyn());
    }

    #[test]
    fn spike_fires_exactly_at_threshold() {
        let spec = SurrogateSpec::new(0.9, 1.0).unwrap();
        let u = Value::leaf(arr1(&[0.999, 1.0, 1.001, -5.0]).into_dyn());
        let s = u.spike(spec);
        assert_eq!(s.data(), &arr1(&[0.0, 1.0, 1.0, 0.0]).into_dyn());
    }

    #[test]
    fn surrogate_factor_matches_closed_form() {
        let spec = SurrogateSpec::new(2.0, 1.0).unwrap();
        // |slope*(u-theta)| = 1 at u = 1.5 => 1/(1+1)^2 = 0.25.
        assert!((spec.factor(1.5) - 0.25).abs() < 1e-15);
        assert!((spec.factor(1.0) - 1.0).abs() < 1e-15);
        // Symmetric around the threshold.
        assert!((spec.factor(0.5) - spec.factor(1.5)).abs() < 1e-15);
    }

    #[test]
    fn spike_backward_scales_by_surrogate() {
        let spec = SurrogateSpec::new(2.0, 1.0).unwrap();
        let u = Value::leaf(arr1(&[1.5]).into_dyn());
        let y = u.spike(spec).sum();
        backward(&y).unwrap();
        assert!((u.grad()[[0]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn finite_diff_rejects_spike_graphs() {
        let spec = SurrogateSpec::new(0.9, 1.0).unwrap();
        let f = |v: &Value| Ok(v.spike(spec).sum());
        let err = finite_diff_check(&f, &arr1(&[0.3, 2.0]).into_dyn(), FD_EPS).unwrap_err();
        assert!(matches!(err, Error::NonSmoothGraph("spike_threshold")));
    }

    #[test]
    fn finite_diff_rejects_straight_through() {
        let f = |v: &Value| {
            let repl = Arr::from_elem(IxDyn(&[2]), 1.0);
            Ok(v.straight_through(repl)?.sum())
        };
        let err = finite_diff_check(&f, &arr1(&[0.3, 2.0]).into_dyn(), FD_EPS).unwrap_err();
        assert!(matches!(err, Error::NonSmoothGraph("straight_through")));
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let x = Value::leaf(arr1(&[0.2, 0.8]).into_dyn());
        let repl = arr1(&[5.0, -5.0]).into_dyn();
        let w = Value::leaf(arr1(&[1.0, 2.0]).into_dyn());
        let y = x.straight_through(repl).unwrap().mul(&w).unwrap().sum();
        backward(&y).unwrap();
        assert_eq!(x.grad(), arr1(&[1.0, 2.0]).into_dyn());
    }

    #[test]
    fn matmul_against_hand_computed() {
        let a = Value::leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Value::leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.data(), &arr2(&[[19.0, 22.0], [43.0, 50.0]]).into_dyn());
        let loss = y.sum();
        backward(&loss).unwrap();
        // dA = 1 * B^T, dB = A^T * 1.
        assert_eq!(a.grad(), arr2(&[[11.0, 15.0], [11.0, 15.0]]).into_dyn());
        assert_eq!(b.grad(), arr2(&[[4.0, 4.0], [6.0, 6.0]]).into_dyn());
    }

    /// One finite-difference check per smooth op, all through the public API.
    #[test]
    fn finite_diff_every_smooth_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases: Vec<(&str, Box<dyn Fn(&Value) -> Result<Value>>, Vec<usize>)> = vec![
            (
                "add",
                Box::new(|v: &Value| Ok(v.add(&v.tanh())?.sum().scale(0.5))),
                vec![3, 2],
            ),
            (
                "mul",
                Box::new(|v: &Value| Ok(v.mul(&v.sigmoid())?.sum())),
                vec![2, 3],
            ),
            ("sub", Box::new(|v: &Value| Ok(v.sub(&v.exp())?.mean())), vec![4]),
            (
                "matmul",
                Box::new(|v: &Value| Ok(v.matmul(&v.tanh())?.sum())),
                vec![3, 3],
            ),
            (
                "matmul_tb",
                Box::new(|v: &Value| Ok(v.matmul_tb(&v.sigmoid())?.sum())),
                vec![3, 3],
            ),
            (
                "log_clamped",
                Box::new(|v: &Value| Ok(v.exp().log_clamped(1e-8).sum())),
                vec![5],
            ),
            ("row_sum", Box::new(|v: &Value| Ok(v.row_sum()?.mean())), vec![3, 4]),
            (
                "reshape",
                Box::new(|v: &Value| Ok(v.reshape(&[6])?.tanh().sum())),
                vec![2, 3],
            ),
            (
                "slice+concat",
                Box::new(|v: &Value| {
                    let a = v.slice_rows(0, 2)?;
                    let b = v.slice_rows(2, 4)?;
                    Ok(concat_rows(&[b.tanh(), a])?.sum())
                }),
                vec![4, 2],
            ),
            (
                "concat_cols",
                Box::new(|v: &Value| Ok(concat_cols(&[v.tanh(), v.sigmoid()])?.sum())),
                vec![3, 2],
            ),
            (
                "div_rows",
                Box::new(|v: &Value| {
                    let denom = v.exp().row_sum()?;
                    Ok(v.div_rows(&denom)?.sum())
                }),
                vec![3, 4],
            ),
            (
                "add_bias",
                Box::new(|v: &Value| {
                    let bias = v.slice_rows(0, 1)?.reshape(&[3])?;
                    Ok(v.add_bias(&bias)?.tanh().sum())
                }),
                vec![2, 3],
            ),
            (
                "conv2d",
                Box::new(|v: &Value| {
                    // Row 0 is the image, row 1 carries the filter and bias.
                    let x = v.slice_rows(0, 1)?.reshape(&[1, 1, 4, 4])?;
                    let row1 = v.slice_rows(1, 2)?.reshape(&[16])?;
                    let w = row1.slice_rows(0, 9)?.reshape(&[1, 1, 3, 3])?;
                    let b = row1.slice_rows(15, 16)?;
                    Ok(conv2d(&x, &w, &b, 1)?.sum())
                }),
                vec![2, 16],
            ),
            (
                "avg_pool2",
                Box::new(|v: &Value| {
                    let x = v.reshape(&[1, 1, 5, 4])?;
                    Ok(avg_pool2(&x)?.tanh().sum())
                }),
                vec![20],
            ),
            (
                "softmax_ce",
                Box::new(|v: &Value| softmax_cross_entropy(v, &[2, 0, 1], true)),
                vec![3, 4],
            ),
            (
                "l2_normalize",
                Box::new(|v: &Value| {
                    let (z, _) = l2_normalize_rows(v)?;
                    Ok(z.tanh().sum())
                }),
                vec![3, 5],
            ),
        ];
        for (name, f, shape) in &cases {
            let x = randn(&mut rng, shape) + 0.5; // keep away from kinks of log/normalise
            let worst = finite_diff_check(f, &x, FD_EPS)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(worst <= 1e-4, "{name}: worst rel err {worst}");
        }
    }

    /// Randomly composed smooth graphs stay within finite-difference
    /// tolerance across a hundred seeds.
    #[test]
    fn finite_diff_random_smooth_graphs() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = rng.random_range(2..5usize);
            let cols = rng.random_range(2..5usize);
            let pick = rng.random_range(0..4usize);
            let f = move |v: &Value| -> Result<Value> {
                let h = match pick {
                    0 => v.tanh().matmul_tb(v)?,
                    1 => v.sigmoid().mul(&v.tanh())?,
                    2 => {
                        let denom = v.exp().row_sum()?;
                        v.exp().div_rows(&denom)?
                    }
                    _ => v.matmul_tb(&v.sigmoid())?.tanh(),
                };
                Ok(h.sum().scale(0.7))
            };
            let x = randn(&mut rng, &[rows, cols]);
            let worst = finite_diff_check(&f, &x, FD_EPS).unwrap();
            assert!(worst <= 1e-4, "seed {seed}: worst rel err {worst}");
        }
    }

    #[test]
    fn record_dispatches_by_tag() {
        let a = Value::leaf(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = Value::leaf(arr2(&[[3.0, 4.0]]).into_dyn());
        let s = record(&OpTag::Add, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.data(), &arr2(&[[4.0, 6.0]]).into_dyn());
        let r = record(&OpTag::Reshape(vec![2, 1]), &[a.clone()]).unwrap();
        assert_eq!(r.shape(), &[2, 1]);
        let m = record(&OpTag::Mean, &[b]).unwrap();
        assert!((m.item() - 3.5).abs() < 1e-15);
        assert!(record(&OpTag::Tanh, &[a.clone(), a]).is_err());
    }

    #[test]
    fn softmax_ce_known_value() {
        // Uniform logits over 4 classes: loss = ln 4 per sample.
        let logits = Value::leaf(Arr::zeros(IxDyn(&[2, 4])));
        let loss = softmax_cross_entropy(&logits, &[0, 3], false).unwrap();
        assert!((loss.item() - 2.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_flags_silent_rows() {
        let h = Value::leaf(arr2(&[[3.0, 4.0], [0.0, 0.0]]).into_dyn());
        let (z, excluded) = l2_normalize_rows(&h).unwrap();
        assert_eq!(excluded, vec![false, true]);
        assert!((z.data()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((z.data()[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(z.data()[[1, 0]], 0.0);
        let y = z.sum();
        backward(&y).unwrap();
        assert_eq!(h.grad()[[1, 0]], 0.0);
        assert_eq!(h.grad()[[1, 1]], 0.0);
    }

    #[test]
    fn avg_pool_drops_odd_remainder() {
        let x = Value::leaf(Arr::from_shape_fn(IxDyn(&[1, 1, 3, 3]), |ix| {
            (ix[2] * 3 + ix[3]) as f64
        }));
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        // Mean of [[0,1],[3,4]] = 2.
        assert_eq!(y.data()[[0, 0, 0, 0]], 2.0);
        let s = y.sum();
        backward(&s).unwrap();
        // Last row/col excluded from pooling -> zero gradient there.
        assert_eq!(x.grad()[[0, 0, 2, 2]], 0.0);
        assert_eq!(x.grad()[[0, 0, 0, 0]], 0.25);
    }
}
