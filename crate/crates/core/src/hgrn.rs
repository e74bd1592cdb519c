//! Gated recurrent unit over per-timestep feature vectors.
//!
//! One step, with `[h; x]` the concatenation of the previous hidden state
//! and the current input:
//!
//! ```text
//! f  = sigmoid(W_f [h; x] + b_f)        forget gate
//! u  = sigmoid(W_u [h; x] + b_u)        update gate
//! c~ = tanh(W_c x + b_c)                candidate cell
//! c' = f * c + u * c~                   cell update
//! h' = tanh(c')                         hidden output
//! ```
//!
//! Both `c` and `h` start at zero. The module provides a plain-array step
//! (used as the oracle) and a batched graph step for training; the two agree
//! to machine precision.

use ndarray::{Array1, ArrayView1};

use crate::autodiff::{self, Arr, Value};
use crate::error::{Error, Result};
use crate::snn::{init_uniform, param_rng, ParamTensor};

/// Trainable gate parameters. Weight layout is `[in, out]` so a batched
/// step is `x . W`.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_f: ParamTensor,
    pub b_f: ParamTensor,
    pub w_u: ParamTensor,
    pub b_u: ParamTensor,
    pub w_c: ParamTensor,
    pub b_c: ParamTensor,
}

impl GateParams {
    pub fn init(input_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::InvalidParam(format!(
                "gate dimensions must be positive, got input {input_dim}, hidden {hidden_dim}"
            )));
        }
        let joint = hidden_dim + input_dim;
        let mk = |name: &str, shape: &[usize], fan: usize| {
            let mut rng = param_rng(seed, name);
            ParamTensor::new(name, init_uniform(&mut rng, shape, fan, 1.0))
        };
        Ok(Self {
            input_dim,
            hidden_dim,
            w_f: mk("hgrn.f.w", &[joint, hidden_dim], joint),
            b_f: mk("hgrn.f.b", &[hidden_dim], joint),
            w_u: mk("hgrn.u.w", &[joint, hidden_dim], joint),
            b_u: mk("hgrn.u.b", &[hidden_dim], joint),
            w_c: mk("hgrn.c.w", &[input_dim, hidden_dim], input_dim),
            b_c: mk("hgrn.c.b", &[hidden_dim], input_dim),
        })
    }

    /// Tensors in a stable update order.
    pub fn tensors(&self) -> Vec<&ParamTensor> {
        vec![&self.w_f, &self.b_f, &self.w_u, &self.b_u, &self.w_c, &self.b_c]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![
            &mut self.w_f,
            &mut self.b_f,
            &mut self.w_u,
            &mut self.b_u,
            &mut self.w_c,
            &mut self.b_c,
        ]
    }

    /// Graph leaves aliasing the stored tensors, one binding per forward.
    pub fn bind(&self) -> GateBinding {
        GateBinding {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_f: self.w_f.value(),
            b_f: self.b_f.value(),
            w_u: self.w_u.value(),
            b_u: self.b_u.value(),
            w_c: self.w_c.value(),
            b_c: self.b_c.value(),
        }
    }
}

/// Graph leaves for one forward pass over the gate parameters.
pub struct GateBinding {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_f: Value,
    pub b_f: Value,
    pub w_u: Value,
    pub b_u: Value,
    pub w_c: Value,
    pub b_c: Value,
}

impl GateBinding {
    /// Leaves in the same order as [`GateParams::tensors`].
    pub fn values(&self) -> Vec<&Value> {
        vec![&self.w_f, &self.b_f, &self.w_u, &self.b_u, &self.w_c, &self.b_c]
    }
}

// ───────────────────────── plain-array step ─────────────────────────

/// Recurrent state for one sample.
#[derive(Clone, Debug)]
pub struct GateState {
    pub c: Array1<f64>,
    pub h: Array1<f64>,
}

impl GateState {
    /// The zero initial state.
    pub fn rest(hidden_dim: usize) -> Self {
        Self {
            c: Array1::zeros(hidden_dim),
            h: Array1::zeros(hidden_dim),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mat2(t: &ParamTensor) -> ndarray::ArrayView2<'_, f64> {
    t.data
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("gate weight is 2-D")
}

fn vec1(t: &ParamTensor) -> ndarray::ArrayView1<'_, f64> {
    t.data
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("gate bias is 1-D")
}

/// One recurrent step on plain arrays (single sample).
pub fn hgrn_step(
    params: &GateParams,
    state: &GateState,
    x: &ArrayView1<f64>,
) -> Result<GateState> {
    if x.len() != params.input_dim {
        return Err(Error::DimMismatch {
            expected: params.input_dim,
            got: x.len(),
        });
    }
    if state.h.len() != params.hidden_dim {
        return Err(Error::DimMismatch {
            expected: params.hidden_dim,
            got: state.h.len(),
        });
    }
    let mut hx = Array1::zeros(params.hidden_dim + params.input_dim);
    hx.slice_mut(ndarray::s![..params.hidden_dim]).assign(&state.h);
    hx.slice_mut(ndarray::s![params.hidden_dim..]).assign(x);

    let f = (hx.dot(&mat2(&params.w_f)) + vec1(&params.b_f)).mapv(sigmoid);
    let u = (hx.dot(&mat2(&params.w_u)) + vec1(&params.b_u)).mapv(sigmoid);
    let cand = (x.dot(&mat2(&params.w_c)) + vec1(&params.b_c)).mapv(f64::tanh);
    let c = &f * &state.c + &u * &cand;
    let h = c.mapv(f64::tanh);
    Ok(GateState { c, h })
}

/// Run a whole sequence on plain arrays, returning the final state.
pub fn hgrn_sequence(params: &GateParams, inputs: &[Array1<f64>]) -> Result<GateState> {
    if inputs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut state = GateState::rest(params.hidden_dim);
    for x in inputs {
        state = hgrn_step(params, &state, &x.view())?;
    }
    Ok(state)
}

// ───────────────────────── graph step ─────────────────────────

/// Batched recurrent state on the tape, both `(B, H)`.
pub struct GraphGateState {
    pub c: Value,
    pub h: Value,
}

impl GraphGateState {
    /// Zero initial state for a batch.
    pub fn rest(hidden_dim: usize, batch: usize) -> Self {
        let zeros = Arr::zeros(ndarray::IxDyn(&[batch, hidden_dim]));
        Self {
            c: Value::constant(zeros.clone()),
            h: Value::constant(zeros),
        }
    }
}

/// One batched recurrent step on the tape; `x` is `(B, X)`.
pub fn hgrn_step_graph(
    binding: &GateBinding,
    state: &GraphGateState,
    x: &Value,
) -> Result<GraphGateState> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != binding.input_dim {
        return Err(Error::DimMismatch {
            expected: binding.input_dim,
            got: shape.last().copied().unwrap_or(0),
        });
    }
    let hx = autodiff::concat_cols(&[state.h.clone(), x.clone()])?;
    let f = hx.matmul(&binding.w_f)?.add_bias(&binding.b_f)?.sigmoid();
    let u = hx.matmul(&binding.w_u)?.add_bias(&binding.b_u)?.sigmoid();
    let cand = x.matmul(&binding.w_c)?.add_bias(&binding.b_c)?.tanh();
    let c = f.mul(&state.c)?.add(&u.mul(&cand)?)?;
    let h = c.tanh();
    Ok(GraphGateState { c, h })
}

/// Run a whole sequence of `(B, X)` inputs on the tape, returning the final
/// state (whose `h` feeds the readout head).
pub fn hgrn_sequence_graph(binding: &GateBinding, inputs: &[Value]) -> Result<GraphGateState> {
    let first = inputs.first().ok_or(Error::EmptySequence)?;
    let batch = first.shape()[0];
    let mut state = GraphGateState::rest(binding.hidden_dim, batch);
    for x in inputs {
        state = hgrn_step_graph(binding, &state, x)?;
    }
    Ok(state)
}

// ───────────────────────── tests ─────────────────────────
