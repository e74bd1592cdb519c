//! Leaky integrate-and-fire dynamics and the spiking convolutional encoder.
//!
//! The membrane update is `u[t] = beta * u[t-1] + i[t]`; a spike fires when
//! the membrane reaches the threshold (inclusive), and firing subtracts the
//! threshold from the membrane (soft reset) rather than clearing it.
//!
//! The encoder runs conv -> LIF -> conv -> LIF -> FC -> LIF over a binary
//! `(T, C, H, W)` input volume. Convolutions and the fully connected layers
//! are time-independent, so the batch is folded to `(T*B, ...)` and each
//! such layer runs as one op over all timesteps; only the LIF recurrences
//! walk time step by step. An optional 2x2 average pool sits between each
//! convolution and its threshold — placing it before the nonlinearity keeps
//! every signal that crosses a layer boundary a 0/1 spike.

use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Arr, SurrogateSpec, Value};
use crate::data::SpikeTensor;
use crate::error::{Error, Result};

// ───────────────────────── LIF dynamics ─────────────────────────

/// Neuron constants shared by a layer.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LifParams {
    /// Membrane decay per step, in `[0, 1]`.
    pub beta: f64,
    /// Firing threshold; also the amount subtracted on reset.
    pub theta: f64,
    /// Surrogate used for the backward pass of the threshold.
    pub surrogate: SurrogateSpec,
}

impl LifParams {
    /// Standard constructor; the surrogate is centred on `theta`.
    pub fn new(beta: f64, theta: f64, surrogate_slope: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidParam(format!(
                "beta must lie in [0, 1], got {beta}"
            )));
        }
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::InvalidParam(format!(
                "theta must be positive and finite, got {theta}"
            )));
        }
        Ok(Self {
            beta,
            theta,
            surrogate: SurrogateSpec::new(surrogate_slope, theta)?,
        })
    }
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams::new(0.9, 1.0, 0.9).expect("default constants are valid")
    }
}

/// Membrane and spike tensors after a step; shapes match the input current.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub membrane: Arr,
    pub spikes: Arr,
}

impl LifState {
    /// Resting state (zero membrane, no spikes) of the given shape.
    pub fn rest(shape: &[usize]) -> Self {
        Self {
            membrane: Arr::zeros(IxDyn(shape)),
            spikes: Arr::zeros(IxDyn(shape)),
        }
    }
}

/// One LIF step on plain arrays: decay, integrate, threshold, soft reset.
pub fn lif_step(state: &LifState, input: &Arr, params: &LifParams) -> Result<LifState> {
    if state.membrane.shape() != input.shape() {
        return Err(Error::ShapeMismatch {
            op: "lif_step",
            lhs: state.membrane.shape().to_vec(),
            rhs: input.shape().to_vec(),
        });
    }
    let mut membrane = &state.membrane * params.beta + input;
    let spikes = membrane.mapv(|u| if u >= params.theta { 1.0 } else { 0.0 });
    membrane.zip_mut_with(&spikes, |u, &s| *u -= params.theta * s);
    Ok(LifState { membrane, spikes })
}

/// The same step recorded on the autodiff tape. Returns the new membrane
/// and the spike tensor; gradients flow through the surrogate.
pub fn lif_step_graph(membrane: &Value, input: &Value, params: &LifParams) -> Result<(Value, Value)> {
    let charged = membrane.scale(params.beta).add(input)?;
    let spikes = charged.spike(params.surrogate);
    let reset = charged.sub(&spikes.scale(params.theta))?;
    Ok((reset, spikes))
}

/// Average spike count per timestep: `rates[b][k] = mean_t spikes[t][b][k]`.
pub fn rate_output(spikes_per_step: &[Arr]) -> Result<Arr> {
    if spikes_per_step.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut acc = spikes_per_step[0].clone();
    for s in &spikes_per_step[1..] {
        if s.shape() != acc.shape() {
            return Err(Error::ShapeMismatch {
                op: "rate_output",
                lhs: acc.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        acc += s;
    }
    Ok(acc / spikes_per_step.len() as f64)
}

// ───────────────────────── encoder configuration ─────────────────────────

/// Architecture of the spiking encoder. All presets share the dynamics and
/// differ only in capacity, so tests and quick runs can use small variants
/// of the same code path.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub input_hw: usize,
    pub timesteps: usize,
    pub conv1_out: usize,
    pub conv2_out: usize,
    pub kernel: usize,
    pub padding: usize,
    /// 2x2 average pooling after each convolution (before its threshold).
    pub pool: bool,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub lif: LifParams,
    /// Dropout probability on the hidden FC pre-activation (training only).
    pub dropout_p: f64,
    /// Multiplier on the uniform init bound; 1.0 matches fan-in scaling.
    pub init_gain: f64,
    /// Separate init bound multiplier for the readout head. Keeping it
    /// below `init_gain` compresses the head's initial per-class firing
    /// offsets, so learned class evidence decides the rate ordering
    /// instead of the random initial bias of each output neuron. Readout
    /// weight columns are additionally centered to zero mean at init,
    /// removing each output neuron's random DC offset entirely.
    pub readout_gain: f64,
    /// Constant initial value of the readout biases. With leak factor β
    /// a constant drive b settles the membrane at b/(1−β), so any value
    /// above θ(1−β) makes every output neuron fire at a base rate from the
    /// first step, for any seed — the clamped cross-entropy then always
    /// has a gradient toward the target class, whereas a neuron that never
    /// fires would never learn.
    pub readout_bias: f64,
}

impl EncoderConfig {
    /// Full-scale reference architecture: 64/128 conv channels and a 512-d
    /// feature layer on a 34x34 two-channel plane over 25 steps.
    pub fn full(num_classes: usize) -> Self {
        Self {
            in_channels: 2,
            input_hw: 34,
            timesteps: 25,
            conv1_out: 64,
            conv2_out: 128,
            kernel: 3,
            padding: 1,
            pool: false,
            hidden_dim: 512,
            num_classes,
            lif: LifParams::default(),
            dropout_p: 0.2,
            init_gain: 1.0,
            readout_gain: 1.0,
            readout_bias: 0.15,
        }
    }

    /// The full architecture with pooling enabled, shrinking the FC input
    /// from `128*34*34` to `128*8*8` while keeping the channel widths.
    pub fn full_pooled(num_classes: usize) -> Self {
        Self {
            pool: true,
            ..Self::full(num_classes)
        }
    }

    /// Workstation-sized preset used by the quick paths: same topology,
    /// reduced widths, pooling on. As with [`tiny`](Self::tiny), the raised
    /// body gain keeps the narrow layers spiking at initialization — at
    /// unit gain the whole net is silent and the clamped cross-entropy has
    /// no gradient — while the readout stays at unit gain so its initial
    /// per-class offsets are small.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            in_channels: 2,
            input_hw: 34,
            timesteps: 25,
            conv1_out: 6,
            conv2_out: 12,
            kernel: 3,
            padding: 1,
            pool: true,
            hidden_dim: 192,
            num_classes,
            lif: LifParams::default(),
            dropout_p: 0.2,
            init_gain: 3.0,
            readout_gain: 1.0,
            readout_bias: 0.15,
        }
    }

    /// Minimal preset for fast functional tests. The raised gain offsets
    /// the short integration window so the network spikes from the start.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            in_channels: 2,
            input_hw: 8,
            timesteps: 4,
            conv1_out: 3,
            conv2_out: 4,
            kernel: 3,
            padding: 1,
            pool: false,
            hidden_dim: 16,
            num_classes,
            lif: LifParams::default(),
            dropout_p: 0.2,
            init_gain: 3.0,
            readout_gain: 1.0,
            readout_bias: 0.15,
        }
    }

    fn conv_out_hw(&self, hw: usize) -> usize {
        hw + 2 * self.padding - self.kernel + 1
    }

    /// Spatial side lengths after each conv (and pool, when enabled).
    pub fn stage_hw(&self) -> (usize, usize) {
        let mut h1 = self.conv_out_hw(self.input_hw);
        if self.pool {
            h1 /= 2;
        }
        let mut h2 = self.conv_out_hw(h1);
        if self.pool {
            h2 /= 2;
        }
        (h1, h2)
    }

    /// Flattened dimension feeding the hidden FC layer.
    pub fn flat_dim(&self) -> usize {
        let (_, h2) = self.stage_hw();
        self.conv2_out * h2 * h2
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.input_hw == 0
            || self.timesteps == 0
            || self.conv1_out == 0
            || self.conv2_out == 0
            || self.hidden_dim == 0
            || self.num_classes == 0
        {
            return Err(Error::InvalidParam(
                "encoder dimensions must all be positive".into(),
            ));
        }
        if self.kernel == 0 || self.input_hw + 2 * self.padding < self.kernel {
            return Err(Error::InvalidParam(format!(
                "kernel {} does not fit input {} with padding {}",
                self.kernel, self.input_hw, self.padding
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidParam(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if !(self.init_gain > 0.0) || !(self.readout_gain > 0.0) {
            return Err(Error::InvalidParam("init gains must be positive".into()));
        }
        if !self.readout_bias.is_finite() || self.readout_bias < 0.0 {
            return Err(Error::InvalidParam(
                "readout_bias must be finite and non-negative".into(),
            ));
        }
        let (h1, h2) = self.stage_hw();
        if h1 == 0 || h2 == 0 {
            return Err(Error::InvalidParam(
                "pooling reduced a stage to zero spatial extent".into(),
            ));
        }
        Ok(())
    }

    /// Trainable parameter count implied by the architecture.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let conv1 = self.conv1_out * self.in_channels * k2 + self.conv1_out;
        let conv2 = self.conv2_out * self.conv1_out * k2 + self.conv2_out;
        let fc = self.flat_dim() * self.hidden_dim + self.hidden_dim;
        let out = self.hidden_dim * self.num_classes + self.num_classes;
        conv1 + conv2 + fc + out
    }
}

// ───────────────────────── parameters ─────────────────────────

/// One named parameter tensor. The store owns the data; forward passes
/// alias it through `Value::shared`, so updates write back in place.
#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub data: Arc<Arr>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, data: Arr) -> Self {
        Self {
            name: name.into(),
            data: Arc::new(data),
        }
    }

    pub fn value(&self) -> Value {
        Value::shared(Arc::clone(&self.data))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Apply an in-place update. Panics if the tensor is aliased by a live
    /// forward graph, which would make the update order ambiguous.
    pub fn update(&mut self, f: impl FnOnce(&mut Arr)) {
        let data = Arc::get_mut(&mut self.data)
            .expect("parameter update while a forward graph still aliases the tensor");
        f(data);
    }

    /// Replace the stored tensor (used when loading checkpoints).
    pub fn replace(&mut self, data: Arr) -> Result<()> {
        if data.shape() != self.data.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_replace",
                lhs: self.data.shape().to_vec(),
                rhs: data.shape().to_vec(),
            });
        }
        self.data = Arc::new(data);
        Ok(())
    }
}

/// Deterministic per-tensor RNG stream: the same `(seed, name)` pair always
/// initialises identically, no matter which other tensors a model owns.
/// Models sharing a component therefore start from identical weights.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::data::derive_seed(seed, name, 0))
}

/// Uniform init in `[-gain/sqrt(fan_in), gain/sqrt(fan_in)]`.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Arr {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

/// The encoder's trainable tensors.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub conv1_w: ParamTensor,
    pub conv1_b: ParamTensor,
    pub conv2_w: ParamTensor,
    pub conv2_b: ParamTensor,
    pub fc_w: ParamTensor,
    pub fc_b: ParamTensor,
    pub out_w: ParamTensor,
    pub out_b: ParamTensor,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let fan1 = cfg.in_channels * k * k;
        let fan2 = cfg.conv1_out * k * k;
        let flat = cfg.flat_dim();
        let mk = |name: &str, shape: &[usize], fan: usize, g: f64| {
            let mut rng = param_rng(seed, name);
            ParamTensor::new(name, init_uniform(&mut rng, shape, fan, g))
        };
        let g = cfg.init_gain;
        let r = cfg.readout_gain;
        Ok(Self {
            cfg: cfg.clone(),
            conv1_w: mk("encoder.conv1.w", &[cfg.conv1_out, cfg.in_channels, k, k], fan1, g),
            conv1_b: mk("encoder.conv1.b", &[cfg.conv1_out], fan1, g),
            conv2_w: mk("encoder.conv2.w", &[cfg.conv2_out, cfg.conv1_out, k, k], fan2, g),
            conv2_b: mk("encoder.conv2.b", &[cfg.conv2_out], fan2, g),
            fc_w: mk("encoder.fc.w", &[flat, cfg.hidden_dim], flat, g),
            fc_b: mk("encoder.fc.b", &[cfg.hidden_dim], flat, g),
            out_w: {
                let mut rng = param_rng(seed, "encoder.out.w");
                let mut w = init_uniform(
                    &mut rng,
                    &[cfg.hidden_dim, cfg.num_classes],
                    cfg.hidden_dim,
                    r,
                );
                // Center each output neuron's weights so its initial mean
                // drive is zero; the bias below sets the operating point.
                for c in 0..cfg.num_classes {
                    let mean = (0..cfg.hidden_dim)
                        .map(|h| w[[h, c]])
                        .sum::<f64>()
                        / cfg.hidden_dim as f64;
                    for h in 0..cfg.hidden_dim {
                        w[[h, c]] -= mean;
                    }
                }
                ParamTensor::new("encoder.out.w", w)
            },
            out_b: ParamTensor::new(
                "encoder.out.b",
                Arr::from_elem(ndarray::IxDyn(&[cfg.num_classes]), cfg.readout_bias),
            ),
        })
    }

    /// Tensors that participate in gradient updates, in a stable order.
    /// The output head is last so heads can be excluded cheaply.
    pub fn tensors(&self) -> Vec<&ParamTensor> {
        vec![
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc_w,
            &self.fc_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    /// Create graph leaves aliasing the stored tensors. One binding per
    /// forward pass; after `backward`, each leaf holds the gradient for the
    /// tensor at the same position in [`EncoderParams::tensors`].
    pub fn bind(&self) -> EncoderBinding {
        EncoderBinding {
            cfg: self.cfg.clone(),
            conv1_w: self.conv1_w.value(),
            conv1_b: self.conv1_b.value(),
            conv2_w: self.conv2_w.value(),
            conv2_b: self.conv2_b.value(),
            fc_w: self.fc_w.value(),
            fc_b: self.fc_b.value(),
            out_w: self.out_w.value(),
            out_b: self.out_b.value(),
        }
    }
}

/// Graph leaves for one forward pass over the encoder's parameters.
pub struct EncoderBinding {
    pub cfg: EncoderConfig,
    pub conv1_w: Value,
    pub conv1_b: Value,
    pub conv2_w: Value,
    pub conv2_b: Value,
    pub fc_w: Value,
    pub fc_b: Value,
    pub out_w: Value,
    pub out_b: Value,
}

impl EncoderBinding {
    /// Leaves in the same order as [`EncoderParams::tensors`].
    pub fn values(&self) -> Vec<&Value> {
        vec![
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc_w,
            &self.fc_b,
            &self.out_w,
            &self.out_b,
        ]
    }
}

// ───────────────────────── forward pass ─────────────────────────

/// Per-layer spike totals for one forward pass.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpikes {
    pub layer: String,
    /// Total spikes over the whole batch and all timesteps.
    pub spikes: u64,
    /// Neurons in the layer (per sample, per timestep).
    pub neurons: usize,
}

/// Feature-stage outputs: per-timestep hidden spike tensors plus their
/// time average, which is the feature vector the memory modules consume.
pub struct FeatureOutput {
    /// `T` tensors of shape `(B, hidden)`.
    pub spikes_t: Vec<Value>,
    /// `(B, hidden)` mean over time.
    pub mean_features: Value,
    pub counts: Vec<LayerSpikes>,
    pub batch: usize,
}

/// Classifier-stage outputs past the feature layer.
pub struct OutputBlock {
    /// `T` tensors of shape `(B, classes)`.
    pub spikes_t: Vec<Value>,
    /// `(B, classes)` firing rates in `[0, 1]`.
    pub rates: Value,
    pub counts: Vec<LayerSpikes>,
}

/// Full forward result for the plain encoder.
pub struct EncoderForward {
    pub features: FeatureOutput,
    pub output: OutputBlock,
}

/// Fold a batch of `(T, C, H, W)` tensors into one `(T*B, C, H, W)` array,
/// timestep-major, so row `t*B + b` is sample `b` at step `t`.
pub fn fold_batch(batch: &[&SpikeTensor]) -> Result<Arr> {
    if batch.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (t, c, h, w) = batch[0].shape();
    for s in batch {
        if s.shape() != (t, c, h, w) {
            return Err(Error::ShapeMismatch {
                op: "fold_batch",
                lhs: vec![t, c, h, w],
                rhs: vec![s.shape().0, s.shape().1, s.shape().2, s.shape().3],
            });
        }
    }
    let b = batch.len();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[t * b, c, h, w]));
    for (bi, sample) in batch.iter().enumerate() {
        for ((ti, ci, yi, xi), &v) in sample.data().indexed_iter() {
            if v != 0 {
                out[[ti * b + bi, ci, yi, xi]] = 1.0;
            }
        }
    }
    Ok(out)
}

fn sum_spikes(spikes_t: &[Value]) -> u64 {
    let total: f64 = spikes_t.iter().map(|s| s.data().sum()).sum();
    total.round() as u64
}

/// Run a LIF layer over a time-folded drive `(T*B, ...)`, returning the
/// per-timestep spike tensors `(B, ...)`.
fn lif_over_time(drive: &Value, t_steps: usize, batch: usize, params: &LifParams) -> Result<Vec<Value>> {
    let mut state_shape = drive.shape().to_vec();
    state_shape[0] = batch;
    let mut membrane = Value::constant(Arr::zeros(IxDyn(&state_shape)));
    let mut spikes_t = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let input = drive.slice_rows(t * batch, (t + 1) * batch)?;
        let (next, spikes) = lif_step_graph(&membrane, &input, params)?;
        membrane = next;
        spikes_t.push(spikes);
    }
    Ok(spikes_t)
}

/// Dropout mask on the hidden pre-activation: one draw per (sample, unit),
/// tiled across time, with inverted scaling so the expected drive is
/// unchanged. Returns `None` when inactive.
fn dropout_mask(
    p: f64,
    t_steps: usize,
    batch: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Arr> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 - p;
    let per_sample = Array2::<f64>::from_shape_fn((batch, dim), |_| {
        if rng.random_bool(keep) {
            1.0 / keep
        } else {
            0.0
        }
    });
    let mut mask = Array2::<f64>::zeros((t_steps * batch, dim));
    for t in 0..t_steps {
        mask.slice_mut(ndarray::s![t * batch..(t + 1) * batch, ..])
            .assign(&per_sample);
    }
    Some(mask.into_dyn())
}

/// Feature stage: conv1 -> (pool) -> LIF -> conv2 -> (pool) -> LIF -> FC ->
/// LIF. `input` must be the fold of a batch (see [`fold_batch`]); `dropout`
/// supplies randomness when training with `dropout_p > 0`.
pub fn encoder_features(
    params: &EncoderBinding,
    input: &Arr,
    train: bool,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<FeatureOutput> {
    let cfg = &params.cfg;
    let expected = [
        cfg.timesteps, // leading dim must be T*B; checked below
        cfg.in_channels,
        cfg.input_hw,
        cfg.input_hw,
    ];
    if input.ndim() != 4
        || input.shape()[1] != expected[1]
        || input.shape()[2] != expected[2]
        || input.shape()[3] != expected[3]
        || input.shape()[0] % cfg.timesteps != 0
        || input.shape()[0] == 0
    {
        return Err(Error::ShapeMismatch {
            op: "encoder_features",
            lhs: input.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let batch = input.shape()[0] / cfg.timesteps;
    let x = Value::constant(input.clone());

    // Stage 1: conv -> (pool) -> LIF.
    let mut drive1 = autodiff::conv2d(&x, &params.conv1_w, &params.conv1_b, cfg.padding)?;
    if cfg.pool {
        drive1 = autodiff::avg_pool2(&drive1)?;
    }
    let spikes1 = lif_over_time(&drive1, cfg.timesteps, batch, &cfg.lif)?;
    let count1 = LayerSpikes {
        layer: "encoder.lif1".into(),
        spikes: sum_spikes(&spikes1),
        neurons: spikes1[0].data().len() / batch,
    };

    // Stage 2 drives from the spike trains of stage 1.
    let s1 = autodiff::concat_rows(&spikes1)?;
    let mut drive2 = autodiff::conv2d(&s1, &params.conv2_w, &params.conv2_b, cfg.padding)?;
    if cfg.pool {
        drive2 = autodiff::avg_pool2(&drive2)?;
    }
    let spikes2 = lif_over_time(&drive2, cfg.timesteps, batch, &cfg.lif)?;
    let count2 = LayerSpikes {
        layer: "encoder.lif2".into(),
        spikes: sum_spikes(&spikes2),
        neurons: spikes2[0].data().len() / batch,
    };

    // Hidden FC stage on flattened spikes.
    let s2 = autodiff::concat_rows(&spikes2)?;
    let flat = s2.reshape(&[cfg.timesteps * batch, cfg.flat_dim()])?;
    let mut drive3 = flat.matmul(&params.fc_w)?.add_bias(&params.fc_b)?;
    if train && cfg.dropout_p > 0.0 {
        let rng = dropout.ok_or_else(|| {
            Error::InvalidParam("training forward with dropout needs an RNG".into())
        })?;
        if let Some(mask) = dropout_mask(cfg.dropout_p, cfg.timesteps, batch, cfg.hidden_dim, rng) {
            drive3 = drive3.mul(&Value::constant(mask))?;
        }
    }
    let spikes3 = lif_over_time(&drive3, cfg.timesteps, batch, &cfg.lif)?;
    let count3 = LayerSpikes {
        layer: "encoder.lif3".into(),
        spikes: sum_spikes(&spikes3),
        neurons: cfg.hidden_dim,
    };

    // Mean over time of the hidden spikes: the feature vector.
    let mut acc = spikes3[0].clone();
    for s in &spikes3[1..] {
        acc = acc.add(s)?;
    }
    let mean_features = acc.scale(1.0 / cfg.timesteps as f64);

    Ok(FeatureOutput {
        spikes_t: spikes3,
        mean_features,
        counts: vec![count1, count2, count3],
        batch,
    })
}

/// Classifier stage: FC to class space, output LIF, then firing rates.
/// `feature_spikes_t` may be the raw hidden spikes or a memory-transformed
/// version of them; each entry is `(B, hidden)`.
pub fn encoder_output(params: &EncoderBinding, feature_spikes_t: &[Value]) -> Result<OutputBlock> {
    if feature_spikes_t.is_empty() {
        return Err(Error::EmptySequence);
    }
    let cfg = &params.cfg;
    let batch = feature_spikes_t[0].shape()[0];
    let folded = autodiff::concat_rows(feature_spikes_t)?;
    let drive = folded.matmul(&params.out_w)?.add_bias(&params.out_b)?;
    let spikes_t = lif_over_time(&drive, feature_spikes_t.len(), batch, &cfg.lif)?;
    let counts = vec![LayerSpikes {
        layer: "encoder.lif_out".into(),
        spikes: sum_spikes(&spikes_t),
        neurons: cfg.num_classes,
    }];
    let mut acc = spikes_t[0].clone();
    for s in &spikes_t[1..] {
        acc = acc.add(s)?;
    }
    let rates = acc.scale(1.0 / spikes_t.len() as f64);
    Ok(OutputBlock {
        spikes_t,
        rates,
        counts,
    })
}

/// Full encoder: features then classifier rates.
pub fn encoder_forward(
    params: &EncoderBinding,
    input: &Arr,
    train: bool,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<EncoderForward> {
    let features = encoder_features(params, input, train, dropout)?;
    let output = encoder_output(params, &features.spikes_t)?;
    Ok(EncoderForward { features, output })
}

// ───────────────────────── tests ─────────────────────────
