//! Model assembly: the spiking encoder plus optional associative cleanup
//! and gated recurrence, wired into the five ablation variants.
//!
//! * `M1` - encoder trained with rate cross-entropy only.
//! * `M2` - adds the supervised contrastive term on the mean features.
//! * `M3` - `M2` plus associative cleanup of each timestep's features.
//! * `M4` - `M2` plus a gated recurrent readout over the feature sequence
//!   (the encoder's own readout layer is bypassed).
//! * `M5` - both memories in series: cleanup feeding the recurrent readout.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_cross_entropy, Arr, Value};
use crate::data::SpikeTensor;
use crate::energy::{LayerActivity, LayerKind};
use crate::error::{Error, Result};
use crate::hgrn::{hgrn_sequence_graph, hgrn_step_graph, GateBinding, GateParams, GraphGateState};
use crate::hopfield::{hopfield_layer_graph, HopfieldMemory};
use crate::scl::{ce_loss_graph, scl_loss_graph, total_loss_graph, Reduction};
use crate::snn::{
    encoder_features, encoder_output, fold_batch, init_uniform, lif_step_graph, param_rng,
    EncoderBinding, EncoderConfig, EncoderParams, LayerSpikes, ParamTensor,
};

// ───────────────────────── model identifiers ─────────────────────────

/// The five ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ModelId {
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl ModelId {
    pub const ALL: [ModelId; 5] = [ModelId::M1, ModelId::M2, ModelId::M3, ModelId::M4, ModelId::M5];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::M1 => "M1",
            ModelId::M2 => "M2",
            ModelId::M3 => "M3",
            ModelId::M4 => "M4",
            ModelId::M5 => "M5",
        }
    }

    /// Short label for tables and logs.
    pub fn description(self) -> &'static str {
        match self {
            ModelId::M1 => "encoder + cross-entropy",
            ModelId::M2 => "encoder + contrastive",
            ModelId::M3 => "M2 + associative cleanup",
            ModelId::M4 => "M2 + gated recurrence",
            ModelId::M5 => "M2 + both memories",
        }
    }

    /// The contrastive term applies to every variant past the baseline.
    pub fn uses_scl(self) -> bool {
        !matches!(self, ModelId::M1)
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, ModelId::M3 | ModelId::M5)
    }

    pub fn uses_gate(self) -> bool {
        matches!(self, ModelId::M4 | ModelId::M5)
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(ModelId::M1),
            "M2" => Ok(ModelId::M2),
            "M3" => Ok(ModelId::M3),
            "M4" => Ok(ModelId::M4),
            "M5" => Ok(ModelId::M5),
            _ => Err(Error::UnknownModel(format!(
                "{s} (valid ids: M1, M2, M3, M4, M5)"
            ))),
        }
    }
}

// ───────────────────────── configuration ─────────────────────────

/// Architecture knobs shared by every variant. The gate width only matters
/// for `M4`/`M5`; the flag switches their readout from a plain softmax on
/// the final hidden state to a spiking readout driven per timestep.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hgrn_hidden: usize,
    pub spiking_head: bool,
}

impl ModelConfig {
    pub fn full(num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::full(num_classes),
            hgrn_hidden: 512,
            spiking_head: false,
        }
    }

    pub fn full_pooled(num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::full_pooled(num_classes),
            hgrn_hidden: 512,
            spiking_head: false,
        }
    }

    pub fn desk(num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::desk(num_classes),
            hgrn_hidden: 128,
            spiking_head: false,
        }
    }

    pub fn tiny(num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::tiny(num_classes),
            hgrn_hidden: 8,
            spiking_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.hgrn_hidden == 0 {
            return Err(Error::InvalidParam("hgrn_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Loss weighting. `mean_reduction` averages the cross-entropy over the
/// batch and the contrastive term over its anchors; otherwise both sum.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossHyper {
    pub lambda: f64,
    pub tau: f64,
    pub mean_reduction: bool,
}

impl Default for LossHyper {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            tau: 0.07,
            mean_reduction: true,
        }
    }
}

// ───────────────────────── the model ─────────────────────────

/// One ablation variant: encoder parameters plus whichever memory modules
/// the variant enables. Parameters are seeded per tensor name, so two
/// variants built from the same seed share identical weights for every
/// module they have in common.
#[derive(Debug)]
pub struct Model {
    pub id: ModelId,
    pub seed: u64,
    pub cfg: ModelConfig,
    pub encoder: EncoderParams,
    pub gate: Option<GateParams>,
    pub head_w: Option<ParamTensor>,
    pub head_b: Option<ParamTensor>,
    pub memory: Option<HopfieldMemory>,
}

impl Model {
    pub fn build(id: ModelId, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = EncoderParams::init(&cfg.encoder, seed)?;
        let (gate, head_w, head_b) = if id.uses_gate() {
            let gate = GateParams::init(cfg.encoder.hidden_dim, cfg.hgrn_hidden, seed)?;
            let classes = cfg.encoder.num_classes;
            let mut rng_w = param_rng(seed, "head.w");
            let w = init_uniform(&mut rng_w, &[cfg.hgrn_hidden, classes], cfg.hgrn_hidden, 1.0);
            let mut rng_b = param_rng(seed, "head.b");
            let b = init_uniform(&mut rng_b, &[classes], cfg.hgrn_hidden, 1.0);
            (
                Some(gate),
                Some(ParamTensor::new("head.w", w)),
                Some(ParamTensor::new("head.b", b)),
            )
        } else {
            (None, None, None)
        };
        let memory = if id.uses_memory() {
            Some(HopfieldMemory::new(cfg.encoder.hidden_dim))
        } else {
            None
        };
        Ok(Self {
            id,
            seed,
            cfg: cfg.clone(),
            encoder,
            gate,
            head_w,
            head_b,
            memory,
        })
    }

    /// Tensors the optimizer updates. Recurrent variants bypass the
    /// encoder's readout layer, so its two tensors are excluded there.
    pub fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v = self.encoder.tensors();
        if self.id.uses_gate() {
            v.truncate(6);
        }
        if let Some(g) = &self.gate {
            v.extend(g.tensors());
        }
        if let Some(w) = &self.head_w {
            v.push(w);
        }
        if let Some(b) = &self.head_b {
            v.push(b);
        }
        v
    }

    /// Mutable view in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.encoder.tensors_mut();
        if self.id.uses_gate() {
            v.truncate(6);
        }
        if let Some(g) = &mut self.gate {
            v.extend(g.tensors_mut());
        }
        if let Some(w) = &mut self.head_w {
            v.push(w);
        }
        if let Some(b) = &mut self.head_b {
            v.push(b);
        }
        v
    }

    /// Every stored tensor, including the encoder readout a recurrent
    /// variant does not train; checkpoints persist all of them.
    pub fn all_tensors(&self) -> Vec<&ParamTensor> {
        let mut v = self.encoder.tensors();
        if let Some(g) = &self.gate {
            v.extend(g.tensors());
        }
        if let Some(w) = &self.head_w {
            v.push(w);
        }
        if let Some(b) = &self.head_b {
            v.push(b);
        }
        v
    }

    /// Mutable view of [`all_tensors`](Self::all_tensors), in the same order.
    pub fn all_tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.encoder.tensors_mut();
        if let Some(g) = &mut self.gate {
            v.extend(g.tensors_mut());
        }
        if let Some(w) = &mut self.head_w {
            v.push(w);
        }
        if let Some(b) = &mut self.head_b {
            v.push(b);
        }
        v
    }

    pub fn trainable_param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All stored numbers: every tensor plus the memory's weight matrix and
    /// pattern store when present.
    pub fn total_param_count(&self) -> usize {
        let base: usize = self.all_tensors().iter().map(|t| t.len()).sum();
        let mem = self
            .memory
            .as_ref()
            .map_or(0, |m| m.dim() * m.dim() + m.len() * m.dim());
        base + mem
    }

    pub fn bind(&self) -> ModelBinding {
        ModelBinding {
            encoder: self.encoder.bind(),
            gate: self.gate.as_ref().map(GateParams::bind),
            head: self
                .head_w
                .as_ref()
                .zip(self.head_b.as_ref())
                .map(|(w, b)| (w.value(), b.value())),
            trains_readout: !self.id.uses_gate(),
        }
    }

    /// Rebuild the memory's patterns from per-class feature prototypes.
    /// Returns how many patterns were stored; a no-op for variants without
    /// the memory module.
    pub fn refresh_prototypes(&mut self, features: &Array2<f64>, labels: &[usize]) -> Result<usize> {
        let classes = self.cfg.encoder.num_classes;
        match &mut self.memory {
            Some(mem) => mem.refresh_from_prototypes(features, labels, classes),
            None => Ok(0),
        }
    }

    /// Synaptic fan-out of a spiking layer, for energy accounting. The
    /// feature layer feeds either the readout or all three gate blocks.
    pub fn fan_out(&self, layer: &str) -> usize {
        let cfg = &self.cfg.encoder;
        match layer {
            "encoder.lif1" => cfg.kernel * cfg.kernel * cfg.conv2_out,
            "encoder.lif2" => cfg.hidden_dim,
            "encoder.lif3" => {
                if self.id.uses_gate() {
                    3 * self.cfg.hgrn_hidden
                } else {
                    cfg.num_classes
                }
            }
            _ => 0,
        }
    }

    /// Turn accumulated spike counts into the profiler's activity rows.
    pub fn layer_activities(&self, counts: &[LayerSpikes], _samples: usize) -> Vec<LayerActivity> {
        counts
            .iter()
            .map(|c| LayerActivity {
                layer: c.layer.clone(),
                spike_count: c.spikes,
                fan_out: self.fan_out(&c.layer),
                neuron_count: c.neurons,
                timestep_count: self.cfg.encoder.timesteps,
            })
            .collect()
    }

    /// The dense single-pass network doing the same transformations, used
    /// as the MAC-count baseline. Pooling shrinks later layers but not the
    /// convolution that precedes it.
    pub fn ann_architecture(&self) -> Vec<LayerKind> {
        let cfg = &self.cfg.encoder;
        let conv1_hw = cfg.input_hw + 2 * cfg.padding - cfg.kernel + 1;
        let (h1, _) = cfg.stage_hw();
        let conv2_hw = h1 + 2 * cfg.padding - cfg.kernel + 1;
        let mut layers = vec![
            LayerKind::Conv {
                out_h: conv1_hw,
                out_w: conv1_hw,
                out_c: cfg.conv1_out,
                in_c: cfg.in_channels,
                kernel: cfg.kernel,
            },
            LayerKind::Conv {
                out_h: conv2_hw,
                out_w: conv2_hw,
                out_c: cfg.conv2_out,
                in_c: cfg.conv1_out,
                kernel: cfg.kernel,
            },
            LayerKind::Fc {
                inputs: cfg.flat_dim(),
                outputs: cfg.hidden_dim,
            },
        ];
        if self.id.uses_gate() {
            let h = self.cfg.hgrn_hidden;
            let joint = cfg.hidden_dim + h;
            layers.push(LayerKind::Fc { inputs: joint, outputs: h });
            layers.push(LayerKind::Fc { inputs: joint, outputs: h });
            layers.push(LayerKind::Fc { inputs: cfg.hidden_dim, outputs: h });
            layers.push(LayerKind::Fc { inputs: h, outputs: cfg.num_classes });
        } else {
            layers.push(LayerKind::Fc {
                inputs: cfg.hidden_dim,
                outputs: cfg.num_classes,
            });
        }
        layers
    }

    /// Timestep count for the gate-overhead line of the energy report.
    pub fn gate_timesteps(&self) -> Option<usize> {
        self.id.uses_gate().then_some(self.cfg.encoder.timesteps)
    }

    /// Run one batch. `train` enables dropout (when `dropout` supplies the
    /// randomness); the contrastive term needs at least two samples and
    /// contributes zero below that.
    pub fn forward(
        &self,
        batch: &[&SpikeTensor],
        labels: &[usize],
        train: bool,
        dropout: Option<&mut ChaCha8Rng>,
        hp: &LossHyper,
    ) -> Result<BatchOutput> {
        if batch.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: vec![batch.len()],
                rhs: vec![labels.len()],
            });
        }
        let classes = self.cfg.encoder.num_classes;
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidParam(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }

        let binding = self.bind();
        let folded = fold_batch(batch)?;
        let feats = encoder_features(&binding.encoder, &folded, train, dropout)?;
        let mut counts = feats.counts.clone();
        let mean_features = to_array2(feats.mean_features.data());

        // Associative cleanup of each timestep's feature spikes. An empty
        // memory passes them through unchanged (flagged as identity).
        let (head_inputs, memory_identity) = match &self.memory {
            Some(mem) => {
                let mut cleaned = Vec::with_capacity(feats.spikes_t.len());
                let mut identity = true;
                for s in &feats.spikes_t {
                    let (v, used_identity) = hopfield_layer_graph(mem, s)?;
                    identity &= used_identity;
                    cleaned.push(v);
                }
                (cleaned, Some(identity))
            }
            None => (feats.spikes_t.clone(), None),
        };

        let (ce, scores) = if self.id.uses_gate() {
            let gate = binding.gate.as_ref().expect("recurrent variant has gate params");
            let (head_w, head_b) = binding.head.as_ref().expect("recurrent variant has a head");
            if self.cfg.spiking_head {
                // Drive one spiking readout layer from each step's hidden
                // state and classify on firing rates.
                let mut state = GraphGateState::rest(gate.hidden_dim, feats.batch);
                let mut membrane = Value::constant(Arr::zeros(IxDyn(&[feats.batch, classes])));
                let mut spikes_t = Vec::with_capacity(head_inputs.len());
                for x in &head_inputs {
                    state = hgrn_step_graph(gate, &state, x)?;
                    let drive = state.h.matmul(head_w)?.add_bias(head_b)?;
                    let (next, spikes) = lif_step_graph(&membrane, &drive, &self.cfg.encoder.lif)?;
                    membrane = next;
                    spikes_t.push(spikes);
                }
                let total: f64 = spikes_t.iter().map(|s| s.data().sum()).sum();
                counts.push(LayerSpikes {
                    layer: "head.lif_out".into(),
                    spikes: total.round() as u64,
                    neurons: classes,
                });
                let mut summed = spikes_t[0].clone();
                for s in &spikes_t[1..] {
                    summed = summed.add(s)?;
                }
                let rates = summed.scale(1.0 / spikes_t.len() as f64);
                let ce = ce_loss_graph(&rates, labels, hp.mean_reduction)?;
                (ce, to_array2(rates.data()))
            } else {
                let state = hgrn_sequence_graph(gate, &head_inputs)?;
                let logits = state.h.matmul(head_w)?.add_bias(head_b)?;
                let ce = softmax_cross_entropy(&logits, labels, hp.mean_reduction)?;
                (ce, to_array2(logits.data()))
            }
        } else {
            let out = encoder_output(&binding.encoder, &head_inputs)?;
            counts.extend(out.counts.clone());
            let ce = ce_loss_graph(&out.rates, labels, hp.mean_reduction)?;
            (ce, to_array2(out.rates.data()))
        };

        // Contrastive term on the pre-cleanup mean features. The baseline
        // skips the whole graph, so its loss IS the cross-entropy node.
        let (loss, scl_value) = if self.id.uses_scl() && hp.lambda > 0.0 && batch.len() >= 2 {
            let reduction = if hp.mean_reduction {
                Reduction::MeanAnchors
            } else {
                Reduction::Sum
            };
            let scl = scl_loss_graph(&feats.mean_features, labels, hp.tau, reduction)?;
            let value = scl.loss.item();
            (total_loss_graph(&ce, &scl.loss, hp.lambda)?, value)
        } else {
            (ce.clone(), 0.0)
        };

        let ce_value = ce.item();
        let loss_value = loss.item();
        let predictions = argmax_rows(&scores);
        Ok(BatchOutput {
            loss,
            loss_value,
            ce_value,
            scl_value,
            scores,
            predictions,
            mean_features,
            counts,
            memory_identity,
            binding,
        })
    }
}

/// Graph leaves for one forward pass over every module's parameters.
pub struct ModelBinding {
    pub encoder: EncoderBinding,
    pub gate: Option<GateBinding>,
    pub head: Option<(Value, Value)>,
    trains_readout: bool,
}

impl ModelBinding {
    /// Leaves in the same order as [`Model::tensors`], for gradient reads.
    pub fn values(&self) -> Vec<&Value> {
        let mut v = self.encoder.values();
        if !self.trains_readout {
            v.truncate(6);
        }
        if let Some(g) = &self.gate {
            v.extend(g.values());
        }
        if let Some((w, b)) = &self.head {
            v.push(w);
            v.push(b);
        }
        v
    }
}

/// Everything one batch produces: the loss node (for backward), its pieces,
/// scores, and bookkeeping for accuracy, clustering, and energy accounting.
pub struct BatchOutput {
    pub loss: Value,
    pub loss_value: f64,
    pub ce_value: f64,
    pub scl_value: f64,
    /// `(B, classes)` firing rates or logits, depending on the head.
    pub scores: Array2<f64>,
    pub predictions: Vec<usize>,
    /// `(B, hidden)` pre-cleanup mean features.
    pub mean_features: Array2<f64>,
    pub counts: Vec<LayerSpikes>,
    /// Whether the cleanup layer was an identity (empty memory); `None`
    /// when the variant has no memory module.
    pub memory_identity: Option<bool>,
    pub binding: ModelBinding,
}

fn to_array2(a: &Arr) -> Array2<f64> {
    a.clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-D tensor")
}

fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

// ───────────────────────── tests ─────────────────────────
