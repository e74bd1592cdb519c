//! SynOps-based energy accounting with an ANN MAC-equivalent comparison.
//!
//! Each spike that reaches a synapse triggers one accumulate, so a layer's
//! synaptic operation count is `spikes × fan_out` and its energy is
//! `SynOps × e_synop` (0.9 pJ per op by default). The dense baseline is
//! `MACs × e_mac` (4.6 pJ per MAC). Sparsity is the fraction of
//! neuron-timesteps that stayed silent.
//!
//! Recurrent gate arithmetic is not spike-driven; it is reported as its own
//! line item at `e_mac` — one gate operation per timestep per inference —
//! and asserted to be a negligible share rather than silently dropped.
//!
//! Published layer-wise tables for this architecture mix scales that cannot
//! all be reconciled (and the conv1 MAC figure of 288M does not follow from
//! the standard `oH·oW·oC·iC·k²` formula, which gives 1,331,712 per step).
//! The profiler therefore anchors on the internally consistent
//! `SynOps × 0.9 pJ` arithmetic: golden-mode evaluation feeds the published
//! aggregate SynOps straight into [`energy_total_uj`], and [`mac_count`]
//! documents the standard formula it actually computes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Published aggregate SynOps (millions) for the four measured models.
pub const PUBLISHED_SYNOPS: [(&str, u64); 4] = [
    ("M1", 5_247_000),
    ("M2", 6_438_000),
    ("M3", 7_004_000),
    ("M4", 3_503_000),
];

/// Published dense-baseline MAC count for the same workload.
pub const PUBLISHED_ANN_MACS: u64 = 413_840_000;

/// Energy cost constants, in picojoules per operation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EnergyModel {
    pub e_synop_pj: f64,
    pub e_mac_pj: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_synop_pj: 0.9,
            e_mac_pj: 4.6,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        if self.e_synop_pj <= 0.0 || self.e_mac_pj <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "energy constants must be positive: e_synop {} pJ, e_mac {} pJ",
                self.e_synop_pj, self.e_mac_pj
            )));
        }
        Ok(())
    }
}

const PJ_TO_UJ: f64 = 1e-6;

/// Observed spiking of one layer over an evaluated set of samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerActivity {
    pub layer: String,
    /// Total spikes over all neurons, timesteps and samples.
    pub spike_count: u64,
    /// Synapses each spiking neuron drives in the next layer.
    pub fan_out: usize,
    pub neuron_count: usize,
    pub timestep_count: usize,
}

/// Synaptic operations triggered by a layer: `spikes × fan_out`.
pub fn synops(activity: &LayerActivity) -> u64 {
    activity.spike_count * activity.fan_out as u64
}

/// Total spiking energy in microjoules: `Σ synops × e_synop`.
pub fn energy_total_uj(synops_per_layer: &[u64], model: &EnergyModel) -> f64 {
    synops_per_layer
        .iter()
        .map(|&s| s as f64 * model.e_synop_pj * PJ_TO_UJ)
        .sum()
}

/// Dense-network baseline energy in microjoules: `macs × e_mac`.
pub fn ann_energy_uj(mac_count: u64, model: &EnergyModel) -> f64 {
    mac_count as f64 * model.e_mac_pj * PJ_TO_UJ
}

/// Percentage of silent neuron-timesteps across all layers:
/// `100 × (1 − spikes / (neurons × timesteps × samples))`.
pub fn sparsity_percent(activities: &[LayerActivity], samples: usize) -> f64 {
    let spikes: u64 = activities.iter().map(|a| a.spike_count).sum();
    let capacity: u64 = activities
        .iter()
        .map(|a| (a.neuron_count * a.timestep_count * samples) as u64)
        .sum();
    if capacity == 0 {
        return 100.0;
    }
    100.0 * (1.0 - spikes as f64 / capacity as f64)
}

/// One layer of a dense architecture, for the MAC baseline.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum LayerKind {
    Conv {
        out_h: usize,
        out_w: usize,
        out_c: usize,
        in_c: usize,
        kernel: usize,
    },
    Fc {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerKind {
    pub fn macs(&self) -> u64 {
        match *self {
            LayerKind::Conv {
                out_h,
                out_w,
                out_c,
                in_c,
                kernel,
            } => (out_h * out_w * out_c * in_c * kernel * kernel) as u64,
            LayerKind::Fc { inputs, outputs } => (inputs * outputs) as u64,
        }
    }
}

/// MACs for one dense forward pass: `oH·oW·oC·iC·k²` per conv layer,
/// `in·out` per fully connected layer.
pub fn mac_count(architecture: &[LayerKind]) -> u64 {
    architecture.iter().map(LayerKind::macs).sum()
}

/// One row of the layer-wise breakdown.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerEnergyRow {
    pub layer: String,
    pub spikes: u64,
    pub synops: u64,
    pub microjoules: f64,
    pub percent: f64,
}

/// Recurrent-gate overhead, kept visible as its own entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateOverhead {
    pub ops: u64,
    pub microjoules: f64,
    pub percent_of_total: f64,
}

/// Complete energy analysis of one evaluated set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyReport {
    pub rows: Vec<LayerEnergyRow>,
    pub total_uj: f64,
    pub per_inference_uj: f64,
    pub sparsity_percent: f64,
    pub samples: usize,
    pub ann_macs: u64,
    pub ann_uj: f64,
    /// `ann_uj / total_uj`; absent when nothing spiked.
    pub reduction_factor: Option<f64>,
    pub gate_overhead: Option<GateOverhead>,
}

/// Aggregate layer activities into a full report.
///
/// `gate_timesteps` adds the recurrent-gate line item (one op per timestep
/// per sample at `e_mac`). Percentage shares are taken over the grand total
/// including that line, so rows always sum to 100% when anything ran.
pub fn profile(
    activities: &[LayerActivity],
    samples: usize,
    ann_macs: u64,
    model: &EnergyModel,
    gate_timesteps: Option<usize>,
) -> Result<EnergyReport> {
    model.validate()?;
    if samples == 0 {
        return Err(Error::InvalidParam("profile needs at least one sample".into()));
    }
    for a in activities {
        let capacity = (a.neuron_count * a.timestep_count * samples) as u64;
        if a.spike_count > capacity {
            return Err(Error::InvalidParam(format!(
                "layer {}: {} spikes exceed capacity {capacity}",
                a.layer, a.spike_count
            )));
        }
    }

    let gate = gate_timesteps.map(|t| {
        let ops = (t * samples) as u64;
        (ops, ops as f64 * model.e_mac_pj * PJ_TO_UJ)
    });

    let mut rows: Vec<LayerEnergyRow> = activities
        .iter()
        .map(|a| {
            let ops = synops(a);
            LayerEnergyRow {
                layer: a.layer.clone(),
                spikes: a.spike_count,
                synops: ops,
                microjoules: ops as f64 * model.e_synop_pj * PJ_TO_UJ,
                percent: 0.0,
            }
        })
        .collect();
    if let Some((_, uj)) = gate {
        rows.push(LayerEnergyRow {
            layer: "hgrn.gates".into(),
            spikes: 0,
            synops: 0,
            microjoules: uj,
            percent: 0.0,
        });
    }

    let total_uj: f64 = rows.iter().map(|r| r.microjoules).sum();
    for r in &mut rows {
        r.percent = if total_uj > 0.0 {
            100.0 * r.microjoules / total_uj
        } else {
            0.0
        };
    }

    let ann_uj = ann_energy_uj(ann_macs, model);
    let gate_overhead = gate.map(|(ops, uj)| GateOverhead {
        ops,
        microjoules: uj,
        percent_of_total: if total_uj > 0.0 { 100.0 * uj / total_uj } else { 0.0 },
    });

    Ok(EnergyReport {
        per_inference_uj: total_uj / samples as f64,
        sparsity_percent: sparsity_percent(activities, samples),
        samples,
        ann_macs,
        ann_uj,
        reduction_factor: (total_uj > 0.0).then(|| ann_uj / total_uj),
        gate_overhead,
        total_uj,
        rows,
    })
}

/// One golden-mode row: published SynOps pushed through the cost model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GoldenRow {
    pub model_id: String,
    pub synops: u64,
    pub total_uj: f64,
    pub reduction: f64,
}

/// Evaluate the cost model on the published aggregate SynOps figures.
/// Correctness here is what validates the arithmetic end to end.
pub fn golden_table(model: &EnergyModel) -> Result<(Vec<GoldenRow>, f64)> {
    model.validate()?;
    let ann_uj = ann_energy_uj(PUBLISHED_ANN_MACS, model);
    let rows = PUBLISHED_SYNOPS
        .iter()
        .map(|&(id, ops)| {
            let total_uj = energy_total_uj(&[ops], model);
            GoldenRow {
                model_id: id.to_string(),
                synops: ops,
                total_uj,
                reduction: ann_uj / total_uj,
            }
        })
        .collect();
    Ok((rows, ann_uj))
}

/// Write the layer table as CSV (`layer,spikes,synops,microjoules,percent`)
/// with a trailing TOTAL row. Floats use the shortest round-trippable form.
pub fn write_energy_csv<W: Write>(writer: W, report: &EnergyReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["layer", "spikes", "synops", "microjoules", "percent"])?;
    for r in &report.rows {
        w.write_record([
            r.layer.clone(),
            r.spikes.to_string(),
            r.synops.to_string(),
            r.microjoules.to_string(),
            r.percent.to_string(),
        ])?;
    }
    let spikes: u64 = report.rows.iter().map(|r| r.spikes).sum();
    let ops: u64 = report.rows.iter().map(|r| r.synops).sum();
    let percent: f64 = report.rows.iter().map(|r| r.percent).sum();
    w.write_record([
        "TOTAL".to_string(),
        spikes.to_string(),
        ops.to_string(),
        report.total_uj.to_string(),
        percent.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

// ───────────────────────── tests ─────────────────────────
