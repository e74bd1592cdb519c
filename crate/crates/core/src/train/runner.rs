//! The training loop: deterministic data order, augmentation, gradient
//! clipping, cosine-annealed Adam, prototype refresh for the memory
//! variants, best-epoch snapshots, and the end-of-run metrics bundle
//! (test accuracy, silhouette, energy profile).
//!
//! Every random draw comes from a stream derived from the run seed and a
//! purpose string, so two runs with the same configuration produce
//! bit-identical trajectories.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, Arr};
use crate::cluster::silhouette_report;
use crate::data::{
    augment_tensor, dataset_root_from_env, derive_seed, load_event_dataset, synthetic_set,
    AugmentSpec, LabeledSample, SpikeTensor, Split, SynthSpec, DATASET_ENV,
};
use crate::energy::{mac_count, profile, EnergyModel, EnergyReport};
use crate::error::{Error, Result};
use crate::hopfield::HopfieldMemory;
use crate::snn::LayerSpikes;
use crate::train::checkpoint::save_checkpoint;
use crate::train::model::{LossHyper, Model, ModelConfig, ModelId};
use crate::train::optim::{clip_gradients, cosine_lr, early_stop, Adam, AdamParams};

// ───────────────────────── configuration ─────────────────────────

/// Where the samples come from.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSel {
    /// Deterministic synthetic event streams, split sequentially (labels
    /// are assigned round-robin, so each split stays class-balanced when
    /// its size divides by the class count).
    Synthetic {
        train: usize,
        val: usize,
        test: usize,
        spec: SynthSpec,
    },
    /// Event recordings on disk (`<root>/Train|Test/<digit>/*.bin`). The
    /// validation set takes every k-th training sample, `k ~ 1/val_fraction`.
    Events {
        root: Option<PathBuf>,
        limit_per_class: Option<usize>,
        val_fraction: f64,
    },
}

/// Full description of one run. Serializable so a config file can carry it
/// and the run record can embed it.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model_id: ModelId,
    pub arch: ModelConfig,
    pub dataset: DatasetSel,
    /// Epoch budget; also the cosine period.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub patience: usize,
    pub lambda: f64,
    pub tau: f64,
    pub mean_reduction: bool,
    pub augment: bool,
    pub max_shift_px: i32,
    pub max_jitter_bins: i32,
    pub seed: u64,
    /// Stop as soon as validation accuracy reaches this value.
    pub early_stop_target: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::synthetic_desk(ModelId::M1)
    }
}

impl TrainConfig {
    /// Workstation-scale synthetic run: 500/200/200 samples on the desk
    /// architecture with the standard hyperparameters.
    pub fn synthetic_desk(model_id: ModelId) -> Self {
        Self {
            model_id,
            arch: ModelConfig::desk(4),
            dataset: DatasetSel::Synthetic {
                train: 500,
                val: 200,
                test: 200,
                spec: SynthSpec::default(),
            },
            epochs: 20,
            batch_size: 32,
            lr_max: 1e-3,
            lr_min: 0.0,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            patience: 5,
            lambda: 0.1,
            tau: 0.07,
            mean_reduction: true,
            augment: true,
            max_shift_px: 2,
            max_jitter_bins: 2,
            seed: 42,
            early_stop_target: None,
        }
    }

    /// Smallest functional run; used by the quick ablation and the tests.
    pub fn quick(model_id: ModelId) -> Self {
        Self {
            arch: ModelConfig::tiny(4),
            dataset: DatasetSel::Synthetic {
                train: 96,
                val: 32,
                test: 32,
                spec: SynthSpec {
                    num_classes: 4,
                    t_steps: 4,
                    hw: 8,
                    noise_density: 0.02,
                    motif: true,
                },
            },
            epochs: 3,
            batch_size: 16,
            augment: false,
            ..Self::synthetic_desk(model_id)
        }
    }

    /// Full-scale event-data run (pooled architecture, ten classes).
    pub fn events_full(model_id: ModelId) -> Self {
        Self {
            arch: ModelConfig::full_pooled(10),
            dataset: DatasetSel::Events {
                root: None,
                limit_per_class: None,
                val_fraction: 0.1,
            },
            epochs: 30,
            batch_size: 64,
            ..Self::synthetic_desk(model_id)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParam(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr_max.is_finite() && self.lr_min.is_finite())
            || self.lr_max < self.lr_min
            || self.lr_min < 0.0
        {
            return Err(Error::InvalidParam(format!(
                "need lr_max >= lr_min >= 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        if !(self.clip_norm > 0.0) || !(self.tau > 0.0) || self.lambda < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidParam(
                "clip_norm and tau must be positive; lambda and weight_decay non-negative".into(),
            ));
        }
        if self.max_shift_px < 0 || self.max_jitter_bins < 0 {
            return Err(Error::InvalidParam(
                "augmentation magnitudes must be non-negative".into(),
            ));
        }
        let enc = &self.arch.encoder;
        match &self.dataset {
            DatasetSel::Synthetic { train, val, test, spec } => {
                if *train == 0 || *val == 0 || *test == 0 {
                    return Err(Error::InvalidParam(
                        "every synthetic split needs at least one sample".into(),
                    ));
                }
                if spec.num_classes != enc.num_classes
                    || spec.hw != enc.input_hw
                    || spec.t_steps != enc.timesteps
                {
                    return Err(Error::InvalidParam(format!(
                        "synthetic spec ({} classes, {}x{}, {} steps) does not match the \
                         encoder ({} classes, {}x{}, {} steps)",
                        spec.num_classes,
                        spec.hw,
                        spec.hw,
                        spec.t_steps,
                        enc.num_classes,
                        enc.input_hw,
                        enc.input_hw,
                        enc.timesteps
                    )));
                }
            }
            DatasetSel::Events { val_fraction, .. } => {
                if !(*val_fraction > 0.0 && *val_fraction <= 0.5) {
                    return Err(Error::InvalidParam(format!(
                        "val_fraction must lie in (0, 0.5], got {val_fraction}"
                    )));
                }
                if enc.in_channels != crate::data::CHANNELS || enc.input_hw != crate::data::SENSOR_HW {
                    return Err(Error::InvalidParam(
                        "event data needs a 2-channel 34x34 encoder".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

// ───────────────────────── data loading ─────────────────────────

#[derive(Debug)]
pub struct Datasets {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

pub fn load_datasets(cfg: &TrainConfig) -> Result<Datasets> {
    match &cfg.dataset {
        DatasetSel::Synthetic { train, val, test, spec } => {
            let all = synthetic_set(train + val + test, derive_seed(cfg.seed, "dataset", 0), spec)?;
            let mut it = all.into_iter();
            let train_set: Vec<_> = it.by_ref().take(*train).collect();
            let val_set: Vec<_> = it.by_ref().take(*val).collect();
            Ok(Datasets {
                train: train_set,
                val: val_set,
                test: it.collect(),
            })
        }
        DatasetSel::Events {
            root,
            limit_per_class,
            val_fraction,
        } => {
            let root = root
                .clone()
                .or_else(dataset_root_from_env)
                .ok_or_else(|| Error::DatasetMissing {
                    path: PathBuf::from("<unset>"),
                    hint: format!("set {DATASET_ENV} or pass the dataset root"),
                })?;
            let t = cfg.arch.encoder.timesteps;
            let full_train = load_event_dataset(&root, Split::Train, t, *limit_per_class)?;
            let test = load_event_dataset(&root, Split::Test, t, *limit_per_class)?;
            let k = ((1.0 / val_fraction).round() as usize).max(2);
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (i, s) in full_train.into_iter().enumerate() {
                if i % k == 0 {
                    val.push(s);
                } else {
                    train.push(s);
                }
            }
            Ok(Datasets { train, val, test })
        }
    }
}

// ───────────────────────── evaluation ─────────────────────────

/// Aggregate results of a no-gradient pass over a sample set.
pub struct EvalStats {
    pub accuracy: f64,
    /// Mean loss per sample.
    pub loss: f64,
    pub samples: usize,
    /// `(N, hidden)` pre-cleanup mean features, for clustering and
    /// prototype refresh.
    pub mean_features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Spike totals summed over all batches.
    pub counts: Vec<LayerSpikes>,
    /// Confusion counts: `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn merge_counts(acc: &mut Vec<LayerSpikes>, add: &[LayerSpikes]) {
    for a in add {
        match acc.iter_mut().find(|c| c.layer == a.layer) {
            Some(c) => c.spikes += a.spikes,
            None => acc.push(a.clone()),
        }
    }
}

pub fn evaluate(
    model: &Model,
    samples: &[LabeledSample],
    batch_size: usize,
    hp: &LossHyper,
) -> Result<EvalStats> {
    if samples.is_empty() {
        return Err(Error::InvalidParam(
            "evaluation needs at least one sample".into(),
        ));
    }
    let hidden = model.cfg.encoder.hidden_dim;
    let classes = model.cfg.encoder.num_classes;
    let mut features = Array2::zeros((samples.len(), hidden));
    let mut labels = Vec::with_capacity(samples.len());
    let mut counts: Vec<LayerSpikes> = Vec::new();
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut row = 0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SpikeTensor> = chunk.iter().map(|s| s.tensor.as_ref()).collect();
        let chunk_labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let out = model.forward(&refs, &chunk_labels, false, None, hp)?;
        for (&p, &l) in out.predictions.iter().zip(&chunk_labels) {
            confusion[l][p] += 1;
        }
        correct += out
            .predictions
            .iter()
            .zip(&chunk_labels)
            .filter(|(p, l)| p == l)
            .count();
        loss_sum += if hp.mean_reduction {
            out.loss_value * chunk.len() as f64
        } else {
            out.loss_value
        };
        for (i, fr) in out.mean_features.rows().into_iter().enumerate() {
            features.row_mut(row + i).assign(&fr);
        }
        merge_counts(&mut counts, &out.counts);
        labels.extend(chunk_labels);
        row += chunk.len();
    }
    Ok(EvalStats {
        accuracy: correct as f64 / samples.len() as f64,
        loss: loss_sum / samples.len() as f64,
        samples: samples.len(),
        mean_features: features,
        labels,
        counts,
        confusion,
    })
}

// ───────────────────────── run records ─────────────────────────

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Everything one run produced; serialized as `run.json`.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RunRecord {
    pub model_id: ModelId,
    pub seed: u64,
    pub epochs: Vec<EpochStat>,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub test_accuracy: f64,
    /// Test-set confusion counts, `confusion[true][predicted]`.
    #[serde(default)]
    pub test_confusion: Vec<Vec<usize>>,
    /// `None` when the test features collapse to a single populated class.
    pub silhouette: Option<f64>,
    pub silhouette_band: Option<String>,
    pub energy: EnergyReport,
    pub early_stopped: bool,
    pub reached_target: bool,
    pub trainable_params: usize,
    pub total_params: usize,
    pub stored_patterns: usize,
    pub wall_seconds: f64,
}

/// Per-epoch CSV: `epoch,train_loss,val_accuracy,lr,seconds`.
pub fn write_epochs_csv(path: &Path, stats: &[EpochStat]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_accuracy", "lr", "seconds"])?;
    for s in stats {
        w.write_record([
            s.epoch.to_string(),
            s.train_loss.to_string(),
            s.val_accuracy.to_string(),
            s.lr.to_string(),
            s.seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ───────────────────────── the loop ─────────────────────────

struct BestSnapshot {
    accuracy: f64,
    epoch: usize,
    tensors: Vec<Arr>,
    memory: Option<(Vec<Array1<f64>>, Array2<f64>)>,
}

fn snapshot(model: &Model, accuracy: f64, epoch: usize) -> BestSnapshot {
    BestSnapshot {
        accuracy,
        epoch,
        tensors: model.all_tensors().iter().map(|t| (*t.data).clone()).collect(),
        memory: model
            .memory
            .as_ref()
            .map(|m| (m.patterns().to_vec(), m.weights().clone())),
    }
}

fn restore(model: &mut Model, best: BestSnapshot) -> Result<()> {
    for (t, arr) in model.all_tensors_mut().into_iter().zip(best.tensors) {
        t.replace(arr)?;
    }
    if let Some((patterns, weights)) = best.memory {
        let dim = model.cfg.encoder.hidden_dim;
        if let Some(slot) = &mut model.memory {
            *slot = HopfieldMemory::from_parts(dim, patterns, weights)?;
        }
    }
    Ok(())
}

/// Train one model to completion and measure it. Artifacts (`run.json`,
/// `epochs.csv`, `best.ckpt`) land in `out_dir` when given.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<(RunRecord, Model)> {
    cfg.validate()?;
    let wall_start = Instant::now();
    let data = load_datasets(cfg)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut model = Model::build(cfg.model_id, &cfg.arch, cfg.seed)?;
    let hp = LossHyper {
        lambda: cfg.lambda,
        tau: cfg.tau,
        mean_reduction: cfg.mean_reduction,
    };
    let adam_cfg = AdamParams {
        weight_decay: cfg.weight_decay,
        ..AdamParams::default()
    };
    let mut adam = Adam::new(adam_cfg, &model.tensors());
    let n_train = data.train.len();

    let mut stats: Vec<EpochStat> = Vec::new();
    let mut val_history: Vec<f64> = Vec::new();
    let mut best: Option<BestSnapshot> = None;
    let mut early_stopped = false;
    let mut reached_target = false;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);

        let mut order: Vec<usize> = (0..n_train).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout", epoch as u64));

        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train[i].label).collect();
            // Augmentation keys on the dataset index, not the shuffled
            // position, so the stream is stable across epoch orderings.
            let owned: Option<Vec<SpikeTensor>> = if cfg.augment {
                let mut v = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let spec = AugmentSpec::new(
                        cfg.max_shift_px,
                        cfg.max_jitter_bins,
                        derive_seed(cfg.seed, "augment", (epoch * n_train + i) as u64),
                    )?;
                    v.push(augment_tensor(&data.train[i].tensor, &spec));
                }
                Some(v)
            } else {
                None
            };
            let refs: Vec<&SpikeTensor> = match &owned {
                Some(v) => v.iter().collect(),
                None => chunk.iter().map(|&i| data.train[i].tensor.as_ref()).collect(),
            };

            let out = model.forward(&refs, &labels, true, Some(&mut dropout_rng), &hp)?;
            if !out.loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            backward(&out.loss)?;
            let mut grads: Vec<Arr> = out.binding.values().iter().map(|v| v.grad()).collect();
            let batch_len = refs.len();
            let loss_value = out.loss_value;
            // The graph aliases the parameter arrays; it must be gone
            // before the optimizer mutates them.
            drop(out);

            clip_gradients(&mut grads, cfg.clip_norm);
            adam.step(&mut model.tensors_mut(), &grads, lr)?;
            loss_sum += if hp.mean_reduction {
                loss_value * batch_len as f64
            } else {
                loss_value
            };
        }
        let train_loss = if hp.mean_reduction {
            loss_sum / n_train as f64
        } else {
            loss_sum
        };

        // Refresh the memory from clean training features so validation
        // sees the prototypes this epoch produced. The first epoch trains
        // with an empty memory (identity cleanup).
        if model.memory.is_some() {
            let train_eval = evaluate(&model, &data.train, cfg.batch_size, &hp)?;
            model.refresh_prototypes(&train_eval.mean_features, &train_eval.labels)?;
        }

        let val = evaluate(&model, &data.val, cfg.batch_size, &hp)?;
        val_history.push(val.accuracy);
        stats.push(EpochStat {
            epoch,
            train_loss,
            val_accuracy: val.accuracy,
            lr,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });

        if best.as_ref().map_or(true, |b| val.accuracy > b.accuracy) {
            best = Some(snapshot(&model, val.accuracy, epoch));
        }
        if cfg.early_stop_target.is_some_and(|t| val.accuracy >= t) {
            reached_target = true;
            break;
        }
        if early_stop(&val_history, cfg.patience) {
            early_stopped = true;
            break;
        }
    }

    let best = best.expect("at least one epoch runs");
    let (best_val_accuracy, best_epoch) = (best.accuracy, best.epoch);
    restore(&mut model, best)?;

    let test = evaluate(&model, &data.test, cfg.batch_size, &hp)?;
    let (silhouette, silhouette_band) =
        match silhouette_report(&test.mean_features, &test.labels, cfg.seed) {
            Ok(rep) => (Some(rep.score), Some(rep.band.name().to_string())),
            Err(Error::SingleCluster) => (None, None),
            Err(e) => return Err(e),
        };
    let activities = model.layer_activities(&test.counts, test.samples);
    let ann_macs = mac_count(&model.ann_architecture());
    let energy = profile(
        &activities,
        test.samples,
        ann_macs,
        &EnergyModel::default(),
        model.gate_timesteps(),
    )?;

    let record = RunRecord {
        model_id: cfg.model_id,
        seed: cfg.seed,
        epochs: stats,
        best_val_accuracy,
        best_epoch,
        test_accuracy: test.accuracy,
        test_confusion: test.confusion.clone(),
        silhouette,
        silhouette_band,
        energy,
        early_stopped,
        reached_target,
        trainable_params: model.trainable_param_count(),
        total_params: model.total_param_count(),
        stored_patterns: model.memory.as_ref().map_or(0, HopfieldMemory::len),
        wall_seconds: wall_start.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out_dir {
        write_epochs_csv(&dir.join("epochs.csv"), &record.epochs)?;
        std::fs::write(
            dir.join("run.json"),
            serde_json::to_string_pretty(&record)?,
        )?;
        save_checkpoint(&dir.join("best.ckpt"), &model, Some(serde_json::to_value(cfg)?))?;
    }
    Ok((record, model))
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::checkpoint::load_checkpoint;

    fn tiny_cfg(id: ModelId) -> TrainConfig {
        let mut cfg = TrainConfig::quick(id);
        cfg.dataset = DatasetSel::Synthetic {
            train: 32,
            val: 16,
            test: 16,
            spec: SynthSpec {
                num_classes: 4,
                t_steps: 4,
                hw: 8,
                noise_density: 0.02,
                motif: true,
            },
        };
        cfg.epochs = 2;
        cfg
    }

    #[test]
    fn synthetic_splits_are_sized_and_balanced() {
        let cfg = TrainConfig::quick(ModelId::M1);
        let data = load_datasets(&cfg).unwrap();
        assert_eq!((data.train.len(), data.val.len(), data.test.len()), (96, 32, 32));
        for set in [&data.train, &data.val, &data.test] {
            let mut per_class = [0usize; 4];
            for s in set {
                per_class[s.label] += 1;
            }
            assert!(per_class.iter().all(|&c| c == set.len() / 4), "{per_class:?}");
        }
    }

    #[test]
    fn two_runs_with_one_seed_are_bit_identical() {
        let mut cfg = tiny_cfg(ModelId::M2);
        cfg.augment = true; // exercise the augmentation stream too
        let (a, _) = train(&cfg, None).unwrap();
        let (b, _) = train(&cfg, None).unwrap();
        assert_eq!(a.epochs.len(), b.epochs.len());
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_accuracy.to_bits(), y.val_accuracy.to_bits());
        }
        assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
        assert_eq!(a.silhouette, b.silhouette);
    }

    #[test]
    fn best_epoch_is_the_argmax_and_its_weights_are_restored() {
        let cfg = tiny_cfg(ModelId::M1);
        let (record, model) = train(&cfg, None).unwrap();
        let max = record
            .epochs
            .iter()
            .map(|e| e.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(record.best_val_accuracy, max);
        assert_eq!(
            record.epochs[record.best_epoch].val_accuracy,
            record.best_val_accuracy
        );
        // Re-evaluating the restored model on the validation set reproduces
        // the recorded best accuracy exactly.
        let data = load_datasets(&cfg).unwrap();
        let hp = LossHyper {
            lambda: cfg.lambda,
            tau: cfg.tau,
            mean_reduction: cfg.mean_reduction,
        };
        let val = evaluate(&model, &data.val, cfg.batch_size, &hp).unwrap();
        assert_eq!(val.accuracy, record.best_val_accuracy);
    }

    #[test]
    fn flat_validation_trips_the_patience_rule() {
        let mut cfg = tiny_cfg(ModelId::M1);
        cfg.lr_max = 0.0;
        cfg.lr_min = 0.0;
        cfg.weight_decay = 0.0;
        cfg.epochs = 10;
        cfg.patience = 1;
        let (record, _) = train(&cfg, None).unwrap();
        assert!(record.early_stopped);
        // Best at epoch 0; epoch 2 is the first with len-1-best > patience.
        assert_eq!(record.epochs.len(), 3);
    }

    #[test]
    fn reaching_the_target_stops_immediately() {
        let mut cfg = tiny_cfg(ModelId::M1);
        cfg.epochs = 10;
        cfg.early_stop_target = Some(0.0);
        let (record, _) = train(&cfg, None).unwrap();
        assert!(record.reached_target);
        assert!(!record.early_stopped);
        assert_eq!(record.epochs.len(), 1);
    }

    #[test]
    fn memory_variant_ends_with_stored_prototypes() {
        let cfg = tiny_cfg(ModelId::M3);
        let (record, model) = train(&cfg, None).unwrap();
        assert_eq!(record.stored_patterns, 4);
        assert_eq!(model.memory.as_ref().unwrap().len(), 4);
        assert!(record.total_params > record.trainable_params);
    }

    #[test]
    fn artifacts_land_in_the_output_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(ModelId::M1);
        let (record, _) = train(&cfg, Some(dir.path())).unwrap();

        let json = std::fs::read_to_string(dir.path().join("run.json")).unwrap();
        let parsed: RunRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.test_accuracy, record.test_accuracy);
        assert_eq!(parsed.epochs.len(), record.epochs.len());

        let csv_text = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
        assert_eq!(csv_text.lines().count(), record.epochs.len() + 1);
        assert!(csv_text.starts_with("epoch,train_loss,val_accuracy,lr,seconds"));

        let (loaded, manifest) = load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(loaded.id, ModelId::M1);
        let extra = manifest.extra.unwrap();
        assert_eq!(extra["model_id"], serde_json::json!("M1"));
    }

    #[test]
    fn validation_catches_mismatched_synthetic_specs() {
        let mut cfg = TrainConfig::quick(ModelId::M1);
        if let DatasetSel::Synthetic { spec, .. } = &mut cfg.dataset {
            spec.hw = 34;
        }
        assert!(cfg.validate().is_err());
        let mut cfg2 = TrainConfig::quick(ModelId::M1);
        cfg2.lr_min = 1.0; // above lr_max
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn missing_event_root_is_a_resource_error() {
        let mut cfg = TrainConfig::events_full(ModelId::M1);
        cfg.dataset = DatasetSel::Events {
            root: Some(PathBuf::from("/definitely/not/here")),
            limit_per_class: Some(1),
            val_fraction: 0.1,
        };
        let err = load_datasets(&cfg).unwrap_err();
        assert!(matches!(err, Error::DatasetMissing { .. }), "{err}");
    }

    #[test]
    fn partial_config_files_fill_in_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"model_id": "M3", "seed": 7}"#).unwrap();
        assert_eq!(cfg.model_id, ModelId::M3);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs, TrainConfig::default().epochs);
        cfg.validate().unwrap();
    }
}
