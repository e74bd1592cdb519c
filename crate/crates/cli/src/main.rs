//! `spikemem` — command-line front end for the spiking-memory workspace.
//!
//! Four subcommands cover the full workflow:
//!
//! * `train`   — fit one variant (possibly across several seeds), writing
//!   `run.json`, `epochs.csv` and `best.ckpt` per run.
//! * `ablate`  — sweep the five architecture variants and emit a summary
//!   table as Markdown (stdout) plus CSV/MD artifacts. Completed runs are
//!   detected by their `run.json` and skipped.
//! * `profile` — energy analysis: either `--golden` (push the published
//!   operation counts through the cost model) or from a checkpoint.
//! * `cluster` — silhouette analysis of the learned features from a
//!   checkpoint, plus a raw-feature CSV for external projection.
//!
//! Exit codes are a stable contract for CI: 0 success, 2 usage or config
//! error, 3 missing resource (dataset, checkpoint, config file), 4 metric
//! undefined on the given data (silhouette with a single class). Unexpected
//! internal failures exit 1.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use spikemem_core::cluster::{silhouette_report, write_report_csv, SilhouetteReport};
use spikemem_core::data::LabeledSample;
use spikemem_core::energy::{
    golden_table, mac_count, profile, write_energy_csv, EnergyModel, EnergyReport,
};
use spikemem_core::train::{
    evaluate, load_checkpoint, load_datasets, train, DatasetSel, LossHyper, Model, ModelId,
    RunRecord, TrainConfig,
};
use spikemem_core::Error as CoreError;

// ───────────────────────── argument surface ─────────────────────────

#[derive(Parser)]
#[command(
    name = "spikemem",
    version,
    about = "Train, ablate and profile spiking-network memory models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model variant and write run artifacts.
    Train(TrainArgs),
    /// Run the five-variant ablation and emit the summary table.
    Ablate(AblateArgs),
    /// Energy analysis, from published counts (--golden) or a checkpoint.
    Profile(ProfileArgs),
    /// Silhouette analysis of learned features from a checkpoint.
    Cluster(ClusterArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    /// Deterministic synthetic event streams (no downloads).
    Synthetic,
    /// Real event recordings under --data-root or $NMNIST_DIR.
    Nmnist,
}

/// Flags shared by `train` and `ablate`.
#[derive(Args)]
struct CommonTrainArgs {
    /// JSON training config; omitted fields take their defaults.
    /// Flags override file values.
    #[arg(long, conflicts_with = "quick")]
    config: Option<PathBuf>,

    /// Dataset family to train on.
    #[arg(long, value_enum, default_value = "synthetic")]
    dataset: DatasetKind,

    /// Event-dataset root (falls back to $NMNIST_DIR).
    #[arg(long)]
    data_root: Option<PathBuf>,

    /// Cap recordings per class when loading event data.
    #[arg(long)]
    limit_per_class: Option<usize>,

    /// Small architecture and few epochs; smoke-tests in minutes.
    #[arg(long)]
    quick: bool,

    /// Output directory for run artifacts.
    #[arg(long, default_value = "runs")]
    out: PathBuf,

    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Contrastive loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Stop as soon as validation accuracy reaches this fraction.
    #[arg(long)]
    target: Option<f64>,
    /// Disable shift/jitter augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Model variant (M1..M5).
    #[arg(long, default_value = "M1")]
    model: String,

    /// Seed(s) to run; repeat the flag for several runs.
    #[arg(long)]
    seed: Vec<u64>,

    #[command(flatten)]
    common: CommonTrainArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Variants to include; repeat for a subset (default: all five).
    #[arg(long)]
    model: Vec<String>,

    /// Seed for every variant in the sweep.
    #[arg(long)]
    seed: Option<u64>,

    #[command(flatten)]
    common: CommonTrainArgs,
}

#[derive(Args)]
struct ProfileArgs {
    /// Reproduce the published energy table from the published counts.
    #[arg(long, conflicts_with = "checkpoint")]
    golden: bool,

    /// Checkpoint to load and profile on its configured test split.
    #[arg(long, required_unless_present = "golden")]
    checkpoint: Option<PathBuf>,

    /// Override for the event-dataset root.
    #[arg(long)]
    data_root: Option<PathBuf>,

    /// Output directory for the JSON/CSV reports.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    /// Checkpoint whose features to analyse.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Override for the event-dataset root.
    #[arg(long)]
    data_root: Option<PathBuf>,

    /// Analyse at most this many test samples (taken in order).
    #[arg(long)]
    max_samples: Option<usize>,

    /// Seed for the subsampling step of large feature sets.
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Output directory for features.csv and silhouette.csv.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

// ───────────────────────── entry point ─────────────────────────

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Profile(args) => cmd_profile(args),
        Command::Cluster(args) => cmd_cluster(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// Map an error chain onto the documented exit codes.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::DatasetMissing { .. } => 3,
                CoreError::SingleCluster => 4,
                CoreError::Io(io) if io.kind() == ErrorKind::NotFound => 3,
                CoreError::NonFiniteLoss { .. } => 1,
                _ => 2,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == ErrorKind::NotFound {
                return 3;
            }
        }
        if let Some(_json) = cause.downcast_ref::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

// ───────────────────────── config assembly ─────────────────────────

/// Base config: the JSON file when given, otherwise a preset chosen by
/// dataset family and quick mode.
fn base_config(common: &CommonTrainArgs) -> anyhow::Result<TrainConfig> {
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        return Ok(cfg);
    }
    Ok(match (common.dataset, common.quick) {
        (DatasetKind::Synthetic, false) => TrainConfig::synthetic_desk(ModelId::M1),
        (DatasetKind::Synthetic, true) => TrainConfig::quick(ModelId::M1),
        (DatasetKind::Nmnist, false) => TrainConfig::events_full(ModelId::M1),
        (DatasetKind::Nmnist, true) => {
            let mut cfg = TrainConfig::events_full(ModelId::M1);
            cfg.epochs = 3;
            if let DatasetSel::Events {
                limit_per_class, ..
            } = &mut cfg.dataset
            {
                *limit_per_class = Some(100);
            }
            cfg
        }
    })
}

/// Apply flag overrides on top of the base config.
fn apply_overrides(cfg: &mut TrainConfig, common: &CommonTrainArgs) -> anyhow::Result<()> {
    if let Some(v) = common.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = common.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = common.lr_max {
        cfg.lr_max = v;
    }
    if let Some(v) = common.lr_min {
        cfg.lr_min = v;
    }
    if let Some(v) = common.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = common.patience {
        cfg.patience = v;
    }
    if let Some(v) = common.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = common.tau {
        cfg.tau = v;
    }
    if let Some(v) = common.target {
        cfg.early_stop_target = Some(v);
    }
    if common.no_augment {
        cfg.augment = false;
    }
    match (&mut cfg.dataset, &common.data_root, common.limit_per_class) {
        (DatasetSel::Events { root, .. }, Some(dir), _) => *root = Some(dir.clone()),
        (DatasetSel::Synthetic { .. }, Some(_), _) => {
            return Err(anyhow!(CoreError::InvalidParam(
                "--data-root only applies to event datasets".into()
            )));
        }
        _ => {}
    }
    if let (DatasetSel::Events {
        limit_per_class, ..
    }, Some(limit)) = (&mut cfg.dataset, common.limit_per_class)
    {
        *limit_per_class = Some(limit);
    } else if common.limit_per_class.is_some() {
        return Err(anyhow!(CoreError::InvalidParam(
            "--limit-per-class only applies to event datasets".into()
        )));
    }
    Ok(())
}

// ───────────────────────── train ─────────────────────────

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let model_id = ModelId::from_str(&args.model)?;
    let base = base_config(&args.common)?;
    let seeds: Vec<u64> = if args.seed.is_empty() {
        vec![base.seed]
    } else {
        args.seed.clone()
    };

    let mut rows = Vec::new();
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.model_id = model_id;
        cfg.seed = seed;
        apply_overrides(&mut cfg, &args.common)?;
        cfg.validate()?;

        let dir = args.common.out.join(format!("train-{model_id}-s{seed}"));
        println!("training {model_id} (seed {seed}) -> {}", dir.display());
        let (record, _) = train(&cfg, Some(&dir))?;
        println!(
            "  best val {:.2}% @ epoch {}, test {:.2}%, {:.1}s",
            100.0 * record.best_val_accuracy,
            record.best_epoch,
            100.0 * record.test_accuracy,
            record.wall_seconds,
        );
        rows.push(record);
    }

    println!();
    print_run_table(&rows);
    Ok(())
}

fn print_run_table(records: &[RunRecord]) {
    let header = [
        "Model",
        "Seed",
        "Val Acc (%)",
        "Test Acc (%)",
        "Silhouette",
        "Energy (µJ)",
        "Epochs",
    ];
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.model_id.to_string(),
                r.seed.to_string(),
                format!("{:.2}", 100.0 * r.best_val_accuracy),
                format!("{:.2}", 100.0 * r.test_accuracy),
                fmt_silhouette(r.silhouette),
                format!("{:.2}", r.energy.per_inference_uj),
                r.epochs.len().to_string(),
            ]
        })
        .collect();
    print_markdown(&header, &rows);
}

fn fmt_silhouette(s: Option<f64>) -> String {
    match s {
        Some(v) => format!("{v:.3}"),
        None => "n/a".into(),
    }
}

// ───────────────────────── ablate ─────────────────────────

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let models: Vec<ModelId> = if args.model.is_empty() {
        ModelId::ALL.to_vec()
    } else {
        args.model
            .iter()
            .map(|m| ModelId::from_str(m))
            .collect::<Result<_, _>>()?
    };
    let base = base_config(&args.common)?;
    let seed = args.seed.unwrap_or(base.seed);

    let mut records = Vec::new();
    for &id in &models {
        let dir = args.common.out.join(format!("ablate-{id}-s{seed}"));
        let marker = dir.join("run.json");
        if let Some(record) = try_load_record(&marker, id, seed)? {
            println!("{id}: reusing completed run at {}", dir.display());
            records.push(record);
            continue;
        }
        let mut cfg = base.clone();
        cfg.model_id = id;
        cfg.seed = seed;
        apply_overrides(&mut cfg, &args.common)?;
        cfg.validate()?;
        println!("{id}: training (seed {seed}) -> {}", dir.display());
        let (record, _) = train(&cfg, Some(&dir))?;
        println!(
            "  val {:.2}%, test {:.2}%, {:.1}s",
            100.0 * record.best_val_accuracy,
            100.0 * record.test_accuracy,
            record.wall_seconds,
        );
        records.push(record);
    }

    fs::create_dir_all(&args.common.out)?;
    let md = ablation_markdown(&records);
    println!("\n{md}");
    fs::write(args.common.out.join("ablation.md"), &md)?;
    write_ablation_csv(&args.common.out.join("ablation.csv"), &records)?;
    println!(
        "wrote {} and ablation.csv",
        args.common.out.join("ablation.md").display()
    );
    Ok(())
}

/// A completed run is one whose `run.json` exists, parses, and matches the
/// requested variant and seed. Anything else triggers a fresh run.
fn try_load_record(
    marker: &Path,
    id: ModelId,
    seed: u64,
) -> anyhow::Result<Option<RunRecord>> {
    let text = match fs::read_to_string(marker) {
        Ok(text) => text,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e).context("reading cached run record"),
    };
    match serde_json::from_str::<RunRecord>(&text) {
        Ok(record) if record.model_id == id && record.seed == seed => Ok(Some(record)),
        _ => Ok(None),
    }
}

fn ablation_markdown(records: &[RunRecord]) -> String {
    let header = [
        "Model",
        "Val Acc (%)",
        "Test Acc (%)",
        "Silhouette",
        "Energy (µJ)",
    ];
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.model_id.to_string(),
                format!("{:.2}", 100.0 * r.best_val_accuracy),
                format!("{:.2}", 100.0 * r.test_accuracy),
                fmt_silhouette(r.silhouette),
                format!("{:.2}", r.energy.per_inference_uj),
            ]
        })
        .collect();
    markdown_table(&header, &rows)
}

fn write_ablation_csv(path: &Path, records: &[RunRecord]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model",
        "val_acc_pct",
        "test_acc_pct",
        "silhouette",
        "energy_uj_per_inference",
    ])?;
    for r in records {
        w.write_record([
            r.model_id.to_string(),
            (100.0 * r.best_val_accuracy).to_string(),
            (100.0 * r.test_accuracy).to_string(),
            r.silhouette.map(|s| s.to_string()).unwrap_or_default(),
            r.energy.per_inference_uj.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ───────────────────────── profile ─────────────────────────

fn cmd_profile(args: ProfileArgs) -> anyhow::Result<()> {
    fs::create_dir_all(&args.out)?;
    if args.golden {
        return profile_golden(&args.out);
    }
    let path = args
        .checkpoint
        .as_deref()
        .expect("clap enforces --checkpoint without --golden");
    let (model, samples, hp, batch_size) = eval_set_for(path, args.data_root.as_deref())?;
    let stats = evaluate(&model, &samples, batch_size, &hp)?;

    let activities = model.layer_activities(&stats.counts, stats.samples);
    let ann_macs = mac_count(&model.ann_architecture());
    let report = profile(
        &activities,
        stats.samples,
        ann_macs,
        &EnergyModel::default(),
        model.gate_timesteps(),
    )?;

    println!("{}", energy_markdown(&report));
    let json_path = args.out.join("energy.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    let csv_file = fs::File::create(args.out.join("energy.csv"))?;
    write_energy_csv(csv_file, &report)?;
    println!("wrote {} and energy.csv", json_path.display());
    Ok(())
}

fn profile_golden(out: &Path) -> anyhow::Result<()> {
    let cost = EnergyModel::default();
    let (rows, ann_uj) = golden_table(&cost)?;

    let header = ["Model", "SynOps (M)", "Energy (µJ)", "Reduction (×)"];
    let mut table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model_id.clone(),
                format!("{:.3}", r.synops as f64 / 1e6),
                format!("{:.2}", r.total_uj),
                format!("{:.1}", r.reduction),
            ]
        })
        .collect();
    table.push(vec![
        "ANN".into(),
        "—".into(),
        format!("{ann_uj:.2}"),
        "1.0".into(),
    ]);
    println!("{}", markdown_table(&header, &table));

    let json_path = out.join("golden.json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "rows": rows,
            "ann_uj": ann_uj,
            "e_synop_pj": cost.e_synop_pj,
            "e_mac_pj": cost.e_mac_pj,
        }))?,
    )?;
    let mut w = csv::Writer::from_path(out.join("golden.csv"))?;
    w.write_record(["model", "synops", "total_uj", "reduction"])?;
    for r in &rows {
        w.write_record([
            r.model_id.clone(),
            r.synops.to_string(),
            r.total_uj.to_string(),
            r.reduction.to_string(),
        ])?;
    }
    w.write_record(["ANN", "", &ann_uj.to_string(), "1"])?;
    w.flush()?;
    println!("wrote {} and golden.csv", json_path.display());
    Ok(())
}

fn energy_markdown(report: &EnergyReport) -> String {
    let header = ["Layer", "Spikes", "SynOps", "Energy (µJ)", "Share (%)"];
    let mut rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.layer.clone(),
                r.spikes.to_string(),
                r.synops.to_string(),
                format!("{:.4}", r.microjoules),
                format!("{:.2}", r.percent),
            ]
        })
        .collect();
    rows.push(vec![
        "TOTAL".into(),
        String::new(),
        String::new(),
        format!("{:.4}", report.total_uj),
        "100.00".into(),
    ]);
    let mut out = markdown_table(&header, &rows);
    out.push_str(&format!(
        "\nper inference: {:.4} µJ over {} samples; sparsity {:.2}%; \
         dense baseline {:.2} µJ ({})\n",
        report.per_inference_uj,
        report.samples,
        report.sparsity_percent,
        report.ann_uj,
        match report.reduction_factor {
            Some(r) => format!("{r:.1}× reduction"),
            None => "no spikes recorded".into(),
        },
    ));
    out
}

// ───────────────────────── cluster ─────────────────────────

fn cmd_cluster(args: ClusterArgs) -> anyhow::Result<()> {
    let (model, mut samples, hp, batch_size) =
        eval_set_for(&args.checkpoint, args.data_root.as_deref())?;
    if let Some(limit) = args.max_samples {
        samples.truncate(limit);
    }
    let stats = evaluate(&model, &samples, batch_size, &hp)?;

    let report = silhouette_report(&stats.mean_features, &stats.labels, args.seed)?;
    print_cluster_report(&report, stats.samples);

    fs::create_dir_all(&args.out)?;
    let features_path = args.out.join("features.csv");
    write_features_csv(&features_path, &stats.mean_features, &stats.labels)?;
    let report_file = fs::File::create(args.out.join("silhouette.csv"))?;
    write_report_csv(report_file, &report)?;
    println!("wrote {} and silhouette.csv", features_path.display());
    Ok(())
}

fn print_cluster_report(report: &SilhouetteReport, evaluated: usize) {
    println!(
        "silhouette {:.4} ({}) over {} of {} samples{}",
        report.score,
        report.band.name(),
        report.used,
        evaluated,
        if report.subsampled { " (subsampled)" } else { "" },
    );
    let header = ["Class", "Samples", "Mean silhouette"];
    let rows: Vec<Vec<String>> = report
        .per_class
        .iter()
        .map(|&(class, mean, count)| {
            vec![class.to_string(), count.to_string(), format!("{mean:.4}")]
        })
        .collect();
    println!("{}", markdown_table(&header, &rows));
}

/// Raw features for external projection: one row per sample,
/// `f0..f{D-1},label`. Floats use the shortest round-trippable form.
fn write_features_csv(
    path: &Path,
    features: &Array2<f64>,
    labels: &[usize],
) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = features.ncols();
    let mut header: Vec<String> = (0..dim).map(|d| format!("f{d}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, &label) in features.rows().into_iter().zip(labels) {
        let mut record: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        record.push(label.to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

// ───────────────────────── shared plumbing ─────────────────────────

/// Load a checkpoint and build the evaluation set its training config
/// describes. Returns the model, the test samples, and the loss
/// hyper-parameters and batch size to evaluate with.
fn eval_set_for(
    checkpoint: &Path,
    data_root: Option<&Path>,
) -> anyhow::Result<(Model, Vec<LabeledSample>, LossHyper, usize)> {
    let (model, manifest) = load_checkpoint(checkpoint)?;
    let extra = manifest.extra.ok_or_else(|| {
        anyhow!(CoreError::BadCheckpoint(
            "checkpoint lacks an embedded training config; cannot pick a dataset".into()
        ))
    })?;
    let mut cfg: TrainConfig =
        serde_json::from_value(extra).context("embedded training config")?;
    if let (DatasetSel::Events { root, .. }, Some(dir)) = (&mut cfg.dataset, data_root) {
        *root = Some(dir.to_path_buf());
    }
    let datasets = load_datasets(&cfg)?;
    let hp = LossHyper {
        lambda: cfg.lambda,
        tau: cfg.tau,
        mean_reduction: cfg.mean_reduction,
    };
    Ok((model, datasets.test, hp, cfg.batch_size))
}

/// Render an aligned Markdown table.
fn markdown_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<String>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |", padded.join(" | "))
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("| {} |", rule.join(" | ")));
    for row in rows {
        out.push('\n');
        debug_assert_eq!(row.len(), cols);
        out.push_str(&line(row.clone()));
    }
    out
}

fn print_markdown(header: &[&str], rows: &[Vec<String>]) {
    println!("{}", markdown_table(header, rows));
}
