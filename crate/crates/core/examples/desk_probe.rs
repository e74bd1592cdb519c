use spikemem_core::train::{evaluate, load_datasets, train, LossHyper, ModelId, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let wd: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let drop: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut cfg = TrainConfig::synthetic_desk(ModelId::M1);
    cfg.augment = false;
    cfg.lr_max = lr;
    cfg.weight_decay = wd;
    cfg.arch.encoder.dropout_p = drop;
    cfg.patience = 50;
    cfg.epochs = epochs;
    eprintln!("lr {lr}, wd {wd}, dropout {drop}, epochs {epochs}");
    let (record, model) = match train(&cfg, None) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("TRAIN ERROR: {e}");
            return;
        }
    };
    for e in &record.epochs {
        eprintln!(
            "epoch {:2}: loss {:.4}, val {:.3}, lr {:.2e}",
            e.epoch, e.train_loss, e.val_accuracy, e.lr
        );
    }
    eprintln!("best {:.3} @ {}", record.best_val_accuracy, record.best_epoch);

    // Diagnostics on the best-epoch weights: per-class mean output rates,
    // confusion, per-layer activity.
    let data = load_datasets(&cfg).unwrap();
    let hp = LossHyper {
        lambda: cfg.lambda,
        tau: cfg.tau,
        mean_reduction: cfg.mean_reduction,
    };
    let classes = cfg.arch.encoder.num_classes;
    let mut rate_by_class = vec![vec![0.0f64; classes]; classes];
    let mut n_by_class = vec![0usize; classes];
    for chunk in data.val.chunks(cfg.batch_size) {
        let refs: Vec<_> = chunk.iter().map(|s| s.tensor.as_ref()).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let out = model.forward(&refs, &labels, false, None, &hp).unwrap();
        let scores = out.scores;
        for (i, &l) in labels.iter().enumerate() {
            n_by_class[l] += 1;
            for c in 0..classes {
                rate_by_class[l][c] += scores[[i, c]];
            }
        }
    }
    eprintln!("mean output rates by true class (rows = true):");
    for l in 0..classes {
        let row: Vec<String> = rate_by_class[l]
            .iter()
            .map(|v| format!("{:.3}", v / n_by_class[l] as f64))
            .collect();
        eprintln!("  class {l}: [{}]", row.join(", "));
    }
    let stats = evaluate(&model, &data.val, cfg.batch_size, &hp).unwrap();
    eprintln!("val accuracy {:.3}, confusion (rows = true):", stats.accuracy);
    for row in &stats.confusion {
        eprintln!("  {row:?}");
    }
    let acts = model.layer_activities(&stats.counts, stats.samples);
    for a in &acts {
        eprintln!(
            "  layer {:12} spikes/sample {:10.1}  rate {:.4}",
            a.layer,
            a.spike_count as f64 / stats.samples as f64,
            a.spike_count as f64
                / (stats.samples as f64 * a.neuron_count as f64 * a.timestep_count as f64)
        );
    }
}
