//! Supervised contrastive loss on L2-normalised features, plus the firing
//! rate cross-entropy and their weighted combination.
//!
//! For a batch of features `h_i` with labels `y_i`, every sample acts as an
//! anchor. With `z_i = h_i / ||h_i||`, temperature `tau`, positives
//! `P(i) = {p != i : y_p = y_i}` and candidates `A(i) = {a != i}`:
//!
//! ```text
//! L = sum_i -1/|P(i)| * sum_{p in P(i)} log( exp(z_i.z_p / tau)
//!                                            / sum_{a in A(i)} exp(z_i.z_a / tau) )
//! ```
//!
//! Anchors without positives contribute zero. Rows whose feature norm is
//! below [`NORM_EPS`](crate::autodiff::NORM_EPS) (silent samples) are
//! excluded from every role — anchor, positive and denominator candidate —
//! and reported through the `excluded` mask.

use ndarray::{Array1, Array2};

use crate::autodiff::{self, Value};
use crate::error::{Error, Result};

/// Floor inside the cross-entropy logarithm.
pub const RATE_FLOOR: f64 = 1e-8;
/// Floor inside the contrastive logarithm; real pair ratios are bounded far
/// above this, so only masked-out entries (whose gradient weight is zero)
/// ever hit it.
const RATIO_FLOOR: f64 = 1e-300;

/// How the per-anchor terms are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Reduction {
    /// The literal sum over anchors.
    Sum,
    /// Sum divided by the number of anchors that contributed (those with at
    /// least one positive); batch-size independent, useful for training.
    MeanAnchors,
}

/// A feature batch ready for the contrastive loss. Features are raw
/// (pre-normalisation) mean firing vectors, one row per sample.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub tau: f64,
}

impl ContrastiveBatch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, tau: f64) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "contrastive_batch",
                lhs: vec![features.nrows(), features.ncols()],
                rhs: vec![labels.len()],
            });
        }
        Ok(Self {
            features,
            labels,
            tau,
        })
    }

    /// Stack two augmented views of the same samples into one batch with
    /// duplicated labels; the loss itself is unchanged, each view simply
    /// becomes its own row.
    pub fn two_view(
        view_a: Array2<f64>,
        view_b: Array2<f64>,
        labels: &[usize],
        tau: f64,
    ) -> Result<Self> {
        if view_a.dim() != view_b.dim() || view_a.nrows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "two_view",
                lhs: vec![view_a.nrows(), view_a.ncols()],
                rhs: vec![view_b.nrows(), view_b.ncols()],
            });
        }
        let features = ndarray::concatenate(
            ndarray::Axis(0),
            &[view_a.view(), view_b.view()],
        )
        .expect("equal dims checked");
        let mut all_labels = labels.to_vec();
        all_labels.extend_from_slice(labels);
        Ok(Self {
            features,
            labels: all_labels,
            tau,
        })
    }
}

/// Result of a contrastive loss evaluation.
#[derive(Clone, Debug)]
pub struct SclOutcome {
    pub loss: f64,
    /// Per-sample silence mask (`true` = excluded from the loss).
    pub excluded: Vec<bool>,
    /// Anchors that actually contributed a term.
    pub active_anchors: usize,
}

/// Graph form of the loss, for use inside a training graph.
pub struct SclGraph {
    pub loss: Value,
    pub excluded: Vec<bool>,
    pub active_anchors: usize,
}

/// Normalise one feature vector to unit L2 norm. Vectors below the silence
/// threshold come back zeroed with the flag set.
pub fn normalize_features(h: &Array1<f64>) -> (Array1<f64>, bool) {
    let n = h.dot(h).sqrt();
    if n < autodiff::NORM_EPS {
        (Array1::zeros(h.len()), true)
    } else {
        (h / n, false)
    }
}

fn validate_inputs(n: usize, dim_rows: usize, labels: &[usize], tau: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if labels.len() != dim_rows {
        return Err(Error::ShapeMismatch {
            op: "scl_loss",
            lhs: vec![dim_rows],
            rhs: vec![labels.len()],
        });
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParam(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// Record the contrastive loss on the autodiff tape.
///
/// `features` is a `(B, D)` graph value of raw features. The loss is exact
/// in the well-posed cases: two samples sharing a label produce exactly
/// `0.0` when their normalised similarity to each other is as large as to
/// anything in the denominator set of size one.
pub fn scl_loss_graph(
    features: &Value,
    labels: &[usize],
    tau: f64,
    reduction: Reduction,
) -> Result<SclGraph> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "scl_loss",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let n = shape[0];
    validate_inputs(n, n, labels, tau)?;
    if let Some(bad) = features.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "non-finite feature value {bad} in contrastive batch"
        )));
    }

    let (z, excluded) = autodiff::l2_normalize_rows(features)?;
    let active: Vec<bool> = excluded.iter().map(|&e| !e).collect();

    // Candidate mask: j participates in anchor i's denominator.
    let mut cand = Array2::<f64>::zeros((n, n));
    // Positive-pair weights: 1/|P(i)| at each positive of an active anchor.
    let mut weights = Array2::<f64>::zeros((n, n));
    let mut active_anchors = 0usize;
    for i in 0..n {
        if !active[i] {
            continue;
        }
        let mut positives = Vec::new();
        for j in 0..n {
            if j == i || !active[j] {
                continue;
            }
            cand[[i, j]] = 1.0;
            if labels[j] == labels[i] {
                positives.push(j);
            }
        }
        if !positives.is_empty() {
            active_anchors += 1;
            let w = 1.0 / positives.len() as f64;
            for j in positives {
                weights[[i, j]] = w;
            }
        }
    }
    // Rows with an empty candidate set would divide by zero; give them a
    // harmless denominator (their weight rows are all zero anyway).
    let mut den_fix = Array1::<f64>::zeros(n);
    for i in 0..n {
        if cand.row(i).sum() == 0.0 {
            den_fix[i] = 1.0;
        }
    }

    let sims = z.matmul_tb(&z)?;
    let e = sims.scale(1.0 / tau).exp();
    let e_masked = e.mul(&Value::constant(cand.into_dyn()))?;
    let den = e_masked
        .row_sum()?
        .add(&Value::constant(den_fix.into_dyn()))?;
    let ratio = e_masked.div_rows(&den)?;
    let log_ratio = ratio.log_clamped(RATIO_FLOOR);
    let weighted = log_ratio.mul(&Value::constant(weights.into_dyn()))?;
    let scale = match reduction {
        Reduction::Sum => -1.0,
        Reduction::MeanAnchors => -1.0 / active_anchors.max(1) as f64,
    };
    let loss = weighted.sum().scale(scale);
    Ok(SclGraph {
        loss,
        excluded,
        active_anchors,
    })
}

/// Evaluate the loss on plain arrays (literal sum over anchors).
pub fn scl_loss(batch: &ContrastiveBatch) -> Result<SclOutcome> {
    scl_loss_with(batch, Reduction::Sum)
}

/// Evaluate the loss on plain arrays with an explicit reduction.
pub fn scl_loss_with(batch: &ContrastiveBatch, reduction: Reduction) -> Result<SclOutcome> {
    let features = Value::constant(batch.features.clone().into_dyn());
    let graph = scl_loss_graph(&features, &batch.labels, batch.tau, reduction)?;
    Ok(SclOutcome {
        loss: graph.loss.item(),
        excluded: graph.excluded,
        active_anchors: graph.active_anchors,
    })
}

// ───────────────────────── cross-entropy on rates ─────────────────────────

/// Cross-entropy on firing rates: `-sum_i ln(max(rate_i[y_i], 1e-8))`.
pub fn ce_loss(rates: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let v = Value::constant(rates.clone().into_dyn());
    Ok(ce_loss_graph(&v, labels, false)?.item())
}

/// Graph form of the rate cross-entropy; `mean` divides by the batch size.
pub fn ce_loss_graph(rates: &Value, labels: &[usize], mean: bool) -> Result<Value> {
    let shape = rates.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "ce_loss",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (b, c) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidParam(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut onehot = Array2::<f64>::zeros((b, c));
    for (i, &y) in labels.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    let target = rates.mul(&Value::constant(onehot.into_dyn()))?.row_sum()?;
    let log_t = target.log_clamped(RATE_FLOOR);
    let scale = if mean { -1.0 / b as f64 } else { -1.0 };
    Ok(log_t.sum().scale(scale))
}

/// Combined objective `ce + lambda * scl` on plain numbers.
pub fn total_loss(ce: f64, scl: f64, lambda: f64) -> f64 {
    ce + lambda * scl
}

/// Combined objective on the tape.
pub fn total_loss_graph(ce: &Value, scl: &Value, lambda: f64) -> Result<Value> {
    ce.add(&scl.scale(lambda))
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, finite_diff_check, Arr, FD_EPS};
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: the formula transcribed as three nested loops,
    /// sharing no code with the implementation under test.
    fn brute_force_scl(features: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
        let n = features.nrows();
        let mut z = Vec::with_capacity(n);
        let mut silent = vec![false; n];
        for i in 0..n {
            let row = features.row(i).to_owned();
            let norm = row.dot(&row).sqrt();
            if norm < 1e-12 {
                silent[i] = true;
                z.push(row);
            } else {
                z.push(&row / norm);
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            if silent[i] {
                continue;
            }
            let positives: Vec<usize> = (0..n)
                .filter(|&p| p != i && !silent[p] && labels[p] == labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            let mut term = 0.0;
            for &p in &positives {
                let num = (z[i].dot(&z[p]) / tau).exp();
                let mut den = 0.0;
                for a in 0..n {
                    if a != i && !silent[a] {
                        den += (z[i].dot(&z[a]) / tau).exp();
                    }
                }
                term += (num / den).ln();
            }
            total -= term / positives.len() as f64;
        }
        total
    }

    fn random_batch(seed: u64, n: usize, d: usize, classes: usize) -> ContrastiveBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        ContrastiveBatch::new(features, labels, 0.07).unwrap()
    }

    #[test]
    fn matches_brute_force_on_random_batches() {
        for seed in 0..20 {
            let batch = random_batch(seed, 8, 6, 3);
            let got = scl_loss(&batch).unwrap().loss;
            let want = brute_force_scl(&batch.features, &batch.labels, batch.tau);
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                "seed {seed}: got {got}, oracle {want}"
            );
        }
    }

    #[test]
    fn two_same_label_samples_give_exact_zero() {
        let batch = ContrastiveBatch::new(
            arr2(&[[0.3, 0.7, 0.1], [0.9, 0.2, 0.4]]),
            vec![1, 1],
            0.07,
        )
        .unwrap();
        let out = scl_loss(&batch).unwrap();
        // Each anchor's only candidate is its only positive: ratio 1, log 0.
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.active_anchors, 2);
    }

    #[test]
    fn no_positive_anchors_contribute_zero() {
        let batch = ContrastiveBatch::new(
            arr2(&[[0.3, 0.7], [0.9, 0.2]]),
            vec![0, 1],
            0.07,
        )
        .unwrap();
        let out = scl_loss(&batch).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.active_anchors, 0);
    }

    #[test]
    fn identical_features_hit_closed_form() {
        // B identical same-label rows: every ratio is 1/(B-1), so the loss
        // is B * ln(B-1).
        let b = 4;
        let features = Array2::from_elem((b, 5), 0.6);
        let batch = ContrastiveBatch::new(features, vec![2; b], 0.07).unwrap();
        let out = scl_loss(&batch).unwrap();
        let want = b as f64 * ((b - 1) as f64).ln();
        assert!((out.loss - want).abs() < 1e-10, "{} vs {want}", out.loss);
    }

    #[test]
    fn silent_row_is_excluded_everywhere() {
        let mut with_silent = random_batch(5, 6, 4, 2);
        with_silent.features.row_mut(3).fill(0.0);
        let out = scl_loss(&with_silent).unwrap();
        assert_eq!(
            out.excluded,
            vec![false, false, false, true, false, false]
        );
        // Removing the silent row entirely must give the identical loss.
        let keep: Vec<usize> = (0..6).filter(|&i| i != 3).collect();
        let reduced_features = Array2::from_shape_fn((5, 4), |(r, c)| {
            with_silent.features[[keep[r], c]]
        });
        let reduced_labels: Vec<usize> = keep.iter().map(|&i| with_silent.labels[i]).collect();
        let reduced = ContrastiveBatch::new(reduced_features, reduced_labels, 0.07).unwrap();
        let out2 = scl_loss(&reduced).unwrap();
        assert!((out.loss - out2.loss).abs() < 1e-12);
    }

    #[test]
    fn all_silent_batch_is_zero_not_nan() {
        let batch = ContrastiveBatch::new(Array2::zeros((3, 4)), vec![0, 0, 1], 0.07).unwrap();
        let out = scl_loss(&batch).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.excluded.iter().all(|&e| e));
        assert_eq!(out.active_anchors, 0);
    }

    #[test]
    fn rejects_undersized_batch_and_bad_tau() {
        let one = ContrastiveBatch::new(Array2::zeros((1, 4)), vec![0], 0.07).unwrap();
        assert!(matches!(scl_loss(&one), Err(Error::BatchTooSmall(1))));
        let bad_tau = ContrastiveBatch::new(Array2::zeros((2, 4)), vec![0, 1], 0.0).unwrap();
        assert!(scl_loss(&bad_tau).is_err());
    }

    #[test]
    fn mean_reduction_divides_by_contributing_anchors() {
        let batch = random_batch(9, 8, 5, 2);
        let sum = scl_loss_with(&batch, Reduction::Sum).unwrap();
        let mean = scl_loss_with(&batch, Reduction::MeanAnchors).unwrap();
        assert!(sum.active_anchors > 0);
        assert!(
            (mean.loss - sum.loss / sum.active_anchors as f64).abs() < 1e-12
        );
    }

    #[test]
    fn two_view_stacks_rows_and_labels() {
        let a = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = arr2(&[[0.9, 0.1], [0.1, 0.9]]);
        let batch = ContrastiveBatch::two_view(a.clone(), b.clone(), &[0, 1], 0.07).unwrap();
        assert_eq!(batch.features.nrows(), 4);
        assert_eq!(batch.labels, vec![0, 1, 0, 1]);
        let direct = ContrastiveBatch::new(
            ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).unwrap(),
            vec![0, 1, 0, 1],
            0.07,
        )
        .unwrap();
        assert_eq!(
            scl_loss(&batch).unwrap().loss,
            scl_loss(&direct).unwrap().loss
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let labels = vec![0usize, 1, 0, 1, 2];
        let f = move |v: &Value| Ok(scl_loss_graph(v, &labels, 0.07, Reduction::Sum)?.loss);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Arr::from_shape_fn(ndarray::IxDyn(&[5, 4]), |_| rng.random_range(0.2..1.0));
        let worst = finite_diff_check(&f, &x, FD_EPS).unwrap();
        assert!(worst <= 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn ce_loss_known_value_and_floor() {
        // Correct-class rate 0.2 for one sample: loss = -ln(0.2) ~ 1.6094.
        let rates = arr2(&[[0.2, 0.8]]);
        let loss = ce_loss(&rates, &[0]).unwrap();
        assert!((loss - 0.2f64.ln().abs()).abs() < 1e-12);
        // A zero rate is clamped rather than infinite.
        let zero = arr2(&[[0.0, 1.0]]);
        let clamped = ce_loss(&zero, &[0]).unwrap();
        assert!((clamped - -(RATE_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let labels = vec![1usize, 0, 1];
        let f = move |v: &Value| ce_loss_graph(v, &labels, true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Arr::from_shape_fn(ndarray::IxDyn(&[3, 2]), |_| rng.random_range(0.1..0.9));
        let worst = finite_diff_check(&f, &x, FD_EPS).unwrap();
        assert!(worst <= 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn combined_loss_weights_the_contrastive_term() {
        assert_eq!(total_loss(2.0, 3.0, 0.1), 2.3);
        let ce = Value::leaf(Arr::from_elem(ndarray::IxDyn(&[]), 2.0));
        let scl = Value::leaf(Arr::from_elem(ndarray::IxDyn(&[]), 3.0));
        let total = total_loss_graph(&ce, &scl, 0.1).unwrap();
        assert!((total.item() - 2.3).abs() < 1e-15);
        backward(&total).unwrap();
        assert_eq!(ce.grad().sum(), 1.0);
        assert!((scl.grad().sum() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn normalize_features_unit_norm_and_silence() {
        let (z, silent) = normalize_features(&ndarray::arr1(&[3.0, 4.0]));
        assert!(!silent);
        assert!((z.dot(&z) - 1.0).abs() < 1e-15);
        let (z0, silent0) = normalize_features(&ndarray::arr1(&[0.0, 0.0]));
        assert!(silent0);
        assert_eq!(z0.sum(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Loss is finite, non-negative, permutation-invariant and scale-
        /// invariant in the features.
        #[test]
        fn loss_invariants(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..9usize);
            let d = rng.random_range(2..6usize);
            let classes = rng.random_range(1..4usize);
            let features = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let batch = ContrastiveBatch::new(features.clone(), labels.clone(), 0.07).unwrap();
            let base = scl_loss(&batch).unwrap().loss;
            prop_assert!(base.is_finite());
            prop_assert!(base >= -1e-12);

            // Permutation invariance of the summed loss.
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let pf = Array2::from_shape_fn((n, d), |(r, c)| features[[perm[r], c]]);
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let permuted = scl_loss(&ContrastiveBatch::new(pf, pl, 0.07).unwrap()).unwrap().loss;
            prop_assert!((base - permuted).abs() <= 1e-9 * base.abs().max(1.0));

            // Positive rescaling of the features changes nothing.
            let scaled = scl_loss(&ContrastiveBatch::new(&features * 7.5, labels, 0.07).unwrap())
                .unwrap()
                .loss;
            prop_assert!((base - scaled).abs() <= 1e-9 * base.abs().max(1.0));
        }
    }
}
