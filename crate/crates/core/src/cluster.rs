//! Silhouette analysis of labelled feature vectors.
//!
//! For sample `i` with `a(i)` the mean Euclidean distance to the rest of its
//! own cluster and `b(i)` the smallest mean distance to any other cluster:
//!
//! ```text
//! s(i) = (b(i) - a(i)) / max(a(i), b(i))
//! ```
//!
//! Samples alone in their cluster score 0, as do fully coincident points
//! (`a = b = 0`). The overall score is the mean of `s(i)`; it needs at least
//! two distinct clusters to be defined. Scores map onto coarse quality
//! bands for reporting.

use std::io::Write;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest sample count analysed directly; bigger inputs are subsampled
/// with a seeded shuffle first.
pub const SUBSAMPLE_LIMIT: usize = 2000;

/// Coarse quality bands for a silhouette score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Band {
    /// Below 0.25: structure indistinguishable from noise.
    Weak,
    /// 0.25 to 0.5: some structure.
    Fair,
    /// 0.5 to 0.7: clear structure.
    Good,
    /// 0.7 and above: strong, well-separated structure.
    Excellent,
}

impl Band {
    pub fn name(&self) -> &'static str {
        match self {
            Band::Weak => "weak",
            Band::Fair => "fair",
            Band::Good => "good",
            Band::Excellent => "excellent",
        }
    }
}

/// Map a score to its band; scores outside `[-1, 1]` are rejected.
pub fn interpret(score: f64) -> Result<Band> {
    if !score.is_finite() || !(-1.0..=1.0).contains(&score) {
        return Err(Error::ScoreOutOfRange(score));
    }
    Ok(if score < 0.25 {
        Band::Weak
    } else if score < 0.5 {
        Band::Fair
    } else if score < 0.7 {
        Band::Good
    } else {
        Band::Excellent
    })
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn validate(features: &Array2<f64>, labels: &[usize]) -> Result<Vec<usize>> {
    if features.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "silhouette",
            lhs: vec![features.nrows(), features.ncols()],
            rhs: vec![labels.len()],
        });
    }
    if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "non-finite feature value {bad} in silhouette input"
        )));
    }
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max_label + 1];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::SingleCluster);
    }
    Ok(counts)
}

/// Per-sample silhouette values, in input order.
pub fn silhouette_samples(features: &Array2<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    let counts = validate(features, labels)?;
    let n = features.nrows();
    let num_clusters = counts.len();
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            if counts[labels[i]] == 1 {
                return 0.0;
            }
            // Sum of distances from i to every cluster.
            let mut sums = vec![0.0f64; num_clusters];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += euclidean(features.row(i), features.row(j));
                }
            }
            let own = labels[i];
            let a = sums[own] / (counts[own] - 1) as f64;
            let mut b = f64::INFINITY;
            for (c, &sum) in sums.iter().enumerate() {
                if c != own && counts[c] > 0 {
                    b = b.min(sum / counts[c] as f64);
                }
            }
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    Ok(values)
}

/// Mean silhouette over all samples.
pub fn silhouette_score(features: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let values = silhouette_samples(features, labels)?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Full analysis: overall score, band, and per-class means.
#[derive(Clone, Debug)]
pub struct SilhouetteReport {
    pub score: f64,
    pub band: Band,
    pub per_sample: Vec<f64>,
    /// `(class, mean silhouette, sample count)` for every class present,
    /// ascending by class.
    pub per_class: Vec<(usize, f64, usize)>,
    /// `true` when the input exceeded [`SUBSAMPLE_LIMIT`] and was thinned.
    pub subsampled: bool,
    /// Number of samples actually analysed.
    pub used: usize,
}

/// Analyse `features`, subsampling to [`SUBSAMPLE_LIMIT`] rows with the
/// given seed when the input is larger.
pub fn silhouette_report(
    features: &Array2<f64>,
    labels: &[usize],
    subsample_seed: u64,
) -> Result<SilhouetteReport> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let n = features.nrows();
    let (feat, labs, subsampled) = if n > SUBSAMPLE_LIMIT {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(subsample_seed);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(SUBSAMPLE_LIMIT);
        idx.sort_unstable();
        let feat = Array2::from_shape_fn((idx.len(), features.ncols()), |(r, c)| {
            features[[idx[r], c]]
        });
        let labs: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        (feat, labs, true)
    } else {
        (features.clone(), labels.to_vec(), false)
    };

    let per_sample = silhouette_samples(&feat, &labs)?;
    let score = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let band = interpret(score)?;

    let max_label = labs.iter().copied().max().unwrap_or(0);
    let mut sums = vec![0.0f64; max_label + 1];
    let mut counts = vec![0usize; max_label + 1];
    for (&l, &s) in labs.iter().zip(&per_sample) {
        sums[l] += s;
        counts[l] += 1;
    }
    let per_class = (0..=max_label)
        .filter(|&c| counts[c] > 0)
        .map(|c| (c, sums[c] / counts[c] as f64, counts[c]))
        .collect();

    Ok(SilhouetteReport {
        score,
        band,
        per_sample,
        per_class,
        subsampled,
        used: labs.len(),
    })
}

/// Write the per-class table as CSV with an overall summary row.
pub fn write_report_csv<W: Write>(writer: W, report: &SilhouetteReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["class", "count", "mean_silhouette", "band"])?;
    for &(class, mean, count) in &report.per_class {
        w.write_record([
            class.to_string(),
            count.to_string(),
            format!("{mean:.6}"),
            interpret(mean.clamp(-1.0, 1.0))?.name().to_string(),
        ])?;
    }
    w.write_record([
        "OVERALL".to_string(),
        report.used.to_string(),
        format!("{:.6}", report.score),
        report.band.name().to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Oracle: the definition transcribed as plain nested loops with no
    /// shared code, no parallelism and no cluster-sum trick.
    fn brute_force_silhouette(features: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
        let n = features.nrows();
        let dist = |i: usize, j: usize| -> f64 {
            let mut acc = 0.0;
            for d in 0..features.ncols() {
                let diff = features[[i, d]] - features[[j, d]];
                acc += diff * diff;
            }
            acc.sqrt()
        };
        (0..n)
            .map(|i| {
                let own: Vec<usize> = (0..n)
                    .filter(|&j| j != i && labels[j] == labels[i])
                    .collect();
                if own.is_empty() {
                    return 0.0;
                }
                let a = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
                let mut b = f64::INFINITY;
                let others: std::collections::BTreeSet<usize> = labels
                    .iter()
                    .copied()
                    .filter(|&l| l != labels[i])
                    .collect();
                for c in others {
                    let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                    let mean =
                        members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64;
                    b = b.min(mean);
                }
                if a.max(b) == 0.0 {
                    0.0
                } else {
                    (b - a) / a.max(b)
                }
            })
            .collect()
    }

    fn blobs(seed: u64, per_cluster: usize, clusters: usize, spread: f64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = per_cluster * clusters;
        let mut features = Array2::zeros((n, 3));
        let mut labels = Vec::with_capacity(n);
        for c in 0..clusters {
            let center = [c as f64 * 10.0, (c * c) as f64, -(c as f64)];
            for s in 0..per_cluster {
                let r = c * per_cluster + s;
                for d in 0..3 {
                    features[[r, d]] = center[d] + rng.random_range(-spread..spread);
                }
                labels.push(c);
            }
        }
        (features, labels)
    }

    #[test]
    fn matches_brute_force_on_random_data() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
            let n = rng.random_range(4..20usize);
            let features =
                Array2::from_shape_fn((n, 4), |_| rng.random_range(-2.0..2.0));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3usize)).collect();
            if labels.iter().collect::<std::collections::BTreeSet<_>>().len() < 2 {
                continue;
            }
            let got = silhouette_samples(&features, &labels).unwrap();
            let want = brute_force_silhouette(&features, &labels);
            for (i, (g, w)) in got.iter().zip(&want).enumerate() {
                assert!((g - w).abs() <= 1e-12, "seed {seed} sample {i}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn hand_computed_two_cluster_example() {
        // Cluster 0: (0,0), (0,1); cluster 1: (10,0), (10,1). For (0,0):
        // a = 1, b = (10 + sqrt(101)) / 2; all four points are symmetric.
        let features = arr2(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]);
        let labels = vec![0, 0, 1, 1];
        let b = (10.0 + 101.0f64.sqrt()) / 2.0;
        let want = (b - 1.0) / b;
        let score = silhouette_score(&features, &labels).unwrap();
        assert!((score - want).abs() < 1e-12, "{score} vs {want}");
    }

    #[test]
    fn singleton_cluster_scores_zero() {
        let features = arr2(&[[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]]);
        let labels = vec![0, 0, 1];
        let s = silhouette_samples(&features, &labels).unwrap();
        assert_eq!(s[2], 0.0);
        assert!(s[0] > 0.9 && s[1] > 0.9);
    }

    #[test]
    fn coincident_points_score_zero() {
        let features = Array2::zeros((4, 3));
        let labels = vec![0, 0, 1, 1];
        let s = silhouette_samples(&features, &labels).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cluster_is_an_error() {
        let features = arr2(&[[0.0], [1.0], [2.0]]);
        assert!(matches!(
            silhouette_score(&features, &[1, 1, 1]),
            Err(Error::SingleCluster)
        ));
    }

    #[test]
    fn separation_drives_the_score() {
        let (features, labels) = blobs(1, 20, 3, 0.5);
        let tight = silhouette_score(&features, &labels).unwrap();
        assert!(tight > 0.7, "tight blobs should score high: {tight}");
        // Shuffled labels destroy the structure.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shuffled: Vec<usize> = (0..labels.len()).map(|_| rng.random_range(0..3)).collect();
        let broken = silhouette_score(&features, &shuffled).unwrap();
        assert!(broken < tight - 0.4, "shuffled labels: {broken}");
    }

    #[test]
    fn bands_cover_the_documented_ranges() {
        assert_eq!(interpret(-0.3).unwrap(), Band::Weak);
        assert_eq!(interpret(0.0).unwrap(), Band::Weak);
        assert_eq!(interpret(0.25).unwrap(), Band::Fair);
        assert_eq!(interpret(0.49).unwrap(), Band::Fair);
        assert_eq!(interpret(0.5).unwrap(), Band::Good);
        assert_eq!(interpret(0.687).unwrap(), Band::Good);
        assert_eq!(interpret(0.7).unwrap(), Band::Excellent);
        assert_eq!(interpret(0.715).unwrap(), Band::Excellent);
        assert_eq!(interpret(1.0).unwrap(), Band::Excellent);
        assert!(matches!(
            interpret(1.01),
            Err(Error::ScoreOutOfRange(v)) if v == 1.01
        ));
        assert!(interpret(-1.01).is_err());
        assert!(interpret(f64::NAN).is_err());
    }

    #[test]
    fn large_inputs_are_subsampled_deterministically() {
        let (features, labels) = blobs(3, 1100, 2, 1.0);
        assert!(features.nrows() > SUBSAMPLE_LIMIT);
        let r1 = silhouette_report(&features, &labels, 7).unwrap();
        let r2 = silhouette_report(&features, &labels, 7).unwrap();
        assert!(r1.subsampled);
        assert_eq!(r1.used, SUBSAMPLE_LIMIT);
        assert_eq!(r1.score, r2.score);
        // Small inputs pass through untouched.
        let (small_f, small_l) = blobs(4, 10, 2, 1.0);
        let r3 = silhouette_report(&small_f, &small_l, 7).unwrap();
        assert!(!r3.subsampled);
        assert_eq!(r3.used, 20);
    }

    #[test]
    fn report_aggregates_per_class() {
        let (features, labels) = blobs(5, 15, 3, 0.5);
        let report = silhouette_report(&features, &labels, 0).unwrap();
        assert_eq!(report.per_class.len(), 3);
        for &(c, mean, count) in &report.per_class {
            assert!(c < 3);
            assert_eq!(count, 15);
            assert!((-1.0..=1.0).contains(&mean));
        }
        let weighted: f64 = report
            .per_class
            .iter()
            .map(|&(_, m, n)| m * n as f64)
            .sum::<f64>()
            / report.used as f64;
        assert!((weighted - report.score).abs() < 1e-12);
    }

    #[test]
    fn csv_report_round_trips() {
        let (features, labels) = blobs(6, 10, 2, 0.5);
        let report = silhouette_report(&features, &labels, 0).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &report).unwrap();
        let mut reader = csv::Reader::from_reader(buf.as_slice());
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 3); // two classes + overall
        assert_eq!(&rows[2][0], "OVERALL");
        let parsed: f64 = rows[2][2].parse().unwrap();
        assert!((parsed - report.score).abs() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Every silhouette value and the mean live in [-1, 1].
        #[test]
        fn scores_are_bounded(seed in 0u64..4000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..16usize);
            let features = Array2::from_shape_fn((n, 2), |_| rng.random_range(-3.0..3.0));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4usize)).collect();
            let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
            prop_assume!(distinct >= 2);
            let samples = silhouette_samples(&features, &labels).unwrap();
            for s in &samples {
                prop_assert!((-1.0..=1.0).contains(s), "sample score {s}");
            }
            let score = silhouette_score(&features, &labels).unwrap();
            prop_assert!((-1.0..=1.0).contains(&score));
            prop_assert!(interpret(score).is_ok());
        }
    }
}
