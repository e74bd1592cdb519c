//! Discrete Hopfield associative memory over bipolar (±1) patterns.
//!
//! Storage is Hebbian with the self-connections removed:
//!
//! ```text
//! W = sum_k xi_k xi_k^T - P * I
//! ```
//!
//! Retrieval applies synchronous updates `h <- sign(W h)` (with
//! `sign(0) = +1`) for at most [`MAX_SYNC_STEPS`] steps, stopping early once
//! the state is a fixed point. The network energy `E(h) = -1/2 h^T W h` is
//! recorded after every step; for probes inside a stored pattern's basin
//! (the operating regime here — lightly corrupted prototypes) the sequence
//! is non-increasing, and a one-bit corruption of a single stored pattern is
//! repaired in one step.
//!
//! The memory also doubles as a differentiable layer: spike vectors are
//! binarized by a median split, cleaned up by retrieval, mapped back to
//! {0,1}, and gradients pass straight through to the input.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::autodiff::{Arr, Value};
use crate::error::{Error, Result};

/// Cap on synchronous update steps during retrieval.
pub const MAX_SYNC_STEPS: usize = 5;

/// Sign with the tie broken upward: `sign_pm(0) = +1`.
#[inline]
pub fn sign_pm(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Everything observed during one retrieval.
#[derive(Clone, Debug)]
pub struct RetrievalTrace {
    /// Final state after the loop.
    pub state: Array1<f64>,
    /// Energy of the initial probe followed by the energy after each update.
    pub energies: Vec<f64>,
    /// Number of synchronous updates actually applied.
    pub steps: usize,
    /// `true` when a fixed point was confirmed within the step budget.
    pub converged: bool,
    /// `true` when the memory was empty and the probe passed through.
    pub used_identity: bool,
}

/// Hebbian associative memory with a fixed state dimension.
#[derive(Clone, Debug)]
pub struct HopfieldMemory {
    dim: usize,
    patterns: Vec<Array1<f64>>,
    weights: Array2<f64>,
}

impl HopfieldMemory {
    /// An empty memory for `dim`-bit states; retrieval is the identity until
    /// a pattern is stored.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            patterns: Vec::new(),
            weights: Array2::zeros((dim, dim)),
        }
    }

    /// Build a memory holding `patterns`, all of the same dimension.
    pub fn from_patterns(patterns: &[Array1<f64>]) -> Result<Self> {
        let dim = patterns.first().map_or(0, Array1::len);
        let mut mem = Self::new(dim);
        for p in patterns {
            mem.store(p)?;
        }
        Ok(mem)
    }

    /// Reassemble a memory from stored patterns and a weight matrix, as read
    /// back from a checkpoint. The weights must match what [`store`](Self::store)
    /// would have built from the same patterns.
    pub fn from_parts(dim: usize, patterns: Vec<Array1<f64>>, weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() != dim || weights.ncols() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: weights.nrows().max(weights.ncols()),
            });
        }
        let mem = Self::new(dim);
        for p in &patterns {
            mem.check_state(&p.view())?;
        }
        Ok(Self {
            dim,
            patterns,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn patterns(&self) -> &[Array1<f64>] {
        &self.patterns
    }

    /// Forget all stored patterns.
    pub fn clear(&mut self) {
        self.patterns.clear();
        self.weights.fill(0.0);
    }

    fn check_state(&self, v: &ArrayView1<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if let Some(&bad) = v.iter().find(|&&x| x != 1.0 && x != -1.0) {
            return Err(Error::NonBipolar(bad));
        }
        Ok(())
    }

    /// Add one pattern: `W += xi xi^T - I`.
    pub fn store(&mut self, pattern: &Array1<f64>) -> Result<()> {
        self.check_state(&pattern.view())?;
        for i in 0..self.dim {
            for j in 0..self.dim {
                if i != j {
                    self.weights[[i, j]] += pattern[i] * pattern[j];
                }
            }
        }
        self.patterns.push(pattern.clone());
        Ok(())
    }

    /// Network energy of a bipolar state.
    pub fn energy(&self, state: &Array1<f64>) -> Result<f64> {
        self.check_state(&state.view())?;
        Ok(-0.5 * state.dot(&self.weights.dot(state)))
    }

    /// Retrieve the final state only.
    pub fn retrieve(&self, probe: &Array1<f64>) -> Result<Array1<f64>> {
        Ok(self.hopfield_update(probe)?.state)
    }

    /// Run the synchronous update loop, recording energies along the way.
    pub fn hopfield_update(&self, probe: &Array1<f64>) -> Result<RetrievalTrace> {
        self.check_state(&probe.view())?;
        if self.is_empty() {
            return Ok(RetrievalTrace {
                state: probe.clone(),
                energies: vec![0.0],
                steps: 0,
                converged: true,
                used_identity: true,
            });
        }
        let mut state = probe.clone();
        let mut energies = vec![-0.5 * state.dot(&self.weights.dot(&state))];
        let mut steps = 0;
        let mut converged = false;
        for _ in 0..MAX_SYNC_STEPS {
            let next = self.weights.dot(&state).mapv(sign_pm);
            if next == state {
                converged = true;
                break;
            }
            state = next;
            steps += 1;
            energies.push(-0.5 * state.dot(&self.weights.dot(&state)));
        }
        Ok(RetrievalTrace {
            state,
            energies,
            steps,
            converged,
            used_identity: false,
        })
    }

    /// Retrieve every row of `probes` at once. Equivalent to calling
    /// [`retrieve`](Self::retrieve) per row, but batches the matrix products.
    pub fn retrieve_batch(&self, probes: &Array2<f64>) -> Result<Array2<f64>> {
        for row in probes.rows() {
            self.check_state(&row)?;
        }
        if self.is_empty() {
            return Ok(probes.clone());
        }
        let rows = probes.nrows();
        let mut state = probes.clone();
        let mut done = vec![false; rows];
        for _ in 0..MAX_SYNC_STEPS {
            if done.iter().all(|&d| d) {
                break;
            }
            // W is symmetric, so row-wise `W h` is `state . W`.
            let product = state.dot(&self.weights);
            for r in 0..rows {
                if done[r] {
                    continue;
                }
                let next = product.row(r).mapv(sign_pm);
                if next == state.row(r) {
                    done[r] = true;
                } else {
                    state.row_mut(r).assign(&next);
                }
            }
        }
        Ok(state)
    }
}

/// Median of a non-empty slice: the middle element, or the mean of the two
/// middle elements for even lengths.
fn median(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut buf = values.to_vec();
    let mid = buf.len() / 2;
    let (lo, pivot, _) = buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if values.len() % 2 == 1 {
        *pivot
    } else {
        let lo_max = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo_max + *pivot)
    }
}

/// Median-split binarisation: strictly above the median maps to `+1`,
/// everything else to `-1`. A constant vector therefore maps to all `-1`.
pub fn binarize_median(v: ArrayView1<f64>) -> Array1<f64> {
    if v.is_empty() {
        return Array1::zeros(0);
    }
    let vals: Vec<f64> = v.iter().copied().collect();
    let m = median(&vals);
    v.mapv(|x| if x > m { 1.0 } else { -1.0 })
}

/// Per-class mean feature vectors, binarised into bipolar prototypes.
/// Classes absent from `labels` are skipped; the result pairs each pattern
/// with its class index.
pub fn prototype_patterns(
    features: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<(usize, Array1<f64>)>> {
    if features.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "prototype_patterns",
            lhs: vec![features.nrows(), features.ncols()],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidParam(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let dim = features.ncols();
    let mut sums = Array2::<f64>::zeros((num_classes, dim));
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in features.rows().into_iter().zip(labels) {
        let mut acc = sums.row_mut(y);
        acc += &row;
        counts[y] += 1;
    }
    let mut out = Vec::new();
    for c in 0..num_classes {
        if counts[c] == 0 {
            continue;
        }
        let mean = sums.row(c).mapv(|s| s / counts[c] as f64);
        out.push((c, binarize_median(mean.view())));
    }
    Ok(out)
}

impl HopfieldMemory {
    /// Replace the stored patterns with fresh class prototypes built from
    /// `features`; returns how many patterns were stored.
    pub fn refresh_from_prototypes(
        &mut self,
        features: &Array2<f64>,
        labels: &[usize],
        num_classes: usize,
    ) -> Result<usize> {
        if features.ncols() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: features.ncols(),
            });
        }
        let protos = prototype_patterns(features, labels, num_classes)?;
        self.clear();
        let stored = protos.len();
        for (_, p) in protos {
            self.store(&p)?;
        }
        Ok(stored)
    }
}

/// Differentiable clean-up layer over spike rows.
///
/// Each row of `spikes` (values in {0,1}) is binarised by median split,
/// passed through retrieval, and mapped back to {0,1} via `(h + 1) / 2`.
/// Gradients flow straight through to `spikes` unchanged. With an empty
/// memory the layer is an exact identity; the returned flag reports that.
pub fn hopfield_layer_graph(memory: &HopfieldMemory, spikes: &Value) -> Result<(Value, bool)> {
    let shape = spikes.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "hopfield_layer",
            lhs: shape.to_vec(),
            rhs: vec![memory.dim()],
        });
    }
    if memory.is_empty() {
        let replacement = spikes.data().clone();
        return Ok((spikes.straight_through(replacement)?, true));
    }
    if shape[1] != memory.dim() {
        return Err(Error::DimMismatch {
            expected: memory.dim(),
            got: shape[1],
        });
    }
    let data = spikes.data();
    let rows = data
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("checked 2-D");
    let mut probes = Array2::<f64>::zeros(rows.dim());
    for (mut dst, src) in probes.rows_mut().into_iter().zip(rows.rows()) {
        dst.assign(&binarize_median(src));
    }
    let cleaned = memory.retrieve_batch(&probes)?;
    let replacement: Arr = cleaned.mapv(|h| 0.5 * (h + 1.0)).into_dyn();
    Ok((spikes.straight_through(replacement)?, false))
}

/// Mean over axis 0, as a plain helper for prototype building from stacked
/// per-sample features.
pub fn mean_rows(features: &Array2<f64>) -> Array1<f64> {
    features
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(features.ncols()))
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pattern(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
    }

    /// Oracle: the storage rule written out as an explicit double loop over
    /// index pairs, independent of the incremental update in `store`.
    fn hand_built_weights(patterns: &[Array1<f64>]) -> Array2<f64> {
        let n = patterns[0].len();
        let mut w = Array2::<f64>::zeros((n, n));
        for p in patterns {
            for i in 0..n {
                for j in 0..n {
                    w[[i, j]] += p[i] * p[j];
                }
            }
        }
        for i in 0..n {
            w[[i, i]] -= patterns.len() as f64;
        }
        w
    }

    #[test]
    fn weights_match_hand_build_and_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patterns: Vec<_> = (0..3).map(|_| random_pattern(&mut rng, 12)).collect();
        let mem = HopfieldMemory::from_patterns(&patterns).unwrap();
        assert_eq!(mem.weights(), &hand_built_weights(&patterns));
        for i in 0..12 {
            assert_eq!(mem.weights()[[i, i]], 0.0);
            for j in 0..12 {
                assert_eq!(mem.weights()[[i, j]], mem.weights()[[j, i]]);
            }
        }
    }

    #[test]
    fn stored_pattern_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xi = random_pattern(&mut rng, 24);
        let mem = HopfieldMemory::from_patterns(std::slice::from_ref(&xi)).unwrap();
        let trace = mem.hopfield_update(&xi).unwrap();
        assert_eq!(trace.state, xi);
        assert_eq!(trace.steps, 0);
        assert!(trace.converged);
        assert!(!trace.used_identity);
    }

    #[test]
    fn one_bit_corruption_restored_in_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xi = random_pattern(&mut rng, 32);
        let mem = HopfieldMemory::from_patterns(std::slice::from_ref(&xi)).unwrap();
        for flip in [0, 7, 31] {
            let mut probe = xi.clone();
            probe[flip] = -probe[flip];
            let trace = mem.hopfield_update(&probe).unwrap();
            assert_eq!(trace.state, xi, "bit {flip} not repaired");
            assert_eq!(trace.steps, 1);
            assert!(trace.converged);
            assert!(
                trace.energies[1] < trace.energies[0],
                "energy must strictly drop: {:?}",
                trace.energies
            );
        }
    }

    #[test]
    fn energy_matches_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patterns: Vec<_> = (0..2).map(|_| random_pattern(&mut rng, 10)).collect();
        let mem = HopfieldMemory::from_patterns(&patterns).unwrap();
        let h = random_pattern(&mut rng, 10);
        let mut want = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                want -= 0.5 * h[i] * mem.weights()[[i, j]] * h[j];
            }
        }
        assert!((mem.energy(&h).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn sign_antisymmetry_for_odd_pattern_counts() {
        // With an odd pattern count and even dimension every pre-activation
        // is a sum of an odd number of odd integers, hence never zero, so
        // the tie-break cannot break the symmetry retrieve(-h) = -retrieve(h).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patterns: Vec<_> = (0..3).map(|_| random_pattern(&mut rng, 16)).collect();
        let mem = HopfieldMemory::from_patterns(&patterns).unwrap();
        for _ in 0..25 {
            let h = random_pattern(&mut rng, 16);
            let pos = mem.retrieve(&h).unwrap();
            let neg = mem.retrieve(&h.mapv(|x| -x)).unwrap();
            assert_eq!(neg, pos.mapv(|x| -x));
        }
    }

    #[test]
    fn empty_memory_is_identity_with_flag() {
        let mem = HopfieldMemory::new(8);
        let probe = arr1(&[1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0]);
        let trace = mem.hopfield_update(&probe).unwrap();
        assert!(trace.used_identity);
        assert_eq!(trace.state, probe);
        assert_eq!(trace.steps, 0);
        assert_eq!(trace.energies, vec![0.0]);
    }

    #[test]
    fn rejects_non_bipolar_and_wrong_dimension() {
        let mut mem = HopfieldMemory::new(4);
        let bad = arr1(&[1.0, -1.0, 0.5, 1.0]);
        assert!(matches!(mem.store(&bad), Err(Error::NonBipolar(v)) if v == 0.5));
        let short = arr1(&[1.0, -1.0]);
        assert!(matches!(
            mem.store(&short),
            Err(Error::DimMismatch {
                expected: 4,
                got: 2
            })
        ));
    }

    #[test]
    fn two_cycle_hits_the_step_cap_with_flat_energy() {
        // A probe orthogonal to the single stored pattern gives W h = -h,
        // a pure two-cycle: the loop must stop at the cap, not spin.
        let xi = arr1(&[1.0, 1.0, -1.0, -1.0]);
        let orth = arr1(&[1.0, -1.0, 1.0, -1.0]);
        let mem = HopfieldMemory::from_patterns(std::slice::from_ref(&xi)).unwrap();
        let trace = mem.hopfield_update(&orth).unwrap();
        assert_eq!(trace.steps, MAX_SYNC_STEPS);
        assert!(!trace.converged);
        for w in trace.energies.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_retrieval_matches_per_row_retrieval() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let patterns: Vec<_> = (0..3).map(|_| random_pattern(&mut rng, 20)).collect();
        let mem = HopfieldMemory::from_patterns(&patterns).unwrap();
        let probes = Array2::from_shape_fn((9, 20), |_| {
            if rng.random_bool(0.5) {
                1.0
            } else {
                -1.0
            }
        });
        let batch = mem.retrieve_batch(&probes).unwrap();
        for (r, row) in probes.rows().into_iter().enumerate() {
            let single = mem.retrieve(&row.to_owned()).unwrap();
            assert_eq!(batch.row(r), single.view(), "row {r} differs");
        }
    }

    #[test]
    fn binarize_median_splits_above_median() {
        assert_eq!(
            binarize_median(arr1(&[3.0, 1.0, 2.0]).view()),
            arr1(&[1.0, -1.0, -1.0])
        );
        // Even length: median is the mean of the two middle values.
        assert_eq!(
            binarize_median(arr1(&[1.0, 2.0, 3.0, 4.0]).view()),
            arr1(&[-1.0, -1.0, 1.0, 1.0])
        );
        // Constant input: nothing is above the median.
        assert_eq!(
            binarize_median(arr1(&[5.0, 5.0, 5.0]).view()),
            arr1(&[-1.0, -1.0, -1.0])
        );
    }

    #[test]
    fn prototypes_are_binarized_class_means() {
        let features = arr2(&[
            [0.9, 0.1, 0.5, 0.0],
            [0.7, 0.3, 0.5, 0.0],
            [0.0, 0.8, 0.1, 0.6],
        ]);
        let labels = vec![0, 0, 2];
        let protos = prototype_patterns(&features, &labels, 3).unwrap();
        assert_eq!(protos.len(), 2);
        // Class 0 mean = [0.8, 0.2, 0.5, 0.0], median 0.35.
        assert_eq!(protos[0].0, 0);
        assert_eq!(protos[0].1, arr1(&[1.0, -1.0, 1.0, -1.0]));
        // Class 2 is the single row [0.0, 0.8, 0.1, 0.6], median 0.35.
        assert_eq!(protos[1].0, 2);
        assert_eq!(protos[1].1, arr1(&[-1.0, 1.0, -1.0, 1.0]));
        // Class 1 had no samples and is skipped.
        assert!(protos.iter().all(|(c, _)| *c != 1));
    }

    #[test]
    fn refresh_replaces_patterns() {
        let mut mem = HopfieldMemory::new(4);
        mem.store(&arr1(&[1.0, 1.0, 1.0, -1.0])).unwrap();
        let features = arr2(&[[0.9, 0.1, 0.5, 0.0], [0.0, 0.8, 0.1, 0.6]]);
        let stored = mem
            .refresh_from_prototypes(&features, &[0, 1], 2)
            .unwrap();
        assert_eq!(stored, 2);
        assert_eq!(mem.len(), 2);
    }

    #[test]
    fn layer_graph_with_empty_memory_is_exact_identity() {
        let mem = HopfieldMemory::new(6);
        let spikes = Value::leaf(
            arr2(&[
                [1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            ])
            .into_dyn(),
        );
        let (out, identity) = hopfield_layer_graph(&mem, &spikes).unwrap();
        assert!(identity);
        assert_eq!(out.data().as_slice().unwrap(), spikes.data().as_slice().unwrap());
        // Straight-through: gradient of sum reaches the input unchanged.
        backward(&out.sum()).unwrap();
        assert!(spikes.grad().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn layer_graph_cleans_a_corrupted_spike_row() {
        // A minority-ones spike row binarises to 2s - 1; store that pattern
        // and check a one-bit-corrupted row is mapped back to the clean row.
        let clean = arr1(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let xi = clean.mapv(|s| 2.0 * s - 1.0);
        let mem = HopfieldMemory::from_patterns(std::slice::from_ref(&xi)).unwrap();
        let mut corrupted = clean.clone();
        corrupted[1] = 1.0; // extra spurious spike, ones still a minority
        let spikes = Value::leaf(
            corrupted
                .clone()
                .insert_axis(Axis(0))
                .into_dyn(),
        );
        let (out, identity) = hopfield_layer_graph(&mem, &spikes).unwrap();
        assert!(!identity);
        let got = out.data();
        assert_eq!(
            got.as_slice().unwrap(),
            clean.as_slice().unwrap(),
            "clean-up failed"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Lightly corrupted prototypes retrieve with non-increasing energy,
        /// and retrieval output is always exactly bipolar.
        #[test]
        fn basin_probes_have_monotone_energy(seed in 0u64..4000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 33;
            let p = rng.random_range(1..4usize);
            let patterns: Vec<_> = (0..p).map(|_| random_pattern(&mut rng, n)).collect();
            let mem = HopfieldMemory::from_patterns(&patterns).unwrap();
            let mut probe = patterns[rng.random_range(0..p)].clone();
            for _ in 0..rng.random_range(0..=n / 8) {
                let k = rng.random_range(0..n);
                probe[k] = -probe[k];
            }
            let trace = mem.hopfield_update(&probe).unwrap();
            for w in trace.energies.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9, "energy rose: {:?}", trace.energies);
            }
            prop_assert!(trace.state.iter().all(|&x| x == 1.0 || x == -1.0));
            prop_assert!(trace.steps <= MAX_SYNC_STEPS);
        }
    }
}
