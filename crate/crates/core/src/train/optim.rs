//! Optimisation primitives: Adam with decoupled weight decay, cosine
//! annealing, global-norm gradient clipping, and the patience rule.

use ndarray::Zip;

use crate::autodiff::Arr;
use crate::error::{Error, Result};
use crate::snn::ParamTensor;

/// Learning rate at epoch `t` of a cosine annealing schedule:
/// `lr_min + 1/2 (lr_max - lr_min)(1 + cos(pi t / t_max))`, clamped to
/// `lr_min` past `t_max`.
pub fn cosine_lr(t: usize, t_max: usize, lr_max: f64, lr_min: f64) -> f64 {
    if t_max == 0 || t >= t_max {
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t as f64 / t_max as f64).cos())
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Arr], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Patience rule on a per-epoch validation history: stop once the best
/// epoch lies more than `patience` epochs in the past. With the best at
/// epoch 3, epoch 9 stops (6 > 5) and epoch 8 does not (5 > 5 is false).
pub fn early_stop(val_history: &[f64], patience: usize) -> bool {
    let mut best = match val_history.first() {
        Some(&v) => (0usize, v),
        None => return false,
    };
    for (i, &v) in val_history.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    val_history.len() - 1 - best.0 > patience
}

/// Adam hyperparameters. Weight decay is decoupled: applied directly to the
/// parameters as `p -= lr * weight_decay * p`, not folded into the gradient.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam state over a fixed list of tensors (first and second moments plus
/// the shared step counter).
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamParams,
    t: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(cfg: AdamParams, tensors: &[&ParamTensor]) -> Self {
        let m = tensors.iter().map(|p| Arr::zeros(p.data.raw_dim())).collect();
        let v = tensors.iter().map(|p| Arr::zeros(p.data.raw_dim())).collect();
        Self { cfg, t: 0, m, v }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of every tensor at learning rate `lr`.
    pub fn step(
        &mut self,
        params: &mut [&mut ParamTensor],
        grads: &[Arr],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidParam(format!(
                "optimizer built for {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if g.shape() != p.data.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.data.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let eps = self.cfg.eps;
            let wd = self.cfg.weight_decay;
            p.update(|data| {
                Zip::from(data)
                    .and(&mut *m)
                    .and(&mut *v)
                    .and(g)
                    .for_each(|p, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps) + lr * wd * *p;
                    });
            });
        }
        Ok(())
    }
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_hits_the_three_anchor_points() {
        assert_eq!(cosine_lr(0, 30, 1e-3, 0.0), 1e-3);
        assert!((cosine_lr(15, 30, 1e-3, 0.0) - 5e-4).abs() < 1e-18);
        assert_eq!(cosine_lr(30, 30, 1e-3, 0.0), 0.0);
        // Past t_max the rate clamps instead of rising again.
        assert_eq!(cosine_lr(31, 30, 1e-3, 1e-5), 1e-5);
        assert_eq!(cosine_lr(100, 30, 1e-3, 1e-5), 1e-5);
        // Nonzero floor shifts both ends.
        assert_eq!(cosine_lr(0, 10, 1e-3, 1e-4), 1e-3);
        assert!((cosine_lr(5, 10, 1e-3, 1e-4) - 5.5e-4).abs() < 1e-18);
    }

    #[test]
    fn clipping_rescales_to_the_documented_example() {
        let mut grads = vec![ndarray::arr1(&[3.0, 4.0]).into_dyn()];
        let norm = clip_gradients(&mut grads, 1.0);
        assert_eq!(norm, 5.0);
        assert!((grads[0][[0]] - 0.6).abs() < 1e-15);
        assert!((grads[0][[1]] - 0.8).abs() < 1e-15);

        let mut small = vec![ndarray::arr1(&[0.3, 0.4]).into_dyn()];
        let n2 = clip_gradients(&mut small, 1.0);
        assert_eq!(n2, 0.5);
        assert_eq!(small[0], ndarray::arr1(&[0.3, 0.4]).into_dyn());
    }

    #[test]
    fn early_stop_boundary_cases() {
        // Improving every epoch: never stops.
        assert!(!early_stop(&[0.1, 0.2, 0.3, 0.4], 2));
        // Best at epoch 3, currently epoch 9: stop.
        let mut h = vec![0.1, 0.2, 0.9];
        h.push(0.9); // epoch 3 first reaches the best value below
        let hist = [0.1, 0.2, 0.5, 0.9, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8];
        assert!(early_stop(&hist, 5));
        // Same best, currently epoch 8: do not stop (boundary).
        assert!(!early_stop(&hist[..9], 5));
        // Ties do not count as improvements: best stays at its first index.
        let flat = [0.5, 0.5, 0.5, 0.5];
        assert!(early_stop(&flat, 2));
        assert!(!early_stop(&flat[..3], 2));
        assert!(!early_stop(&[], 5));
        let _ = h;
    }

    fn scalar_param(v: f64) -> ParamTensor {
        ParamTensor::new("p", ndarray::arr1(&[v]).into_dyn())
    }

    #[test]
    fn zero_gradients_and_zero_decay_leave_params_unchanged() {
        let mut p = scalar_param(0.7);
        let mut adam = Adam::new(AdamParams::default(), &[&p]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Arr::zeros(IxDyn(&[1]))], 1e-3).unwrap();
        }
        assert_eq!(p.data[[0]], 0.7);
    }

    #[test]
    fn constant_gradient_step_size_approaches_lr() {
        // With a constant gradient, m_hat -> g and v_hat -> g^2, so the step
        // approaches lr * sign(g).
        let mut p = scalar_param(0.0);
        let mut adam = Adam::new(AdamParams::default(), &[&p]);
        let g = ndarray::arr1(&[0.37]).into_dyn();
        let lr = 1e-3;
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..1000 {
            adam.step(&mut [&mut p], &[g.clone()], lr).unwrap();
            last_step = prev - p.data[[0]];
            prev = p.data[[0]];
        }
        assert!(
            (last_step - lr).abs() <= 0.01 * lr,
            "step {last_step} should be within 1% of {lr}"
        );
    }

    #[test]
    fn decay_only_shrinks_by_the_exact_factor() {
        let mut p = scalar_param(2.0);
        let cfg = AdamParams {
            weight_decay: 1e-4,
            ..AdamParams::default()
        };
        let mut adam = Adam::new(cfg, &[&p]);
        let mut expect = 2.0;
        for _ in 0..3 {
            adam.step(&mut [&mut p], &[Arr::zeros(IxDyn(&[1]))], 1e-3).unwrap();
            expect -= 1e-3 * 1e-4 * expect;
            assert_eq!(p.data[[0]], expect);
        }
    }

    #[test]
    fn rejects_mismatched_shapes_and_counts() {
        let mut p = scalar_param(1.0);
        let mut adam = Adam::new(AdamParams::default(), &[&p]);
        assert!(adam.step(&mut [&mut p], &[], 1e-3).is_err());
        let wrong = Arr::zeros(IxDyn(&[2]));
        assert!(adam.step(&mut [&mut p], &[wrong], 1e-3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// After clipping, the global norm never exceeds the bound.
        #[test]
        fn post_clip_norm_is_bounded(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut grads: Vec<Arr> = (0..rng.random_range(1..4usize))
                .map(|_| {
                    let n = rng.random_range(1..6usize);
                    Arr::from_shape_fn(IxDyn(&[n]), |_| rng.random_range(-10.0..10.0))
                })
                .collect();
            clip_gradients(&mut grads, 1.0);
            let norm = grads
                .iter()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            prop_assert!(norm <= 1.0 + 1e-12, "norm {norm}");
        }
    }
}
