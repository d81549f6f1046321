//! SGD with classical momentum, weight decay and an epoch-keyed learning-rate
//! schedule.

use crate::scalar::Scalar;

/// Hyperparameters for the optimizer. `schedule` holds `(epoch, multiplier)`
/// pairs; at the start of the named epoch the base learning rate is multiplied
/// once by the factor.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: Vec<(usize, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            schedule: Vec::new(),
        }
    }
}

impl SgdConfig {
    /// Effective learning rate at the given epoch: base rate times every
    /// schedule multiplier whose epoch has been reached.
    pub fn rate_at_epoch(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        for &(e, mult) in &self.schedule {
            if epoch >= e {
                lr *= mult;
            }
        }
        lr
    }
}

/// One parameter tensor with its velocity buffer and decay flag. Normalized
/// epitome weights opt out of weight decay.
#[derive(Debug, Clone)]
pub struct ParamState<F: Scalar> {
    pub velocity: Vec<F>,
    pub decay_enabled: bool,
}

impl<F: Scalar> ParamState<F> {
    pub fn new(len: usize, decay_enabled: bool) -> Self {
        ParamState {
            velocity: vec![F::zero(); len],
            decay_enabled,
        }
    }
}

/// v <- momentum * v - lr * (g + wd * w); w <- w + v. Weight decay is skipped
/// when the group opts out.
pub fn sgd_step<F: Scalar>(
    weights: &mut [F],
    grads: &[F],
    state: &mut ParamState<F>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(weights.len(), grads.len());
    debug_assert_eq!(weights.len(), state.velocity.len());
    let lr = F::from_f64(lr);
    let momentum = F::from_f64(momentum);
    let wd = if state.decay_enabled {
        F::from_f64(weight_decay)
    } else {
        F::zero()
    };
    for ((w, &g), v) in weights
        .iter_mut()
        .zip(grads.iter())
        .zip(state.velocity.iter_mut())
    {
        *v = momentum * *v - lr * (g + wd * *w);
        *w = *w + *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_hand_values() {
        // w=1, g=0.1, lr=0.01, momentum=0.9, wd=0, v=0:
        // v = -0.001, w = 0.999.
        let mut w = vec![1.0f64];
        let mut st = ParamState::new(1, true);
        sgd_step(&mut w, &[0.1], &mut st, 0.01, 0.9, 0.0);
        assert!((st.velocity[0] + 0.001).abs() < 1e-15);
        assert!((w[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        // Second step with same gradient: v = 0.9*(-0.001) - 0.001 = -0.0019.
        let mut w = vec![1.0f64];
        let mut st = ParamState::new(1, true);
        sgd_step(&mut w, &[0.1], &mut st, 0.01, 0.9, 0.0);
        sgd_step(&mut w, &[0.1], &mut st, 0.01, 0.9, 0.0);
        assert!((st.velocity[0] + 0.0019).abs() < 1e-15);
        assert!((w[0] - (0.999 - 0.0019)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        // Zero gradient, wd=0.1: v = -0.01*0.1*1 = -0.001.
        let mut w = vec![1.0f64];
        let mut st = ParamState::new(1, true);
        sgd_step(&mut w, &[0.0], &mut st, 0.01, 0.0, 0.1);
        assert!((w[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn decay_disabled_ignores_weight_decay() {
        let mut w = vec![1.0f64];
        let mut st = ParamState::new(1, false);
        sgd_step(&mut w, &[0.0], &mut st, 0.01, 0.0, 0.1);
        assert_eq!(w[0], 1.0);
        assert_eq!(st.velocity[0], 0.0);
    }

    #[test]
    fn schedule_multipliers_compound() {
        let cfg = SgdConfig {
            learning_rate: 0.01,
            schedule: vec![(10, 0.1), (20, 0.1)],
            ..SgdConfig::default()
        };
        assert_eq!(cfg.rate_at_epoch(0), 0.01);
        assert_eq!(cfg.rate_at_epoch(9), 0.01);
        assert!((cfg.rate_at_epoch(10) - 0.001).abs() < 1e-15);
        assert!((cfg.rate_at_epoch(25) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn f32_step_is_deterministic() {
        let grads: Vec<f32> = (0..64).map(|i| (i as f32 - 32.0) * 0.01).collect();
        let run = || {
            let mut w: Vec<f32> = (0..64).map(|i| i as f32 * 0.1).collect();
            let mut st = ParamState::new(64, true);
            for _ in 0..10 {
                sgd_step(&mut w, &grads, &mut st, 0.01, 0.9, 5e-4);
            }
            w
        };
        let a = run();
        let b = run();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
