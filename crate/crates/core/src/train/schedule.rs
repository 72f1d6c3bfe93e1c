use super::TrainConfig;

/// `base_lr · decay_factor^(step·batch_size / decay_every_samples)`, with the
/// exponent floored when `lr_staircase` is set.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let samples = step as f64 * cfg.batch_size as f64;
    let mut exponent = samples / cfg.decay_every_samples as f64;
    if cfg.lr_staircase {
        exponent = exponent.floor();
    }
    cfg.base_lr * cfg.decay_factor.powf(exponent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchors() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), cfg.base_lr);
        let step = cfg.decay_every_samples / cfg.batch_size as u64;
        assert_eq!(step * cfg.batch_size as u64, cfg.decay_every_samples);
        assert_eq!(lr_schedule(step, &cfg), cfg.base_lr * cfg.decay_factor);
    }

    #[test]
    fn continuous_and_staircase() {
        let cfg = TrainConfig {
            batch_size: 10,
            decay_every_samples: 100,
            decay_factor: 0.5,
            base_lr: 1.0,
            ..TrainConfig::default()
        };
        assert!((lr_schedule(5, &cfg) - 0.5f64.powf(0.5)).abs() < 1e-15);
        let stair = TrainConfig { lr_staircase: true, ..cfg };
        assert_eq!(lr_schedule(5, &stair), 1.0);
        assert_eq!(lr_schedule(19, &stair), 0.5);
        assert_eq!(lr_schedule(20, &stair), 0.25);
    }

    proptest! {
        #[test]
        fn monotone_non_increasing(step in 0u64..10_000_000, decay in 0.01f64..=1.0, stair in any::<bool>()) {
            let cfg = TrainConfig { decay_factor: decay, lr_staircase: stair, ..TrainConfig::default() };
            prop_assert!(lr_schedule(step + 1, &cfg) <= lr_schedule(step, &cfg));
        }

        #[test]
        fn matches_direct_formula(step in 0u64..1_000_000) {
            let cfg = TrainConfig::default();
            let want = 0.0002 * 0.8f64.powf(step as f64 * 160.0 / 2e6);
            prop_assert!((lr_schedule(step, &cfg) - want).abs() <= 1e-18);
        }
    }
}
