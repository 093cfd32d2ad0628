use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Linear ramp `0 → lr` over the warmup, then linear decay to 0.
    #[default]
    Linear,
}

/// Learning rate for optimizer update number `step` (0-based) out of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    let warmup = config.warmup_steps;
    if total_steps <= warmup {
        return Err(Error::Config(format!(
            "total steps {total_steps} must exceed warmup steps {warmup}"
        )));
    }
    if step > total_steps {
        return Err(Error::Input(format!("step {step} beyond total {total_steps}")));
    }
    let lr = config.learning_rate;
    let Schedule::Linear = config.schedule;
    Ok(if step < warmup {
        lr * step as f64 / warmup as f64
    } else {
        lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn key_points() {
        let c = cfg();
        assert_eq!(lr_at(0, 1100, &c).unwrap(), 0.0);
        assert_eq!(lr_at(100, 1100, &c).unwrap(), 3e-4);
        assert_eq!(lr_at(1100, 1100, &c).unwrap(), 0.0);
        assert!((lr_at(600, 1100, &c).unwrap() - 1.5e-4).abs() < 1e-18);
        assert!((lr_at(50, 1100, &c).unwrap() - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn rejects_short_runs() {
        assert!(lr_at(0, 100, &cfg()).is_err());
        assert!(lr_at(0, 50, &cfg()).is_err());
        assert!(lr_at(2000, 1100, &cfg()).is_err());
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let c = TrainConfig {
            warmup_steps: 0,
            ..cfg()
        };
        assert_eq!(lr_at(0, 10, &c).unwrap(), 3e-4);
    }

    proptest! {
        #[test]
        fn piecewise_linear_peak_at_warmup(warmup in 0usize..50, extra in 1usize..200) {
            let c = TrainConfig { warmup_steps: warmup, ..cfg() };
            let total = warmup + extra;
            let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, &c).unwrap()).collect();
            let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(peak, lrs[warmup]);
            // continuity: adjacent steps differ by at most one slope increment
            let slope = c.learning_rate / (warmup.max(1).min(extra) as f64);
            for w in lrs.windows(2) {
                prop_assert!((w[1] - w[0]).abs() <= slope + 1e-18);
                prop_assert!(w[0] >= 0.0);
            }
        }
    }
}
