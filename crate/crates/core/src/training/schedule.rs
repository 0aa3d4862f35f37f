use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup followed by exponential decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub warmup_start: f64,
    pub peak: f64,
    pub warmup_steps: u64,
    pub decay_rate: f64,
    pub transition_steps: u64,
    /// Decay in whole multiples of `transition_steps` instead of continuously.
    pub staircase: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_start: 1e-7,
            peak: 1e-3,
            warmup_steps: 5000,
            decay_rate: 0.99,
            transition_steps: 2000,
            staircase: false,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_start > 0.0 && self.peak > self.warmup_start) {
            return Err(Error::Config(format!(
                "schedule needs peak > warmup_start > 0, got peak {} and warmup_start {}",
                self.peak, self.warmup_start
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) || self.transition_steps == 0 {
            return Err(Error::Config("decay_rate must be in (0, 1] and transition_steps positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` (0-based).
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step < cfg.warmup_steps {
        let f = step as f64 / cfg.warmup_steps as f64;
        return cfg.warmup_start + (cfg.peak - cfg.warmup_start) * f;
    }
    let mut e = (step - cfg.warmup_steps) as f64 / cfg.transition_steps as f64;
    if cfg.staircase {
        e = e.floor();
    }
    cfg.peak * cfg.decay_rate.powf(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_points() {
        let c = ScheduleConfig::default();
        assert_eq!(lr_at(0, &c), 1e-7);
        assert_eq!(lr_at(5000, &c), 1e-3);
        assert!((lr_at(7000, &c) - 9.9e-4).abs() < 1e-18);
        assert!((lr_at(2500, &c) - (1e-7 + (1e-3 - 1e-7) * 0.5)).abs() < 1e-18);
    }

    #[test]
    fn staircase_holds_between_transitions() {
        let c = ScheduleConfig { staircase: true, ..Default::default() };
        assert_eq!(lr_at(6999, &c), 1e-3);
        assert_eq!(lr_at(7000, &c), 1e-3 * 0.99);
        let cont = ScheduleConfig::default();
        assert!(lr_at(6000, &cont) < 1e-3);
    }

    #[test]
    fn warmup_is_increasing_then_decay_decreasing() {
        let c = ScheduleConfig { warmup_steps: 10, transition_steps: 5, ..Default::default() };
        for s in 0..10 {
            assert!(lr_at(s + 1, &c) > lr_at(s, &c));
        }
        for s in 10..40 {
            assert!(lr_at(s + 1, &c) < lr_at(s, &c));
        }
    }

    #[test]
    fn invalid_schedule() {
        let c = ScheduleConfig { peak: 1e-8, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
