//! Noam learning-rate schedule: linear warm-up to a peak at `warmup` steps,
//! then inverse-square-root decay.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct NoamSchedule {
    pub factor: f64,
    pub model_dim: usize,
    pub warmup: usize,
}

impl NoamSchedule {
    pub fn new(factor: f64, model_dim: usize, warmup: usize) -> Result<Self> {
        if factor <= 0.0 || model_dim == 0 || warmup == 0 {
            return Err(Error::Config(format!(
                "bad Noam schedule: factor {factor}, model_dim {model_dim}, warmup {warmup}"
            )));
        }
        Ok(NoamSchedule {
            factor,
            model_dim,
            warmup,
        })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        noam_lr(step, self.factor, self.model_dim, self.warmup)
    }
}

/// `factor * model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: u64, factor: f64, model_dim: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("noam_lr step must be at least 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(factor * (model_dim as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_sits_exactly_at_warmup() {
        // At step = warmup the two min-branch terms coincide.
        let s = NoamSchedule::new(10.0, 512, 25_000).unwrap();
        let w = 25_000u64;
        let at_peak = s.lr(w).unwrap();
        let warm = (w as f64) * (w as f64).powf(-1.5) * 10.0 * 512f64.powf(-0.5);
        assert!((at_peak - warm).abs() < 1e-18);
        assert!(s.lr(w - 1).unwrap() < at_peak);
        assert!(s.lr(w + 1).unwrap() < at_peak);
    }

    #[test]
    fn inverse_sqrt_decay_after_warmup() {
        let s = NoamSchedule::new(10.0, 512, 1000).unwrap();
        let a = s.lr(1000).unwrap();
        let b = s.lr(2000).unwrap();
        assert!((b - a / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn matches_independent_evaluation_at_the_published_point() {
        // factor 10, model_dim 512, warmup 25000, step 25000:
        // 10 / (sqrt(512) * sqrt(25000)) = 0.002795084971874737.
        let lr = noam_lr(25_000, 10.0, 512, 25_000).unwrap();
        let expect = 0.002795084971874737;
        assert!((lr - expect).abs() / expect < 1e-12, "{lr}");
    }

    #[test]
    fn step_zero_is_a_domain_error() {
        assert!(noam_lr(0, 10.0, 512, 25_000).is_err());
    }

    #[test]
    fn positive_for_all_steps() {
        let s = NoamSchedule::new(2.0, 64, 100).unwrap();
        for step in [1u64, 2, 50, 100, 1_000, 1_000_000] {
            assert!(s.lr(step).unwrap() > 0.0);
        }
    }
}
