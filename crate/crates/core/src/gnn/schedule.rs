use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveSamplingConfig {
    /// Largest fanout.
    pub alpha: usize,
    /// Starting fanout.
    pub sigma: usize,
    /// Fanout increment after a non-improving evaluation.
    pub delta: usize,
    /// Minimum gain over the best AUC so far that counts as improvement.
    pub eta: f64,
    /// Evaluation cadence as a fraction of an epoch.
    pub eval_every: f64,
}

impl Default for AdaptiveSamplingConfig {
    fn default() -> Self {
        Self {
            alpha: 20,
            sigma: 5,
            delta: 5,
            eta: 1e-3,
            eval_every: 0.1,
        }
    }
}

impl AdaptiveSamplingConfig {
    /// A schedule that never changes: fanout α from the start.
    pub fn fixed(alpha: usize, eval_every: f64) -> Self {
        Self {
            alpha,
            sigma: alpha,
            delta: 1,
            eta: 1e-3,
            eval_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma == 0 || self.sigma > self.alpha {
            return Err(Error::invalid(format!(
                "need 1 <= sigma <= alpha, got sigma {} alpha {}",
                self.sigma, self.alpha
            )));
        }
        if self.delta == 0 {
            return Err(Error::invalid("delta must be positive"));
        }
        if !(self.eval_every > 0.0) {
            return Err(Error::invalid("eval_every must be positive"));
        }
        Ok(())
    }
}

/// Fanout schedule: grows by δ (capped at α) after every evaluation that
/// fails to improve.
#[derive(Clone, Debug)]
pub struct AdaptiveSchedule {
    cfg: AdaptiveSamplingConfig,
    sample_count: usize,
    best: f64,
}

impl AdaptiveSchedule {
    pub fn new(cfg: AdaptiveSamplingConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            sample_count: cfg.sigma,
            cfg,
            best: f64::NEG_INFINITY,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Feed one evaluation outcome.
    pub fn record(&mut self, improved: bool) {
        if !improved {
            self.sample_count = (self.sample_count + self.cfg.delta).min(self.cfg.alpha);
        }
    }

    /// Feed a validation AUC; returns whether it counted as improvement.
    pub fn observe(&mut self, auc: f64) -> bool {
        let improved = auc - self.best >= self.cfg.eta;
        if auc > self.best {
            self.best = auc;
        }
        self.record(improved);
        improved
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(cfg: AdaptiveSamplingConfig, outcomes: &[bool]) -> Vec<usize> {
        let mut s = AdaptiveSchedule::new(cfg).unwrap();
        outcomes
            .iter()
            .map(|&ok| {
                let before = s.sample_count();
                s.record(ok);
                before
            })
            .collect()
    }

    fn cfg(sigma: usize, delta: usize, alpha: usize) -> AdaptiveSamplingConfig {
        AdaptiveSamplingConfig {
            alpha,
            sigma,
            delta,
            ..Default::default()
        }
    }

    #[test]
    fn never_improving() {
        assert_eq!(trace(cfg(5, 5, 20), &[false; 5]), vec![5, 10, 15, 20, 20]);
    }

    #[test]
    fn always_improving() {
        assert_eq!(trace(cfg(5, 5, 20), &[true; 5]), vec![5; 5]);
    }

    #[test]
    fn alternating() {
        let outcomes = [true, false, true, false, true, false];
        assert_eq!(trace(cfg(4, 3, 8), &outcomes), vec![4, 4, 7, 7, 8, 8]);
    }

    #[test]
    fn small_gains_do_not_count() {
        let mut s = AdaptiveSchedule::new(cfg(2, 2, 10)).unwrap();
        assert!(s.observe(0.6));
        assert!(!s.observe(0.6005));
        assert_eq!(s.sample_count(), 4);
        assert!(s.observe(0.61));
    }

    #[test]
    fn sigma_above_alpha_rejected() {
        assert!(AdaptiveSchedule::new(cfg(9, 1, 8)).is_err());
    }
}
