use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::nn::ParamSet;

/// Settings of the greedy rollout baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    /// Epochs that use the exponential average instead of the rollout.
    pub warmup_epochs: usize,
    pub warmup_beta: f64,
    pub ttest_alpha: f64,
    /// Validation instances sampled per epoch for the replacement test.
    pub eval_set_size: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 1,
            warmup_beta: 0.8,
            ttest_alpha: 0.05,
            eval_set_size: 10_000,
        }
    }
}

/// Frozen best-so-far parameters plus the warm-up average.
#[derive(Debug, Clone)]
pub struct BaselineState {
    pub frozen: ParamSet<f32>,
    pub ema: Option<f64>,
    /// Completed epochs.
    pub epoch: usize,
}

impl BaselineState {
    pub fn new(frozen: ParamSet<f32>) -> Self {
        Self {
            frozen,
            ema: None,
            epoch: 0,
        }
    }

    pub fn in_warmup(&self, cfg: &BaselineConfig) -> bool {
        self.epoch < cfg.warmup_epochs
    }

    /// Folds a batch mean cost into the warm-up average and returns the
    /// value used as baseline for that batch.
    pub fn warmup_value(&mut self, beta: f64, batch_mean: f64) -> f64 {
        let b = self.ema.unwrap_or(batch_mean);
        self.ema = Some(beta * b + (1.0 - beta) * batch_mean);
        b
    }
}

/// Outcome of a one-sided paired t-test of "candidate is cheaper".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
}

/// Tests `candidate - baseline < 0` on paired costs.
pub fn paired_ttest(candidate: &[f64], baseline: &[f64]) -> Option<TTest> {
    let n = candidate.len();
    if n < 2 || baseline.len() != n {
        return None;
    }
    let d: Vec<f64> = candidate.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let (t, p) = if se > 0.0 {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).ok()?;
        (t, dist.cdf(t))
    } else if mean < 0.0 {
        (f64::NEG_INFINITY, 0.0)
    } else if mean > 0.0 {
        (f64::INFINITY, 1.0)
    } else {
        (0.0, 0.5)
    };
    Some(TTest {
        mean_diff: mean,
        t,
        p_value: p,
    })
}

/// Whether the candidate replaces the frozen baseline.
pub fn significant_improvement(test: &TTest, alpha: f64) -> bool {
    test.mean_diff < 0.0 && test.p_value < alpha
}
