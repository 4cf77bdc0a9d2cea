//! Small statistical helpers: the 2x2 G-test of homogeneity used to decide
//! whether two estimated test probabilities differ, and KL divergence
//! between Bernoulli parameters.

use crate::core::CoreError;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// G statistic for a 2x2 homogeneity table built from two Bernoulli
/// samples: (successes, trials) each. G = 2 sum O ln(O/E); zero-count
/// cells contribute nothing.
pub fn g_statistic(s1: u64, n1: u64, s2: u64, n2: u64) -> f64 {
    debug_assert!(s1 <= n1 && s2 <= n2);
    let total = (n1 + n2) as f64;
    if total == 0.0 || n1 == 0 || n2 == 0 {
        return 0.0;
    }
    let col = [(s1 + s2) as f64, ((n1 - s1) + (n2 - s2)) as f64];
    let rows = [(s1, n1 - s1, n1), (s2, n2 - s2, n2)];
    let mut g = 0.0;
    for (succ, fail, n) in rows {
        for (obs, c) in [(succ as f64, col[0]), (fail as f64, col[1])] {
            if obs > 0.0 {
                let expected = n as f64 * c / total;
                g += obs * (obs / expected).ln();
            }
        }
    }
    2.0 * g
}

/// Two-sample homogeneity test with a cached chi-squared (df = 1)
/// threshold at significance `alpha`.
#[derive(Clone, Debug)]
pub struct GTest {
    alpha: f64,
    threshold: f64,
}

impl GTest {
    pub fn new(alpha: f64) -> Result<Self, CoreError> {
        if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
            return Err(CoreError::Config(format!(
                "significance level must lie in (0, 1), got {alpha}"
            )));
        }
        let chi = ChiSquared::new(1.0)
            .map_err(|e| CoreError::Internal(format!("chi-squared setup: {e}")))?;
        Ok(GTest {
            alpha,
            threshold: chi.inverse_cdf(1.0 - alpha),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// True when the two samples are significantly different.
    pub fn differs(&self, s1: u64, n1: u64, s2: u64, n2: u64) -> bool {
        g_statistic(s1, n1, s2, n2) > self.threshold
    }
}

/// KL divergence KL(p || q) between Bernoulli parameters, with both
/// arguments clamped away from 0 and 1 to keep it finite.
pub fn bernoulli_kld(p: f64, q: f64) -> f64 {
    const EPS: f64 = 1e-6;
    let p = p.clamp(EPS, 1.0 - EPS);
    let q = q.clamp(EPS, 1.0 - EPS);
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}
