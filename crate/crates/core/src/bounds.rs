//! Closed-form confidence statements for voted "good" points and a
//! Monte-Carlo coverage check of the error interval.
//!
//! The formulas are implemented exactly as stated: the sample-mean variance
//! is taken as `1/(4√n)` and the discovery probability as `1 - 6/(4√k)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremInputs {
    /// Number of networks trained on disjoint fractions of the data.
    pub k: f64,
    /// Validation points falling in the shared subspace.
    pub n: f64,
    /// Largest observed error rate over the `k` networks.
    pub eps_prime: f64,
    /// Standard-normal quantile of the wanted interval.
    pub z: f64,
}

impl TheoremInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 1.0) {
            return Err(Error::InvalidArgument(format!("k must be >= 1, got {}", self.k)));
        }
        if !(self.n >= 1.0) {
            return Err(Error::InvalidArgument(format!("n must be >= 1, got {}", self.n)));
        }
        if !(0.0..=1.0).contains(&self.eps_prime) {
            return Err(Error::InvalidArgument(format!(
                "eps' must lie in [0, 1], got {}",
                self.eps_prime
            )));
        }
        if !(self.z > 0.0 && self.z.is_finite()) {
            return Err(Error::InvalidArgument(format!("z must be positive, got {}", self.z)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub confidence_lb: f64,
    pub sigma: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `max(0, 1 - 6/(4√k))`.
pub fn discovery_probability_lb(k: f64) -> Result<f64> {
    if !(k >= 1.0) {
        return Err(Error::InvalidArgument(format!("k must be >= 1, got {k}")));
    }
    Ok((1.0 - 6.0 / (4.0 * k.sqrt())).max(0.0))
}

/// Standard deviation `sqrt(1/(4√n))`.
pub fn sigma(n: f64) -> f64 {
    (1.0 / (4.0 * n.sqrt())).sqrt()
}

/// `[ε' - zσ, ε' + zσ] ∩ [0, 1]` with its confidence lower bound.
pub fn epsilon_interval(inp: &TheoremInputs) -> Result<BoundReport> {
    inp.validate()?;
    let s = sigma(inp.n);
    Ok(BoundReport {
        confidence_lb: discovery_probability_lb(inp.k)?,
        sigma: s,
        lower: (inp.eps_prime - inp.z * s).clamp(0.0, 1.0),
        upper: (inp.eps_prime + inp.z * s).clamp(0.0, 1.0),
    })
}

/// Largest number of incorrect voted points, `v / (f1·f2)`.
pub fn ensemble_validation_bound(v: f64, f1: f64, f2: f64) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::InvalidArgument(format!("v must be nonnegative, got {v}")));
    }
    for (name, f) in [("f1", f1), ("f2", f2)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidArgument(format!("{name} = {f} outside (0, 1]")));
        }
    }
    Ok(v / (f1 * f2))
}

/// An exact nonnegative fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Self {
        Fraction { num, den }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn lt(&self, other: &Fraction) -> bool {
        (self.num as u128) * (other.den as u128) < (other.num as u128) * (self.den as u128)
    }

    pub fn min(self, other: Fraction) -> Fraction {
        if other.lt(&self) {
            other
        } else {
            self
        }
    }
}

/// Measured quantities of an ensemble run on a common set of points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationRun {
    /// Most good-but-misclassified points over the individual models.
    pub v: u64,
    /// Smallest fraction of models deeming a voted point good.
    pub f1: Fraction,
    /// Smallest fraction of those good models agreeing on the returned label.
    pub f2: Fraction,
    /// Voted points the ensemble got wrong.
    pub observed_incorrect: u64,
    /// Points that received a vote.
    pub voted: u64,
    /// Points the run was measured on.
    pub points: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub v: u64,
    pub v_rate: f64,
    pub f1: f64,
    pub f2: f64,
    pub bound: f64,
    pub observed_incorrect: u64,
    pub passed: bool,
}

/// Checks `observed_incorrect ≤ v / (f1·f2)` exactly in integer arithmetic.
pub fn verify_ensemble_bound(run: &ValidationRun) -> Result<BoundCheck> {
    if run.f1.den == 0 || run.f2.den == 0 || run.f1.num == 0 || run.f2.num == 0 {
        return Err(Error::InvalidArgument("fractions f1 and f2 must be positive".into()));
    }
    let bound = ensemble_validation_bound(run.v as f64, run.f1.value(), run.f2.value())?;
    // E·(a/b)·(c/d) ≤ v  ⇔  E·a·c ≤ v·b·d
    let lhs = run.observed_incorrect as u128 * run.f1.num as u128 * run.f2.num as u128;
    let rhs = run.v as u128 * run.f1.den as u128 * run.f2.den as u128;
    Ok(BoundCheck {
        v: run.v,
        v_rate: if run.points == 0 { 0.0 } else { run.v as f64 / run.points as f64 },
        f1: run.f1.value(),
        f2: run.f2.value(),
        bound,
        observed_incorrect: run.observed_incorrect,
        passed: lhs <= rhs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub true_eps: f64,
    pub n: usize,
    pub k: usize,
    pub z: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Simulates `k` networks with `n` Bernoulli(ε) errors each per trial, takes
/// ε' as the largest sample mean, and reports how often ε lies inside the
/// interval around ε'.
pub fn monte_carlo_coverage(cfg: &CoverageConfig) -> Result<f64> {
    if cfg.trials < 1_000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1000 trials, got {}",
            cfg.trials
        )));
    }
    if cfg.n == 0 || cfg.k == 0 {
        return Err(Error::InvalidArgument("n and k must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.true_eps) {
        return Err(Error::InvalidArgument("true error rate outside [0, 1]".into()));
    }
    let covered: usize = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(trial as u64));
            let eps_prime = (0..cfg.k)
                .map(|_| {
                    let errors = (0..cfg.n).filter(|_| rng.gen_bool(cfg.true_eps)).count();
                    errors as f64 / cfg.n as f64
                })
                .fold(0.0, f64::max);
            let report = epsilon_interval(&TheoremInputs {
                k: cfg.k as f64,
                n: cfg.n as f64,
                eps_prime,
                z: cfg.z,
            })
            .expect("inputs validated above");
            usize::from(report.lower <= cfg.true_eps && cfg.true_eps <= report.upper)
        })
        .sum();
    Ok(covered as f64 / cfg.trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discovery_probability_spot_values() {
        assert_eq!(discovery_probability_lb(9.0).unwrap(), 0.5);
        assert!((discovery_probability_lb(22_500.0).unwrap() - 0.99).abs() < 1e-15);
        assert_eq!(discovery_probability_lb(1.0).unwrap(), 0.0);
        assert!(discovery_probability_lb(0.5).is_err());
    }

    #[test]
    fn discovery_probability_is_monotone() {
        let mut prev = 0.0;
        for k in 1..2000 {
            let p = discovery_probability_lb(k as f64).unwrap();
            assert!(p >= prev);
            assert!(p <= 1.0);
            prev = p;
        }
    }

    #[test]
    fn interval_substitution_and_clamp() {
        let r = epsilon_interval(&TheoremInputs { k: 9.0, n: 1e4, eps_prime: 0.1, z: 2.0 }).unwrap();
        assert!((r.sigma - 0.05).abs() < 1e-15);
        assert_eq!(r.lower, 0.0);
        assert!((r.upper - 0.2).abs() < 1e-15);
        assert_eq!(r.confidence_lb, 0.5);

        let r = epsilon_interval(&TheoremInputs { k: 4.0, n: 50.0, eps_prime: 0.0, z: 0.5 }).unwrap();
        assert_eq!(r.lower, 0.0);
        let r = epsilon_interval(&TheoremInputs { k: 4.0, n: 1.0, eps_prime: 1.0, z: 3.0 }).unwrap();
        assert_eq!(r.upper, 1.0);
    }

    #[test]
    fn interval_width_shrinks_with_n() {
        let mut prev = f64::INFINITY;
        for n in 1..5000 {
            let r = epsilon_interval(&TheoremInputs { k: 10.0, n: n as f64, eps_prime: 0.5, z: 0.1 }).unwrap();
            let w = r.upper - r.lower;
            assert!(w <= prev);
            prev = w;
        }
    }

    #[test]
    fn interval_rejects_bad_inputs() {
        let ok = TheoremInputs { k: 2.0, n: 2.0, eps_prime: 0.2, z: 1.0 };
        assert!(epsilon_interval(&TheoremInputs { k: 0.0, ..ok }).is_err());
        assert!(epsilon_interval(&TheoremInputs { n: 0.0, ..ok }).is_err());
        assert!(epsilon_interval(&TheoremInputs { eps_prime: 1.5, ..ok }).is_err());
        assert!(epsilon_interval(&TheoremInputs { z: 0.0, ..ok }).is_err());
    }

    #[test]
    fn validation_bound_values() {
        assert_eq!(ensemble_validation_bound(0.0, 0.3, 0.7).unwrap(), 0.0);
        assert_eq!(ensemble_validation_bound(10.0, 0.5, 0.5).unwrap(), 40.0);
        assert_eq!(ensemble_validation_bound(7.0, 1.0, 1.0).unwrap(), 7.0);
        assert!(ensemble_validation_bound(1.0, 0.0, 1.0).is_err());
        assert!(ensemble_validation_bound(1.0, 0.5, 1.5).is_err());
    }

    #[test]
    fn validation_bound_monotonicity() {
        let b = |v, f1, f2| ensemble_validation_bound(v, f1, f2).unwrap();
        assert!(b(5.0, 0.4, 0.6) > b(5.0, 0.5, 0.6));
        assert!(b(5.0, 0.4, 0.6) > b(5.0, 0.4, 0.7));
        assert!(b(6.0, 0.4, 0.6) > b(5.0, 0.4, 0.6));
    }

    fn run(v: u64, f1: Fraction, f2: Fraction, observed: u64) -> ValidationRun {
        ValidationRun { v, f1, f2, observed_incorrect: observed, voted: 100, points: 120 }
    }

    #[test]
    fn verify_bound_fixtures() {
        let half = Fraction::new(1, 2);
        let one = Fraction::new(1, 1);
        assert!(verify_ensemble_bound(&run(0, half, one, 0)).unwrap().passed);
        assert!(!verify_ensemble_bound(&run(0, half, one, 1)).unwrap().passed);
        let c = verify_ensemble_bound(&run(4, half, one, 7)).unwrap();
        assert!(c.passed);
        assert_eq!(c.bound, 8.0);
        assert!(verify_ensemble_bound(&run(4, half, one, 8)).unwrap().passed);
        assert!(!verify_ensemble_bound(&run(4, half, one, 9)).unwrap().passed);
        assert!(verify_ensemble_bound(&run(4, Fraction::new(0, 1), one, 0)).is_err());
    }

    #[test]
    fn zero_error_rate_is_always_covered() {
        let cfg = CoverageConfig { true_eps: 0.0, n: 50, k: 3, z: 1.0, trials: 1000, seed: 1 };
        assert_eq!(monte_carlo_coverage(&cfg).unwrap(), 1.0);
    }

    #[test]
    fn coverage_grows_with_z() {
        let mut prev = 0.0;
        for z in [1.0, 2.0, 3.0] {
            let cfg = CoverageConfig { true_eps: 0.1, n: 400, k: 5, z, trials: 2000, seed: 7 };
            let c = monte_carlo_coverage(&cfg).unwrap();
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn coverage_rejects_few_trials() {
        let cfg = CoverageConfig { true_eps: 0.1, n: 10, k: 2, z: 1.0, trials: 10, seed: 0 };
        assert!(monte_carlo_coverage(&cfg).is_err());
    }
}
