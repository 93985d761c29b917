//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step RDP at order `α` is `log A_α / (α − 1)` where `A_α` is the
//! `α`-th moment of the privacy-loss ratio of the mixture `(1−q)N(0,σ²) +
//! qN(1,σ²)` against `N(0,σ²)`. Integer orders use the finite binomial
//! expansion; fractional orders use the two-sided series with complementary
//! error function tails. Conversion to `(ε, δ)` is
//! `ε = min_α rdp(α) + log(1/δ)/(α − 1)`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// `1.25, 1.5, …, 64` plus `128` and `256`.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=256).map(|k| k as f64 * 0.25).collect();
    orders.extend([128.0, 256.0]);
    orders
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if b >= a {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        erfc(x).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2);
        -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
    }
}

fn ln_binom_int(n: u64, k: u64) -> f64 {
    statrs::function::factorial::ln_binomial(n, k)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut acc = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let fi = i as f64;
        let term = ln_binom_int(alpha, i)
            + fi * lq
            + (alpha - i) as f64 * l1q
            + (fi * fi - fi) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut coef = 1.0_f64;
    for i in 0..100_000u32 {
        let fi = i as f64;
        if i > 0 {
            coef *= (alpha - fi + 1.0) / fi;
        }
        if coef == 0.0 {
            break;
        }
        let log_coef = coef.abs().ln();
        let j = alpha - fi;
        let t0 = log_coef + fi * lq + j * l1q;
        let t1 = log_coef + j * lq + fi * l1q;
        let e0 = 0.5f64.ln() + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * sigma));
        let e1 = 0.5f64.ln() + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * sigma));
        let s0 = t0 + (fi * fi - fi) / (2.0 * s2) + e0;
        let s1 = t1 + (j * j - j) / (2.0 * s2) + e1;
        if coef > 0.0 {
            a0 = log_add(a0, s0);
            a1 = log_add(a1, s1);
        } else {
            a0 = log_sub(a0, s0);
            a1 = log_sub(a1, s1);
        }
        if s0.max(s1) < -30.0 && fi > alpha {
            break;
        }
    }
    log_add(a0, a1)
}

/// Per-step RDP at each order. `σ = 0` yields `+∞` everywhere.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, orders: &[f64]) -> Result<Vec<f64>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("sampling rate must be in (0, 1], got {q}")));
    }
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::Config(format!("noise multiplier must be >= 0, got {sigma}")));
    }
    if let Some(a) = orders.iter().find(|&&a| !(a > 1.0) || !a.is_finite()) {
        return Err(Error::Config(format!("Rényi orders must be finite and > 1, got {a}")));
    }
    Ok(orders
        .iter()
        .map(|&alpha| {
            if sigma == 0.0 {
                return f64::INFINITY;
            }
            let full = alpha / (2.0 * sigma * sigma);
            if q == 1.0 {
                return full;
            }
            let log_a = if alpha.fract() == 0.0 {
                log_a_int(q, sigma, alpha as u64)
            } else {
                log_a_frac(q, sigma, alpha)
            };
            (log_a / (alpha - 1.0)).clamp(0.0, full)
        })
        .collect())
}

/// `ε` together with the order attaining it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub epsilon: f64,
    pub order: Option<f64>,
}

/// Accumulated RDP over recorded steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accountant {
    pub rdp_orders: Vec<f64>,
    pub rdp_values: Vec<f64>,
    pub steps_recorded: u64,
}

impl Default for Accountant {
    fn default() -> Self {
        Self::new(default_orders())
    }
}

impl Accountant {
    pub fn new(orders: Vec<f64>) -> Self {
        let n = orders.len();
        Accountant {
            rdp_orders: orders,
            rdp_values: vec![0.0; n],
            steps_recorded: 0,
        }
    }

    /// Compose `steps` identical mechanism applications.
    pub fn record(&mut self, q: f64, sigma: f64, steps: u64) -> Result<()> {
        let per = rdp_subsampled_gaussian(q, sigma, &self.rdp_orders)?;
        for (acc, r) in self.rdp_values.iter_mut().zip(per) {
            *acc += r * steps as f64;
        }
        self.steps_recorded += steps;
        Ok(())
    }

    pub fn epsilon(&self, delta: f64) -> Result<EpsilonReport> {
        if self.rdp_orders.is_empty() {
            return Err(Error::State("accountant has no Rényi orders".into()));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("delta must be in (0, 1), got {delta}")));
        }
        if self.steps_recorded == 0 {
            return Ok(EpsilonReport {
                epsilon: 0.0,
                order: None,
            });
        }
        let log_inv_delta = (1.0 / delta).ln();
        let mut best = EpsilonReport {
            epsilon: f64::INFINITY,
            order: None,
        };
        for (&alpha, &rdp) in self.rdp_orders.iter().zip(&self.rdp_values) {
            let eps = rdp + log_inv_delta / (alpha - 1.0);
            if eps < best.epsilon {
                best = EpsilonReport {
                    epsilon: eps,
                    order: Some(alpha),
                };
            }
        }
        Ok(best)
    }
}

/// `ε` after `steps` steps at `(q, σ)` on the default order grid.
pub fn epsilon_for(sigma: f64, delta: f64, q: f64, steps: u64) -> Result<EpsilonReport> {
    let mut acc = Accountant::default();
    acc.record(q, sigma, steps)?;
    acc.epsilon(delta)
}

pub const SIGMA_BRACKET: (f64, f64) = (0.3, 50.0);

/// Smallest-found `σ` in the bracket whose `ε` lands in `[0.99·target, target]`.
pub fn calibrate_sigma(target: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if target == f64::INFINITY {
        return Ok(0.0);
    }
    if !(target > 0.0) || target.is_nan() {
        return Err(Error::Config(format!("epsilon target must be positive, got {target}")));
    }
    let eps = |s: f64| epsilon_for(s, delta, q, steps).map(|r| r.epsilon);
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let (eps_lo, eps_hi) = (eps(lo)?, eps(hi)?);
    let fail = || Error::Calibration {
        target,
        low: SIGMA_BRACKET.0,
        high: SIGMA_BRACKET.1,
        eps_at_low: eps_lo,
        eps_at_high: eps_hi,
    };
    if eps_hi > target || eps_lo < 0.99 * target {
        return Err(fail());
    }
    if eps_lo <= target {
        return Ok(lo);
    }
    for _ in 0..200 {
        let e = eps(hi)?;
        if e >= 0.99 * target && e <= target {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if eps(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(fail())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_is_closed_form() {
        let r = rdp_subsampled_gaussian(1.0, 2.0, &[8.0]).unwrap();
        assert_eq!(r, vec![1.0]);
    }

    #[test]
    fn zero_noise_is_infinite() {
        let r = rdp_subsampled_gaussian(0.1, 0.0, &[2.0, 2.5]).unwrap();
        assert!(r.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn small_q_matches_leading_order() {
        // At α = 2 the moment is A_2 = 1 + q²(e^{1/σ²} − 1).
        let (q, s) = (0.01_f64, 1.5_f64);
        let want = (q * q * (1.0 / (s * s)).exp_m1()).ln_1p();
        let got = rdp_subsampled_gaussian(q, s, &[2.0]).unwrap()[0];
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }

    #[test]
    fn fractional_orders_interpolate_neighbours() {
        let r = rdp_subsampled_gaussian(0.02, 1.1, &[3.0, 3.5, 4.0]).unwrap();
        assert!(r[0] < r[1] && r[1] < r[2], "{r:?}");
    }

    #[test]
    fn empty_orders_is_state_error() {
        let acc = Accountant::new(vec![]);
        assert!(matches!(acc.epsilon(1e-5), Err(Error::State(_))));
    }

    #[test]
    fn no_steps_is_zero() {
        assert_eq!(Accountant::default().epsilon(1e-5).unwrap().epsilon, 0.0);
    }

    #[test]
    fn composition_is_linear() {
        let mut one = Accountant::default();
        one.record(0.01, 1.0, 1).unwrap();
        let mut k = Accountant::default();
        k.record(0.01, 1.0, 7).unwrap();
        for (a, b) in one.rdp_values.iter().zip(&k.rdp_values) {
            assert_eq!(7.0 * a, *b);
        }
    }

    #[test]
    fn infinite_target_short_circuits() {
        assert_eq!(calibrate_sigma(f64::INFINITY, 1e-5, 0.01, 100).unwrap(), 0.0);
    }

    #[test]
    fn unreachable_target_reports_bracket() {
        match calibrate_sigma(1e-4, 1e-5, 0.5, 100_000) {
            Err(Error::Calibration { low, high, .. }) => assert_eq!((low, high), SIGMA_BRACKET),
            other => panic!("{other:?}"),
        }
    }
}
