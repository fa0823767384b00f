//! Numerically stable scalar primitives and a central-difference gradient checker.
//!
//! Every objective in the crate routes its sigmoids and softmaxes through here,
//! and every analytic gradient is validated with [`grad_check`].

use std::ops::{Add, Div, Mul, Neg, Sub};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor of the relative-error denominator in [`grad_check`].
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `log σ(x)`, rejecting non-finite input.
pub fn log_sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("log_sigmoid of non-finite value {x}")));
    }
    Ok(ln_sigmoid(x))
}

/// Unchecked `log σ(x)`: `-log1p(e^-x)` for `x >= 0`, `x - log1p(e^x)` otherwise.
#[inline]
pub(crate) fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Logistic function, evaluated without overflow for either sign.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite logit at index {i}")));
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total = pairwise_sum(&exps);
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Max-shifted log-softmax.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|z| z - max).collect();
    let exps: Vec<f64> = shifted.iter().map(|z| z.exp()).collect();
    let log_total = pairwise_sum(&exps).ln();
    Ok(shifted.into_iter().map(|z| z - log_total).collect())
}

/// Pairwise summation in a fixed order; the result depends only on the input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        values.iter().fold(0.0, |acc, v| acc + v)
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Mean as `x₀ + Σ(xᵢ − x₀)/n` with [`pairwise_sum`]; exact for constant input.
/// Empty input yields NaN.
pub fn ordered_mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else {
        return f64::NAN;
    };
    let dev: Vec<f64> = values.iter().map(|v| v - first).collect();
    first + pairwise_sum(&dev) / values.len() as f64
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error with the denominator floored at [`REL_ERROR_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central-difference gradient check of `analytic_grad` against `objective` at `params`.
///
/// Each coordinate is perturbed independently, in parallel; `objective` only
/// sees read-only copies of `params`.
pub fn grad_check<F>(
    objective: F,
    params: &[f64],
    analytic_grad: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Parameter(format!("step must be positive, got {step}")));
    }
    if params.is_empty() {
        return Err(Error::Parameter("grad_check needs at least one parameter".into()));
    }
    if params.len() != analytic_grad.len() {
        return Err(Error::Parameter(format!(
            "gradient length {} does not match parameter count {}",
            analytic_grad.len(),
            params.len()
        )));
    }

    let numeric: Vec<(usize, f64)> = (0..params.len())
        .into_par_iter()
        .map_init(
            || params.to_vec(),
            |buf, i| {
                let orig = buf[i];
                buf[i] = orig + step;
                let plus = objective(buf);
                buf[i] = orig - step;
                let minus = objective(buf);
                buf[i] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::Evaluation {
                        index: i,
                        message: format!("objective returned {plus} / {minus}"),
                    });
                }
                Ok((i, (plus - minus) / (2.0 * step)))
            },
        )
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic_grad[0],
        numeric: numeric[0].1,
    };
    for (i, num) in numeric {
        let err = relative_error(analytic_grad[i], num);
        if err > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: analytic_grad[i],
                numeric: num,
            };
        }
    }
    Ok(report)
}

/// Forward-mode dual number `re + eps·ε` with `ε² = 0`.
///
/// Used to take exact directional derivatives of closed-form objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn constant(re: f64) -> Self {
        Dual { re, eps: 0.0 }
    }

    pub fn variable(re: f64, eps: f64) -> Self {
        Dual { re, eps }
    }

    pub fn exp(self) -> Self {
        let e = self.re.exp();
        Dual { re: e, eps: self.eps * e }
    }

    pub fn ln(self) -> Self {
        Dual {
            re: self.re.ln(),
            eps: self.eps / self.re,
        }
    }

    /// `log σ(x)`, derivative `σ(-x)`.
    pub fn ln_sigmoid(self) -> Self {
        Dual {
            re: ln_sigmoid(self.re),
            eps: self.eps * sigmoid(-self.re),
        }
    }

    pub fn scale(self, k: f64) -> Self {
        Dual {
            re: self.re * k,
            eps: self.eps * k,
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual {
            re: self.re + rhs.re,
            eps: self.eps + rhs.eps,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual {
            re: self.re - rhs.re,
            eps: self.eps - rhs.eps,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual {
            re: self.re * rhs.re,
            eps: self.re * rhs.eps + self.eps * rhs.re,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        Dual {
            re: self.re / rhs.re,
            eps: (self.eps * rhs.re - self.re * rhs.eps) / (rhs.re * rhs.re),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            re: -self.re,
            eps: -self.eps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_sigmoid_anchors() {
        assert_eq!(log_sigmoid(0.0).unwrap(), -std::f64::consts::LN_2);
        let big = log_sigmoid(50.0).unwrap();
        assert!(big < 0.0 && big > -2e-22, "{big}");
        // log(1/(1+e^30)) = -30 - log1p(e^-30); e^-30 = 9.357623e-14
        let expected = -30.0 - 9.357_622_968_840_175e-14;
        assert!((log_sigmoid(-30.0).unwrap() - expected).abs() < 1e-12);
        assert!((log_sigmoid(-30.0).unwrap() + 30.0).abs() < 1e-9);
    }

    #[test]
    fn log_sigmoid_extremes_stay_finite() {
        assert!(log_sigmoid(-700.0).unwrap().is_finite());
        assert_eq!(log_sigmoid(-1e4).unwrap(), -1e4);
        assert_eq!(log_sigmoid(1e4).unwrap(), 0.0);
        assert!(log_sigmoid(f64::NAN).is_err());
        assert!(log_sigmoid(f64::INFINITY).is_err());
    }

    #[test]
    fn log_sigmoid_is_monotone_on_a_grid() {
        let mut prev = f64::NEG_INFINITY;
        for i in -20_000..=20_000 {
            let v = log_sigmoid(i as f64 * 0.05).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn softmax_anchors() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let big = softmax(&[1000.0, 999.0, 998.0]).unwrap();
        let small = softmax(&[2.0, 1.0, 0.0]).unwrap();
        for (a, b) in big.iter().zip(&small) {
            assert!(a.is_finite());
            assert!((a - b).abs() < 1e-15);
        }
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let z = [0.3, -1.2, 4.0, 0.0];
        let p = softmax(&z).unwrap();
        let lp = log_softmax(&z).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-14);
        }
    }

    #[test]
    fn ordered_mean_is_exact_for_constants() {
        let ln2 = std::f64::consts::LN_2;
        for n in 1..40 {
            assert_eq!(ordered_mean(&vec![ln2; n]), ln2);
        }
        assert!(ordered_mean(&[]).is_nan());
        assert_eq!(ordered_mean(&[1.0, 2.0, 3.0, 6.0]), 3.0);
    }

    #[test]
    fn grad_check_exact_on_quadratic() {
        let theta = [0.5, -1.5, 2.0, 0.0, 3.25];
        let grad: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let rep = grad_check(f, &theta, &grad, 1e-4).unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    }

    #[test]
    fn grad_check_flags_scaled_gradient() {
        let theta = [0.5, -1.5, 2.0];
        let grad: Vec<f64> = theta.iter().map(|t| 4.0 * t).collect();
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let rep = grad_check(f, &theta, &grad, 1e-4).unwrap();
        assert!((rep.max_rel_error - 0.5).abs() < 1e-6, "{rep:?}");
    }

    #[test]
    fn grad_check_reports_offending_index() {
        let theta = [1.0, 2.0, 3.0];
        let f = |x: &[f64]| if x[2] > 3.0 { f64::NAN } else { x[0] };
        match grad_check(f, &theta, &[1.0, 0.0, 0.0], 1e-4) {
            Err(Error::Evaluation { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(grad_check(f, &theta, &[1.0, 0.0, 0.0], 0.0).is_err());
        assert!(grad_check(f, &theta, &[1.0], 1e-4).is_err());
    }

    #[test]
    fn dual_matches_closed_form_derivative() {
        // d/dx log σ(exp(x) - 1) at x = 0.3
        let x = Dual::variable(0.3, 1.0);
        let y = (x.exp() - Dual::constant(1.0)).ln_sigmoid();
        let inner = 0.3f64.exp() - 1.0;
        let expected = sigmoid(-inner) * 0.3f64.exp();
        assert!((y.eps - expected).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn sigmoid_complement(x in -30.0f64..30.0) {
            let s = log_sigmoid(x).unwrap().exp() + log_sigmoid(-x).unwrap().exp();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(z in proptest::collection::vec(-20.0f64..20.0, 1..12), c in -100.0f64..100.0) {
            let p = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v > 0.0));
        }

        #[test]
        fn grad_check_passes_degree_two_polynomials(
            coeffs in proptest::collection::vec(-3.0f64..3.0, 3),
            theta in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            // f = a·x0² + b·x0·x1 + c·x2 + x1²
            let (a, b, c) = (coeffs[0], coeffs[1], coeffs[2]);
            let f = move |x: &[f64]| a * x[0] * x[0] + b * x[0] * x[1] + c * x[2] + x[1] * x[1];
            let grad = [
                2.0 * a * theta[0] + b * theta[1],
                b * theta[0] + 2.0 * theta[1],
                c,
            ];
            // near-zero components are dominated by roundoff over the 1e-8 floor
            prop_assume!(grad.iter().all(|g| g.abs() > 1e-3));
            let rep = grad_check(f, &theta, &grad, 1e-3).unwrap();
            prop_assert!(rep.max_rel_error < 1e-7, "{:?}", rep);
        }
    }
}
