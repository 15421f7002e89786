//! Closed-form oracles: the Baron–Tartakovsky asymptotic expansion, the
//! Wiener-only solution with `λ = μ = 1`, discounted-mean identities of the
//! odds processes, and the terminating power series of `ψ`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::ReducedModel;
use crate::numeric::{bisect, integrate};

/// Asymptotic threshold and risk for small delay cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticPair {
    pub phi_c: f64,
    pub f_c: f64,
}

pub fn bt_expansion(c: f64, model: &ReducedModel) -> Result<AsymptoticPair> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(invalid("c", "must be finite and > 0"));
    }
    let (l0, l1) = (model.lambda0, model.lambda1);
    let phi_c = (0.5 * model.mu * model.mu + l0 + l1 * ((l1 / l0).ln() - 1.0) + model.lambda) / c;
    Ok(AsymptoticPair {
        phi_c,
        f_c: -c.ln() / phi_c,
    })
}

const QUAD_TOL: f64 = 1e-12;

fn wiener_g(r: f64, c: f64) -> Result<f64> {
    integrate(
        |w: f64| {
            if w <= 0.0 {
                0.0
            } else {
                (w - 1.0 / c) * (1.0 + w) * (-2.0 / w).exp()
            }
        },
        0.0,
        r,
        1e-14,
        QUAD_TOL,
    )
}

/// Optimal threshold of the Wiener-only problem with `λ = μ = 1`: the root
/// of `∫₀^φ (w − 1/c)(1 + w)e^{−2/w} dw = 0`.
pub fn wiener_threshold(c: f64) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(invalid("c", "must be finite and > 0"));
    }
    let lo = 1.0 / c;
    let mut hi = 2.0 * lo;
    while wiener_g(hi, c)? <= 0.0 {
        hi *= 2.0;
    }
    // The integral is increasing past 1/c, so bisection on [1/c, hi] is safe.
    let f = |r: f64| wiener_g(r, c).unwrap_or(f64::NAN);
    let (a, b) = bisect(f, lo, hi, 1e-12 * hi);
    Ok(0.5 * (a + b))
}

/// `e^{−2/w} ∫_w^∞ e^{2/s} / (s²(1+s)²) ds`, finite down to `w = 0`.
fn eta_scaled(w: f64) -> Result<f64> {
    if w <= 0.0 {
        return Ok(0.5);
    }
    let u_top = 1.0 / w;
    let lo = (u_top - 40.0).max(0.0);
    integrate(
        |u: f64| (2.0 * (u - u_top)).exp() * (u / (1.0 + u)).powi(2),
        lo,
        u_top,
        1e-16,
        QUAD_TOL,
    )
}

/// `η_X(φ) = (1 + φ) ∫_φ^∞ e^{2/w} / (w²(1+w)²) dw`, or `+∞` if it overflows.
pub fn wiener_eta(phi: f64) -> Result<f64> {
    if !(phi > 0.0) {
        return Err(invalid("phi", "η_X is infinite at 0"));
    }
    Ok((1.0 + phi) * eta_scaled(phi)? * (2.0 / phi).exp())
}

/// Value function of the Wiener-only stopping problem (`λ = μ = 1`).
pub fn wiener_value(phi: f64, c: f64) -> Result<f64> {
    if !(phi >= 0.0) {
        return Err(invalid("phi", "must be ≥ 0"));
    }
    let r = wiener_threshold(c)?;
    wiener_value_with_threshold(phi, c, r)
}

fn wiener_value_with_threshold(phi: f64, c: f64, r: f64) -> Result<f64> {
    if phi >= r {
        return Ok(0.0);
    }
    let upper = integrate(
        |w: f64| 2.0 * (w - 1.0 / c) * (1.0 + w) * eta_scaled(w).unwrap_or(f64::NAN),
        phi,
        r,
        1e-13,
        1e-10,
    )?;
    let lower = if phi > 0.0 {
        let inner = integrate(
            |w: f64| {
                if w <= 0.0 {
                    0.0
                } else {
                    2.0 * (w - 1.0 / c) * (1.0 + w) * (2.0 / phi - 2.0 / w).exp()
                }
            },
            0.0,
            phi,
            1e-15,
            1e-11,
        )?;
        eta_scaled(phi)? * inner
    } else {
        0.0
    };
    Ok((1.0 + phi) * (upper + lower))
}

/// Bayes risk of the Wiener-only problem (`λ = μ = 1`).
pub fn wiener_risk(pi: f64, c: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&pi) {
        return Err(invalid("pi", "must lie in [0, 1)"));
    }
    let v = wiener_value(pi / (1.0 - pi), c)?;
    Ok(1.0 - pi + c * (1.0 - pi) * v)
}

/// Wiener risks on several priors, sharing one threshold computation.
pub fn wiener_risks(pis: &[f64], c: f64) -> Result<Vec<f64>> {
    let r = wiener_threshold(c)?;
    pis.iter()
        .map(|&pi| {
            if !(0.0..1.0).contains(&pi) {
                return Err(invalid("pi", "must lie in [0, 1)"));
            }
            let v = wiener_value_with_threshold(pi / (1.0 - pi), c, r)?;
            Ok(1.0 - pi + c * (1.0 - pi) * v)
        })
        .collect()
}

/// Discounted means under the reference measure:
/// `E[∫ e^{−(λ+λ0)t} Φ_t dt]` and `E[∫ e^{−(λ+λ0)t} Y_t dt]`, both started at
/// `φ`. The second comes from integrating
/// `E Y_t = φe^{at} + λ(e^{at} − 1)/a` against the discount.
pub fn running_cost_oracles(model: &ReducedModel, phi: f64) -> (f64, f64) {
    let (l, l0, l1) = (model.lambda, model.lambda0, model.lambda1);
    let first = (phi + 1.0) / l0 - 1.0 / (l + l0);
    let second = phi / l1 + l / (l1 * (l + l0));
    (first, second)
}

/// The alternative closed form `(φ + 1/(λ+λ0))/λ1` for the `Y` mean, which
/// agrees with [`running_cost_oracles`] only when `λ = 1`.
pub fn running_cost_unit_rate(model: &ReducedModel, phi: f64) -> f64 {
    (phi + 1.0 / (model.lambda + model.lambda0)) / model.lambda1
}

/// Coefficients of the power series of `ψ` around 0,
/// `β_k = [β − a(k−1) − ½μ²(k−1)(k−2)] / (kλ) · β_{k−1}` with `β_0 = 1`,
/// when the series terminates within `max_degree`. Termination at degree
/// `n − 1` happens exactly when `λ + λ0 = a(n−1) + ½μ²(n−1)(n−2)`.
pub fn polynomial_psi_coefficients(model: &ReducedModel, max_degree: usize) -> Result<Vec<f64>> {
    let beta = model.beta();
    let mut coef = vec![1.0];
    for k in 1..=max_degree + 1 {
        let km = (k - 1) as f64;
        let num = beta - model.a * km - 0.5 * model.mu * model.mu * km * (km - 1.0);
        if num.abs() <= 1e-12 * beta.max(1.0) {
            return Ok(coef);
        }
        if k > max_degree {
            break;
        }
        let prev = coef[k - 1];
        coef.push(num / (k as f64 * model.lambda) * prev);
    }
    Err(invalid(
        "model",
        format!("the power series of ψ does not terminate within degree {max_degree}"),
    ))
}

/// Horner evaluation.
pub fn poly_eval(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn base_model() -> ReducedModel {
        ReducedModel::simple(1.0, 6.0, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn expansion_examples() {
        let m = base_model();
        let p = bt_expansion(0.02, &m).unwrap();
        let ln6 = 6f64.ln();
        assert_abs_diff_eq!(
            p.phi_c,
            (0.5 + 6.0 + (-ln6 - 1.0) + 1.0) / 0.02,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(p.phi_c, 235.412, epsilon = 1e-3);
        assert_abs_diff_eq!(p.f_c, 3.912023 / 235.412, epsilon = 1e-6);
        assert_abs_diff_eq!(p.f_c, 0.016618, epsilon = 1e-6);
        let p1 = bt_expansion(1.0, &m).unwrap();
        assert_abs_diff_eq!(p1.phi_c, 4.708241, epsilon = 1e-6);
        assert_eq!(p1.f_c, 0.0);
        assert!(bt_expansion(0.0, &m).is_err());
    }

    /// Midpoint Riemann sum with a million cells, then linear interpolation
    /// of the cumulative sum at its sign change.
    fn riemann_root(c: f64) -> f64 {
        let hi = 4.0 / c + 4.0;
        let n = 1_000_000;
        let dx = hi / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let w = (i as f64 + 0.5) * dx;
            let next = acc + dx * (w - 1.0 / c) * (1.0 + w) * (-2.0 / w).exp();
            if next > 0.0 && w > 1.0 / c {
                return i as f64 * dx + dx * (-acc) / (next - acc);
            }
            acc = next;
        }
        panic!("no root below {hi}");
    }

    #[test]
    fn wiener_threshold_matches_riemann_oracle() {
        let r = wiener_threshold(1.0).unwrap();
        assert!((r - riemann_root(1.0)).abs() < 1e-4, "{r}");
        assert_abs_diff_eq!(r, 1.252_587_637_08, epsilon = 1e-8);
        assert!(r > 1.0);
        assert!(wiener_threshold(0.0).is_err());
        assert!(wiener_threshold(f64::INFINITY).is_err());
    }

    #[test]
    fn wiener_threshold_decreases_in_cost() {
        let cs = [0.05, 0.1, 0.3, 1.0, 2.0];
        let r: Vec<f64> = cs.iter().map(|&c| wiener_threshold(c).unwrap()).collect();
        assert!(r.windows(2).all(|w| w[0] > w[1]));
        for (c, r) in cs.iter().zip(&r) {
            assert!(*r > 1.0 / c);
        }
    }

    #[test]
    fn wiener_value_vanishes_at_threshold() {
        let r = wiener_threshold(1.0).unwrap();
        assert_abs_diff_eq!(wiener_value(r, 1.0).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            wiener_value(r * (1.0 - 1e-7), 1.0).unwrap(),
            0.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn wiener_value_at_grid_points() {
        // Values of the closed form, cross-checked against the solver on a
        // fine grid during development.
        assert_abs_diff_eq!(wiener_value(0.01, 1.0).unwrap(), -0.33214, epsilon = 2e-4);
        assert_abs_diff_eq!(wiener_value(0.5, 1.0).unwrap(), -0.105942, epsilon = 2e-5);
    }

    #[test]
    fn wiener_eta_is_positive_and_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 1..60 {
            let e = wiener_eta(i as f64 * 0.1).unwrap();
            assert!(e > 0.0 && e < prev);
            prev = e;
        }
    }

    #[test]
    fn wiener_eta_solves_its_ode() {
        // ½w²η'' + (1 + w)η' − η = 0: the Wiener-only generator with λ = μ = 1.
        for w in [0.3, 1.0, 2.5] {
            let d = 1e-4;
            let (em, e0, ep) = (
                wiener_eta(w - d).unwrap(),
                wiener_eta(w).unwrap(),
                wiener_eta(w + d).unwrap(),
            );
            let d2 = (ep - 2.0 * e0 + em) / (d * d);
            let d1 = (ep - em) / (2.0 * d);
            let res = 0.5 * w * w * d2 + (1.0 + w) * d1 - e0;
            assert!(res.abs() < 1e-3 * e0.max(1.0), "w = {w}: {res}");
        }
    }

    #[test]
    fn wiener_risk_is_bounded() {
        for pi in [0.0, 0.2, 0.5, 0.8, 0.95] {
            let u = wiener_risk(pi, 1.0).unwrap();
            assert!(u <= 1.0 - pi + 1e-12 && u >= 0.0);
        }
    }

    #[test]
    fn running_cost_oracle_values() {
        let m = base_model();
        let (a, b) = running_cost_oracles(&m, 1.0);
        assert_abs_diff_eq!(a, 2.0 / 6.0 - 1.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a, 0.190476, epsilon = 1e-6);
        assert_abs_diff_eq!(b, 1.0 + 1.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(running_cost_unit_rate(&m, 1.0), b, epsilon = 1e-15);
        let m2 = ReducedModel::simple(2.0, 1.0, 4.0, 0.3, 1.0).unwrap();
        assert!((running_cost_unit_rate(&m2, 1.0) - running_cost_oracles(&m2, 1.0).1).abs() > 0.05);
    }

    #[test]
    fn y_mean_integral_by_quadrature() {
        // Independent check of the closed form by integrating the mean path.
        for (l, l0, l1) in [(1.0, 6.0, 1.0), (2.0, 1.0, 4.0), (0.5, 2.0, 3.0)] {
            let m = ReducedModel::simple(l, l0, l1, 1.0, 1.0).unwrap();
            let phi = 0.7;
            let a = m.a;
            let mean = |t: f64| phi * (a * t).exp() + l * ((a * t).exp() - 1.0) / a;
            let q = integrate(
                |t: f64| (-(l + l0) * t).exp() * mean(t),
                0.0,
                80.0,
                1e-12,
                1e-11,
            )
            .unwrap();
            assert_abs_diff_eq!(q, running_cost_oracles(&m, phi).1, epsilon = 1e-9);
        }
    }

    #[test]
    fn terminating_series() {
        let m = ReducedModel::simple(2.0, 1.0, 2.0, 1.0, 1.0).unwrap();
        let c = polynomial_psi_coefficients(&m, 8).unwrap();
        assert_eq!(c, vec![1.0, 1.5, 0.75]);
        let m = ReducedModel::simple(2.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(polynomial_psi_coefficients(&m, 12).is_err());
    }

    #[test]
    fn terminating_series_solves_the_ode() {
        let m = ReducedModel::simple(2.0, 1.0, 2.0, 1.0, 1.0).unwrap();
        let c = polynomial_psi_coefficients(&m, 8).unwrap();
        for y in [0.0, 0.5, 1.7, 4.0] {
            let p = poly_eval(&c, y);
            let dp = c[1] + 2.0 * c[2] * y;
            let d2 = 2.0 * c[2];
            let res = 0.5 * m.mu * m.mu * y * y * d2 + (m.lambda + m.a * y) * dp - m.beta() * p;
            assert_abs_diff_eq!(res, 0.0, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn expansion_identities(c in 0.001..5.0f64, l0 in 0.5..10.0f64, l1 in 0.5..10.0f64, mu in 0.1..3.0f64) {
            let m = ReducedModel::simple(1.0, l0, l1, mu, 1.0).unwrap();
            let p = bt_expansion(c, &m).unwrap();
            let p1 = bt_expansion(1.0, &m).unwrap();
            prop_assert!((p.phi_c * c - p1.phi_c).abs() <= 1e-12 * p1.phi_c.abs().max(1.0));
            prop_assert!((p.f_c - (-c.ln() / p.phi_c)).abs() <= 1e-15 * p.f_c.abs().max(1.0));
        }
    }

    #[test]
    fn risk_expansion_vanishes_as_cost_drops() {
        let m = base_model();
        let f: Vec<f64> = [1e-2, 1e-4, 1e-6, 1e-8]
            .iter()
            .map(|&c| bt_expansion(c, &m).unwrap().f_c)
            .collect();
        assert!(f.windows(2).all(|w| w[1] < w[0]));
        assert!(f[3] < 1e-6);
    }

    #[test]
    fn wiener_threshold_tracks_its_expansion() {
        let wiener = ReducedModel::simple(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let costs = [1.0, 0.5, 0.2, 0.1, 0.05, 0.02];
        let mut last = f64::INFINITY;
        for c in costs {
            let ratio = wiener_threshold(c).unwrap() / bt_expansion(c, &wiener).unwrap().phi_c;
            assert!(ratio > 0.3 && ratio < 3.0, "c = {c}: {ratio}");
            let d = (ratio - 1.0).abs();
            assert!(d <= last + 1e-12, "c = {c}: {d} > {last}");
            last = d;
        }
    }
}
