//! Problem specification and the reduction of several observation sources to
//! the canonical one-Wiener, one-point-process model.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::marks::{JumpFactorTable, MarkModel};

/// One compound Poisson observation source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonSource {
    /// Arrival rate before the disorder.
    pub rate_pre: f64,
    /// Arrival rate after the disorder.
    pub rate_post: f64,
    #[serde(default)]
    pub marks: MarkModel,
}

/// The observation setup as the user describes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Post-disorder drift of each independent Wiener observation.
    pub wiener_drifts: Vec<f64>,
    pub poisson_sources: Vec<PoissonSource>,
    /// Rate `λ` of the exponential part of the disorder-time prior.
    pub disorder_rate: f64,
    /// Prior probability `π` that the disorder happened before time 0.
    pub prior_mass: f64,
    /// Cost `c` per unit of detection delay.
    pub delay_cost: f64,
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.wiener_drifts.iter().any(|m| !m.is_finite()) {
            return Err(invalid("wiener_drifts", "drifts must be finite"));
        }
        if self.poisson_sources.is_empty() {
            return Err(invalid(
                "poisson_sources",
                "at least one Poisson source is required (use rate_pre = rate_post for a Wiener-only problem)",
            ));
        }
        for s in &self.poisson_sources {
            positive("poisson_sources.rate_pre", s.rate_pre)?;
            positive("poisson_sources.rate_post", s.rate_post)?;
            s.marks.validate()?;
        }
        positive("disorder_rate", self.disorder_rate)?;
        positive("delay_cost", self.delay_cost)?;
        if !(0.0..1.0).contains(&self.prior_mass) {
            return Err(invalid(
                "prior_mass",
                format!("must lie in [0, 1), got {}", self.prior_mass),
            ));
        }
        if self.wiener_drifts.iter().all(|&m| m == 0.0) {
            return Err(Error::ZeroDrift);
        }
        Ok(())
    }
}

fn positive(field: &'static str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite and > 0, got {x}")))
    }
}

/// Canonical parameters after reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedModel {
    /// Euclidean norm of the drift vector.
    pub mu: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda: f64,
    /// `λ − λ1 + λ0`, the linear drift coefficient of the odds process.
    pub a: f64,
    pub c: f64,
    pub pi: f64,
    pub marks: MarkModel,
}

impl ReducedModel {
    /// Builds a canonical model directly. `a` is derived.
    pub fn new(
        lambda: f64,
        lambda0: f64,
        lambda1: f64,
        mu: f64,
        c: f64,
        pi: f64,
        marks: MarkModel,
    ) -> Result<Self> {
        positive("lambda", lambda)?;
        positive("lambda0", lambda0)?;
        positive("lambda1", lambda1)?;
        positive("c", c)?;
        if !mu.is_finite() {
            return Err(invalid("mu", "must be finite"));
        }
        if mu == 0.0 {
            return Err(Error::ZeroDrift);
        }
        if !(0.0..1.0).contains(&pi) {
            return Err(invalid("pi", format!("must lie in [0, 1), got {pi}")));
        }
        marks.validate()?;
        Ok(Self {
            mu: mu.abs(),
            lambda0,
            lambda1,
            lambda,
            a: lambda - lambda1 + lambda0,
            c,
            pi,
            marks,
        })
    }

    /// Unmarked model from `λ, λ0, λ1, μ, c`.
    pub fn simple(lambda: f64, lambda0: f64, lambda1: f64, mu: f64, c: f64) -> Result<Self> {
        Self::new(lambda, lambda0, lambda1, mu, c, 0.0, MarkModel::Simple)
    }

    pub fn with_cost(&self, c: f64) -> Result<Self> {
        positive("c", c)?;
        Ok(Self { c, ..self.clone() })
    }

    pub fn with_prior(&self, pi: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&pi) {
            return Err(invalid("pi", format!("must lie in [0, 1), got {pi}")));
        }
        Ok(Self { pi, ..self.clone() })
    }

    /// Discount rate `λ + λ0` of the single-jump problems.
    pub fn beta(&self) -> f64 {
        self.lambda + self.lambda0
    }

    /// Contraction factor `λ0 / (λ + λ0)` of the successive approximations.
    pub fn rho(&self) -> f64 {
        self.lambda0 / (self.lambda + self.lambda0)
    }

    /// Initial odds `π / (1 − π)`.
    pub fn initial_odds(&self) -> f64 {
        self.pi / (1.0 - self.pi)
    }

    pub fn jump_table(&self) -> JumpFactorTable {
        JumpFactorTable::new(&self.marks, self.lambda1 / self.lambda0)
    }

    pub fn running_cost(&self, phi: f64) -> f64 {
        running_cost_g(phi, self)
    }
}

/// Reduces independent Wiener and compound Poisson sources that change at the
/// same time to one scalar Wiener process and one marked point process.
pub fn reduce_sources(spec: &SourceSpec) -> Result<ReducedModel> {
    spec.validate()?;
    let mu = spec.wiener_drifts.iter().map(|m| m * m).sum::<f64>().sqrt();
    let lambda0: f64 = spec.poisson_sources.iter().map(|s| s.rate_pre).sum();
    let lambda1: f64 = spec.poisson_sources.iter().map(|s| s.rate_post).sum();
    let parts: Vec<(f64, f64, &MarkModel)> = spec
        .poisson_sources
        .iter()
        .map(|s| (s.rate_pre / lambda0, s.rate_post / lambda1, &s.marks))
        .collect();
    let marks = MarkModel::mixture(&parts)?;
    ReducedModel::new(
        spec.disorder_rate,
        lambda0,
        lambda1,
        mu,
        spec.delay_cost,
        spec.prior_mass,
        marks,
    )
}

/// Running cost `g(φ) = φ − λ/c` of the stopping problem in odds units.
pub fn running_cost_g(phi: f64, model: &ReducedModel) -> f64 {
    phi - model.lambda / model.c
}

/// Bayes risk `1 − π + c(1 − π)V(π/(1 − π))` from the value function at the
/// initial odds.
pub fn bayes_risk_from_value(pi: f64, value_at_odds: f64, c: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&pi) {
        return Err(invalid("pi", format!("must lie in [0, 1), got {pi}")));
    }
    positive("c", c)?;
    let lower = -1.0 / c;
    if !(lower..=0.0).contains(&value_at_odds) {
        return Err(Error::ValueOutOfBounds {
            value: value_at_odds,
            lower,
        });
    }
    let risk = (1.0 - pi) * (1.0 + c * value_at_odds);
    Ok(risk.clamp(0.0, 1.0 - pi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn source(pre: f64, post: f64) -> PoissonSource {
        PoissonSource {
            rate_pre: pre,
            rate_post: post,
            marks: MarkModel::Simple,
        }
    }

    fn spec(drifts: Vec<f64>, sources: Vec<PoissonSource>) -> SourceSpec {
        SourceSpec {
            wiener_drifts: drifts,
            poisson_sources: sources,
            disorder_rate: 1.0,
            prior_mass: 0.0,
            delay_cost: 1.0,
        }
    }

    #[test]
    fn drift_vector_reduces_to_its_norm() {
        let m = reduce_sources(&spec(vec![3.0, 4.0], vec![source(2.0, 1.0)])).unwrap();
        assert_eq!(m.mu, 5.0);
        assert_eq!((m.lambda0, m.lambda1), (2.0, 1.0));
        assert_eq!(m.a, m.lambda + 1.0);
    }

    #[test]
    fn rates_aggregate_and_marks_mix() {
        let a = MarkModel::discrete(&["x"], &[1.0], &[1.0]).unwrap();
        let b = MarkModel::discrete(&["y"], &[1.0], &[1.0]).unwrap();
        let mut s = spec(vec![1.0], vec![source(2.0, 1.0), source(4.0, 0.5)]);
        s.poisson_sources[0].marks = a;
        s.poisson_sources[1].marks = b;
        let m = reduce_sources(&s).unwrap();
        assert_eq!(m.lambda0, 6.0);
        assert_eq!(m.lambda1, 1.5);
        let MarkModel::Discrete { atoms, nu0, nu1 } = &m.marks else {
            panic!("expected discrete marks");
        };
        assert_eq!(atoms, &["x".to_string(), "y".to_string()]);
        assert_abs_diff_eq!(nu0[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(nu0[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(nu1[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(nu1[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn a_is_derived() {
        let m = ReducedModel::simple(1.0, 6.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(m.a, 6.0);
    }

    #[test]
    fn zero_drift_is_rejected() {
        let err = reduce_sources(&spec(vec![0.0, 0.0], vec![source(1.0, 1.0)])).unwrap_err();
        assert_eq!(err, Error::ZeroDrift);
        assert!(err.to_string().contains("μ ≠ 0"));
    }

    #[test]
    fn bad_prior_is_rejected() {
        let mut s = spec(vec![1.0], vec![source(1.0, 1.0)]);
        s.prior_mass = 1.0;
        assert!(reduce_sources(&s).is_err());
    }

    #[test]
    fn absolute_continuity_names_the_atom() {
        let mut s = spec(vec![1.0], vec![source(1.0, 1.0)]);
        s.poisson_sources[0].marks = MarkModel::Discrete {
            atoms: vec!["a".into(), "b".into()],
            nu0: vec![1.0, 0.0],
            nu1: vec![0.5, 0.5],
        };
        match reduce_sources(&s).unwrap_err() {
            Error::AbsoluteContinuity { atom, .. } => assert_eq!(atom, "b"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn single_canonical_source_is_unchanged() {
        let s = spec(vec![1.5], vec![source(6.0, 1.0)]);
        let m = reduce_sources(&s).unwrap();
        let back = SourceSpec {
            wiener_drifts: vec![m.mu],
            poisson_sources: vec![PoissonSource {
                rate_pre: m.lambda0,
                rate_post: m.lambda1,
                marks: m.marks.clone(),
            }],
            disorder_rate: m.lambda,
            prior_mass: m.pi,
            delay_cost: m.c,
        };
        assert_eq!(reduce_sources(&back).unwrap(), m);
    }

    #[test]
    fn running_cost_values() {
        let m = ReducedModel::simple(1.0, 6.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(running_cost_g(1.0, &m), 0.0);
        assert_eq!(running_cost_g(0.0, &m), -1.0);
        assert_eq!(running_cost_g(2.0, &m), 1.0);
    }

    #[test]
    fn risk_bridge() {
        assert_eq!(bayes_risk_from_value(0.3, 0.0, 1.0).unwrap(), 0.7);
        assert_abs_diff_eq!(
            bayes_risk_from_value(0.5, -0.3, 1.0).unwrap(),
            0.35,
            epsilon = 1e-15
        );
        assert!(bayes_risk_from_value(1.0 - 1e-12, -0.5, 1.0).unwrap() < 1e-11);
        assert!(bayes_risk_from_value(0.5, 0.1, 1.0).is_err());
        assert!(bayes_risk_from_value(0.5, -1.5, 1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn risk_within_bounds(pi in 0.0..0.999f64, c in 0.01..10.0f64, t in 0.0..=1.0f64) {
                let v = -t / c;
                let r = bayes_risk_from_value(pi, v, c).unwrap();
                prop_assert!(r >= 0.0 && r <= 1.0 - pi);
            }

            #[test]
            fn running_cost_is_affine(p1 in 0.0..100.0f64, p2 in 0.0..100.0f64, al in 0.0..=1.0f64) {
                // Dyadic parameters keep the arithmetic exact.
                let m = ReducedModel::simple(2.0, 1.0, 1.0, 1.0, 0.5).unwrap();
                let q = |x: f64| (x * 1024.0).round() / 1024.0;
                let (p1, p2, al) = (q(p1), q(p2), (al * 16.0).round() / 16.0);
                let lhs = running_cost_g(al * p1 + (1.0 - al) * p2, &m);
                let rhs = al * running_cost_g(p1, &m) + (1.0 - al) * running_cost_g(p2, &m);
                prop_assert_eq!(lhs, rhs);
            }

            #[test]
            fn mixture_weights_sum_to_one(
                rates in proptest::collection::vec((0.1..10.0f64, 0.1..10.0f64), 1..5),
                w in proptest::collection::vec(0.05..1.0f64, 3),
            ) {
                let sum: f64 = w.iter().sum();
                let nu: Vec<f64> = w.iter().map(|x| x / sum).collect();
                let marks = MarkModel::discrete(&["p", "q", "r"], &nu, &nu).unwrap();
                let s = spec(
                    vec![1.0],
                    rates.iter().map(|&(a, b)| PoissonSource { rate_pre: a, rate_post: b, marks: marks.clone() }).collect(),
                );
                let m = reduce_sources(&s).unwrap();
                let MarkModel::Discrete { nu0, nu1, .. } = &m.marks else { panic!() };
                prop_assert!((nu0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!((nu1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
