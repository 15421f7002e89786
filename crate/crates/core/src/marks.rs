//! Finite-support mark distributions and the jump operator
//! `(Kw)(φ) = Σ_i ν0_i · w((λ1/λ0) f(z_i) φ)`.
//!
//! Continuous mark laws must be discretized by the caller. With finite
//! support `K` is an exact finite sum, so it adds no quadrature error to the
//! value iteration.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const SUM_TOL: f64 = 1e-12;

/// Pre- and post-change distribution of the marks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MarkModel {
    /// Unmarked point process; the likelihood ratio is identically 1.
    #[default]
    Simple,
    /// Atoms carry user labels; weights are aligned with `atoms`.
    Discrete {
        atoms: Vec<String>,
        nu0: Vec<f64>,
        nu1: Vec<f64>,
    },
}

impl MarkModel {
    pub fn discrete<S: AsRef<str>>(atoms: &[S], nu0: &[f64], nu1: &[f64]) -> Result<Self> {
        let m = MarkModel::Discrete {
            atoms: atoms.iter().map(|a| a.as_ref().to_string()).collect(),
            nu0: nu0.to_vec(),
            nu1: nu1.to_vec(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let MarkModel::Discrete { atoms, nu0, nu1 } = self else {
            return Ok(());
        };
        if atoms.is_empty() || nu0.len() != atoms.len() || nu1.len() != atoms.len() {
            return Err(invalid(
                "marks",
                "atoms, nu0 and nu1 must be nonempty and of equal length",
            ));
        }
        for (i, a) in atoms.iter().enumerate() {
            if atoms[..i].contains(a) {
                return Err(invalid("marks.atoms", format!("duplicate atom `{a}`")));
            }
        }
        if nu0.iter().chain(nu1).any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("marks", "weights must be finite and nonnegative"));
        }
        for (name, w) in [("marks.nu0", nu0), ("marks.nu1", nu1)] {
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(invalid(name, format!("weights sum to {s}, not 1")));
            }
        }
        for i in 0..atoms.len() {
            likelihood_ratio(self, i)?;
        }
        Ok(())
    }

    /// Mixes several mark models with separate pre- and post-change weights.
    ///
    /// Atoms with identical labels are merged. Unmarked sources share the
    /// atom with the empty label, and a mixture of unmarked sources only is
    /// again unmarked.
    pub fn mixture(parts: &[(f64, f64, &MarkModel)]) -> Result<Self> {
        if parts.iter().all(|(_, _, m)| matches!(m, MarkModel::Simple)) {
            return Ok(MarkModel::Simple);
        }
        let mut atoms: Vec<String> = Vec::new();
        let mut nu0: Vec<f64> = Vec::new();
        let mut nu1: Vec<f64> = Vec::new();
        let mut add = |label: &str, w0: f64, w1: f64| {
            let i = match atoms.iter().position(|a| a == label) {
                Some(i) => i,
                None => {
                    atoms.push(label.to_string());
                    nu0.push(0.0);
                    nu1.push(0.0);
                    atoms.len() - 1
                }
            };
            nu0[i] += w0;
            nu1[i] += w1;
        };
        for &(p0, p1, m) in parts {
            match m {
                MarkModel::Simple => add("", p0, p1),
                MarkModel::Discrete {
                    atoms: a,
                    nu0: n0,
                    nu1: n1,
                } => {
                    for j in 0..a.len() {
                        add(&a[j], p0 * n0[j], p1 * n1[j]);
                    }
                }
            }
        }
        let m = MarkModel::Discrete { atoms, nu0, nu1 };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        match self {
            MarkModel::Simple => 1,
            MarkModel::Discrete { atoms, .. } => atoms.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Likelihood ratio `f = dν1/dν0` at one atom.
pub fn likelihood_ratio(m: &MarkModel, atom_index: usize) -> Result<f64> {
    match m {
        MarkModel::Simple => Ok(1.0),
        MarkModel::Discrete { atoms, nu0, nu1 } => {
            if atom_index >= atoms.len() {
                return Err(invalid(
                    "atom_index",
                    format!("{atom_index} out of range for {} atoms", atoms.len()),
                ));
            }
            let (w0, w1) = (nu0[atom_index], nu1[atom_index]);
            if w0 == 0.0 {
                if w1 > 0.0 {
                    return Err(Error::AbsoluteContinuity {
                        atom: atoms[atom_index].clone(),
                        nu1: w1,
                    });
                }
                return Ok(0.0);
            }
            Ok(w1 / w0)
        }
    }
}

/// Multiplicative odds jumps `r_i = (λ1/λ0) f(z_i)` with pre-change weights.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpFactorTable {
    pub factors: Vec<f64>,
    pub weights: Vec<f64>,
}

impl JumpFactorTable {
    /// Atoms without pre-change mass never occur under the reference measure
    /// and are dropped.
    pub fn new(marks: &MarkModel, rate_ratio: f64) -> Self {
        match marks {
            MarkModel::Simple => Self {
                factors: vec![rate_ratio],
                weights: vec![1.0],
            },
            MarkModel::Discrete { nu0, nu1, .. } => {
                let (factors, weights) = nu0
                    .iter()
                    .zip(nu1)
                    .filter(|(w0, _)| **w0 > 0.0)
                    .map(|(w0, w1)| (rate_ratio * w1 / w0, *w0))
                    .unzip();
                Self { factors, weights }
            }
        }
    }

    /// `Σ ν0_i r_i`, which equals `λ1/λ0` up to rounding.
    pub fn mean_factor(&self) -> f64 {
        self.factors
            .iter()
            .zip(&self.weights)
            .map(|(r, w)| r * w)
            .sum()
    }

    pub fn max_factor(&self) -> f64 {
        self.factors.iter().copied().fold(0.0, f64::max)
    }
}

/// A function of the odds defined on all of `[0, ∞)`.
///
/// Grid functions implement this by linear interpolation below their
/// threshold and by 0 at and above it.
pub trait ExtendedFn {
    fn at(&self, x: f64) -> f64;
}

impl<F: Fn(f64) -> f64> ExtendedFn for F {
    fn at(&self, x: f64) -> f64 {
        self(x)
    }
}

/// The constant function, with no threshold extension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant(pub f64);

impl ExtendedFn for Constant {
    fn at(&self, _x: f64) -> f64 {
        self.0
    }
}

/// `(Kw)(φ)`.
pub fn apply_k<W: ExtendedFn + ?Sized>(w: &W, phi: f64, table: &JumpFactorTable) -> f64 {
    table
        .factors
        .iter()
        .zip(&table.weights)
        .map(|(r, nu)| nu * w.at(r * phi))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::interp_uniform;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn likelihood_ratio_examples() {
        let m = MarkModel::discrete(&["a", "b"], &[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert_eq!(likelihood_ratio(&m, 0).unwrap(), 0.5);
        assert_eq!(likelihood_ratio(&m, 1).unwrap(), 1.5);
        assert_eq!(likelihood_ratio(&MarkModel::Simple, 7).unwrap(), 1.0);
        let bad = MarkModel::Discrete {
            atoms: vec!["a".into(), "b".into()],
            nu0: vec![1.0, 0.0],
            nu1: vec![0.5, 0.5],
        };
        assert!(matches!(
            likelihood_ratio(&bad, 1),
            Err(Error::AbsoluteContinuity { .. })
        ));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(MarkModel::discrete(&["a", "b"], &[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(MarkModel::discrete(&["a", "a"], &[0.5, 0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn k_of_constant_is_constant() {
        let m = MarkModel::discrete(&["a", "b", "c"], &[0.2, 0.3, 0.5], &[0.5, 0.4, 0.1]).unwrap();
        let t = JumpFactorTable::new(&m, 0.7);
        for phi in [0.0, 0.3, 2.0, 50.0] {
            assert_abs_diff_eq!(apply_k(&Constant(-1.0), phi, &t), -1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn k_simple_substitutes() {
        let t = JumpFactorTable::new(&MarkModel::Simple, 1.0 / 6.0);
        let w = |x: f64| x * x - 3.0;
        assert_abs_diff_eq!(apply_k(&w, 6.0, &t), w(1.0), epsilon = 1e-15);
    }

    #[test]
    fn k_of_identity_scales_by_rate_ratio() {
        let m = MarkModel::discrete(&["a", "b"], &[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let t = JumpFactorTable::new(&m, 1.0 / 6.0);
        assert_abs_diff_eq!(t.mean_factor(), 1.0 / 6.0, epsilon = 1e-15);
        let id = |x: f64| x;
        assert_abs_diff_eq!(apply_k(&id, 3.0, &t), 0.5, epsilon = 1e-15);
    }

    fn table() -> impl Strategy<Value = JumpFactorTable> {
        (
            proptest::collection::vec((0.05..1.0f64, 0.0..1.0f64), 1..5),
            0.1..3.0f64,
        )
            .prop_map(|(w, ratio)| {
                let s0: f64 = w.iter().map(|p| p.0).sum();
                let s1: f64 = w.iter().map(|p| p.1).sum::<f64>().max(1e-9);
                let labels: Vec<String> = (0..w.len()).map(|i| i.to_string()).collect();
                let nu0: Vec<f64> = w.iter().map(|p| p.0 / s0).collect();
                let mut nu1: Vec<f64> = w.iter().map(|p| p.1 / s1).collect();
                let fix = 1.0 - nu1.iter().sum::<f64>();
                nu1[0] = (nu1[0] + fix).max(0.0);
                let m = MarkModel::Discrete {
                    atoms: labels,
                    nu0,
                    nu1,
                };
                JumpFactorTable::new(&m, ratio)
            })
    }

    /// Concave nondecreasing grid function ending at 0, extended by 0.
    fn concave_grid() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0..1.0f64, 2..40).prop_map(|mut slopes| {
            slopes.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut v = vec![0.0; slopes.len() + 1];
            for i in (0..slopes.len()).rev() {
                v[i] = v[i + 1] - slopes[i] * 0.1;
            }
            v
        })
    }

    fn extend(v: &[f64]) -> impl Fn(f64) -> f64 + '_ {
        move |x| {
            if x >= (v.len() - 1) as f64 * 0.1 {
                0.0
            } else {
                interp_uniform(v, 0.1, x)
            }
        }
    }

    proptest! {
        #[test]
        fn k_is_monotone(t in table(), v in concave_grid(), bump in proptest::collection::vec(0.0..0.5f64, 40)) {
            let v2: Vec<f64> = v.iter().zip(&bump).map(|(x, b)| (x + b).min(0.0)).collect();
            let (w1, w2) = (extend(&v), extend(&v2));
            for i in 0..60 {
                let phi = i as f64 * 0.1;
                prop_assert!(apply_k(&w1, phi, &t) <= apply_k(&w2, phi, &t) + 1e-15);
            }
        }

        #[test]
        fn k_preserves_bounds(t in table(), v in concave_grid()) {
            let w = extend(&v);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            for i in 0..60 {
                let k = apply_k(&w, i as f64 * 0.1, &t);
                prop_assert!(k >= lo - 1e-12 && k <= 1e-12);
            }
        }

        #[test]
        fn k_preserves_concavity(t in table(), v in concave_grid()) {
            let w = extend(&v);
            let k: Vec<f64> = (0..80).map(|i| apply_k(&w, i as f64 * 0.05, &t)).collect();
            for i in 1..k.len() - 1 {
                prop_assert!(k[i + 1] - 2.0 * k[i] + k[i - 1] <= 1e-10);
            }
        }
    }
}
