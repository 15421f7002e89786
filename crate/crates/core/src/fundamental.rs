//! Increasing and decreasing fundamental solutions `ψ`, `η` of
//! `(λ + λ0) u = 𝒜0 u`, where `𝒜0` is the generator of the between-jump
//! diffusion `dY = (λ + aY) dt + μY dX`.
//!
//! Both are built edge by edge from hitting-time transforms of the chain:
//! `ψ(z_n) = ψ(z_{n+1}) E^{z_n}[e^{−βτ_{z_{n+1}}}]` and
//! `η(z_n) = η(z_{n+1}) / E^{z_{n+1}}[e^{−βτ_{z_n}}]`, normalized to 1 at the
//! top node. Values are stored as logarithms because `η` grows like the
//! scale density near 0 and overflows quickly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chain::{
    check_factor, exact_down_factors, exact_up_continue, hitting_laplace, GridSpec, MCConfig,
};
use crate::error::{invalid, Error, Result};
use crate::model::ReducedModel;
use crate::numeric::{
    derivative, isotonic_decreasing, isotonic_increasing, log_add_exp, median, quantile,
};

/// Dispersion above which the Wronskian reference is flagged as noisy.
pub const DISPERSION_WARN: f64 = 0.2;

/// Nodes whose numerical-diffusion ratio `h|λ + ay|/(μ²y²)` is below this are
/// used for the Wronskian reference.
const RESOLVED_RATIO: f64 = 0.05;

/// How hitting-time transforms are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    /// First-step analysis of the chain; deterministic.
    #[default]
    Exact,
    /// Simulation of the chain.
    MonteCarlo(MCConfig),
}

/// `ψ`, `η` on a grid, with the scale density and Wronskian diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalSolutions {
    pub grid: GridSpec,
    pub model: ReducedModel,
    pub estimator: Estimator,
    pub ln_psi: Vec<f64>,
    pub ln_eta: Vec<f64>,
    /// Accumulated relative standard error per node (zero for exact).
    pub psi_rel_err: Vec<f64>,
    pub eta_rel_err: Vec<f64>,
    /// `ln S'(y)`; `+∞` at `y = 0`.
    pub ln_s_prime: Vec<f64>,
    pub b_ref: f64,
    /// Interquartile range over median of `B(y)/S'(y)`.
    pub dispersion: f64,
    edges: EdgeFactors,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct EdgeFactors {
    ln_up: Vec<f64>,
    up_var: Vec<f64>,
    ln_down: Vec<f64>,
    down_var: Vec<f64>,
}

/// `S'(y) = exp(2λ/(μ²y))·y^(−2a/μ²)`.
pub fn scale_density(y: f64, model: &ReducedModel) -> Result<f64> {
    Ok(ln_scale_density(y, model)?.exp())
}

pub fn ln_scale_density(y: f64, model: &ReducedModel) -> Result<f64> {
    if !(y > 0.0) {
        return Err(invalid("y", "scale density is singular at y ≤ 0"));
    }
    Ok(ln_s(y, model))
}

#[inline]
pub(crate) fn ln_s(y: f64, m: &ReducedModel) -> f64 {
    let mu2 = m.mu * m.mu;
    2.0 * m.lambda / (mu2 * y) - 2.0 * m.a / mu2 * y.ln()
}

/// Log of the speed weight `y^(2(a/μ²−1))·e^(−2λ/(μ²y)) = 1/(y² S'(y))`.
#[inline]
pub(crate) fn ln_speed(y: f64, m: &ReducedModel) -> f64 {
    if y <= 0.0 {
        f64::NEG_INFINITY
    } else {
        -ln_s(y, m) - 2.0 * y.ln()
    }
}

fn edge_estimates(
    grid: &GridSpec,
    model: &ReducedModel,
    mc: &MCConfig,
    edges: std::ops::Range<usize>,
    up: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let beta = model.beta();
    let mut ln = Vec::with_capacity(edges.len());
    let mut var = Vec::with_capacity(edges.len());
    for i in edges {
        let (from, to) = if up { (i, i + 1) } else { (i + 1, i) };
        let e = hitting_laplace(grid.h, from, to, beta, mc, model)?;
        check_factor(from, &e)?;
        if e.mean <= 3.0 * e.stderr || e.mean <= 0.0 {
            return Err(Error::DivisionInstability {
                node: from,
                mean: e.mean,
                stderr: e.stderr,
            });
        }
        // Clip noise above 1; a transform of a positive time is below 1.
        let m = e.mean.min(1.0 - f64::EPSILON);
        ln.push(m.ln());
        var.push((e.stderr / e.mean).powi(2));
    }
    Ok((ln, var))
}

/// `ln ψ` and its per-node relative error, with `ψ(z_max) = 1`.
pub fn compute_psi(
    grid: &GridSpec,
    model: &ReducedModel,
    estimator: &Estimator,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ln_up, var) = up_factors(grid, model, estimator)?;
    Ok(accumulate_down(&ln_up, &var, 1.0))
}

/// `ln η` and its per-node relative error, with `η(z_max) = 1`.
pub fn compute_eta(
    grid: &GridSpec,
    model: &ReducedModel,
    estimator: &Estimator,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ln_down, var) = down_factors(grid, model, estimator)?;
    Ok(accumulate_down(&ln_down, &var, -1.0))
}

fn up_factors(
    grid: &GridSpec,
    model: &ReducedModel,
    est: &Estimator,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = grid.n_points;
    match est {
        Estimator::Exact => {
            let mut ln = Vec::with_capacity(n);
            exact_up_continue(grid.h, 0, n, model.beta(), model, &mut ln);
            Ok((ln, vec![0.0; n]))
        }
        Estimator::MonteCarlo(mc) => edge_estimates(grid, model, mc, 0..n, true),
    }
}

fn down_factors(
    grid: &GridSpec,
    model: &ReducedModel,
    est: &Estimator,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = grid.n_points;
    match est {
        Estimator::Exact => Ok((
            exact_down_factors(grid.h, n, model.beta(), model),
            vec![0.0; n],
        )),
        Estimator::MonteCarlo(mc) => edge_estimates(grid, model, mc, 0..n, false),
    }
}

/// Backward products from the top node: `ln f_n = ln f_{n+1} + sign·ln e_n`.
fn accumulate_down(ln_edge: &[f64], var: &[f64], sign: f64) -> (Vec<f64>, Vec<f64>) {
    let n = ln_edge.len();
    let mut ln = vec![0.0; n + 1];
    let mut acc_var = vec![0.0; n + 1];
    for i in (0..n).rev() {
        ln[i] = ln[i + 1] + sign * ln_edge[i];
        acc_var[i] = acc_var[i + 1] + var[i];
    }
    (ln, acc_var.into_iter().map(f64::sqrt).collect())
}

impl FundamentalSolutions {
    pub fn compute(grid: GridSpec, model: &ReducedModel, estimator: Estimator) -> Result<Self> {
        grid.validate_for(model)?;
        let (ln_up, up_var) = up_factors(&grid, model, &estimator)?;
        let (ln_down, down_var) = down_factors(&grid, model, &estimator)?;
        let mut fs = Self {
            grid,
            model: model.clone(),
            estimator,
            ln_psi: Vec::new(),
            ln_eta: Vec::new(),
            psi_rel_err: Vec::new(),
            eta_rel_err: Vec::new(),
            ln_s_prime: Vec::new(),
            b_ref: f64::NAN,
            dispersion: f64::NAN,
            edges: EdgeFactors {
                ln_up,
                up_var,
                ln_down,
                down_var,
            },
        };
        let (lp, ep) = accumulate_down(&fs.edges.ln_up, &fs.edges.up_var, 1.0);
        let (le, ee) = accumulate_down(&fs.edges.ln_down, &fs.edges.down_var, -1.0);
        fs.ln_psi = lp;
        fs.ln_eta = le;
        fs.psi_rel_err = ep;
        fs.eta_rel_err = ee;
        fs.finish();
        Ok(fs)
    }

    /// Smoothing (Monte Carlo only), scale density and Wronskian reference.
    fn finish(&mut self) {
        if matches!(self.estimator, Estimator::MonteCarlo(_)) {
            let w = vec![1.0; self.ln_psi.len()];
            self.ln_psi = isotonic_increasing(&self.ln_psi, &w);
            self.ln_eta = isotonic_decreasing(&self.ln_eta, &w);
        }
        self.ln_s_prime = (0..self.grid.len())
            .map(|i| {
                if i == 0 {
                    f64::INFINITY
                } else {
                    ln_s(self.grid.node(i), &self.model)
                }
            })
            .collect();
        let (b, d) = wronskian_ref(self);
        self.b_ref = b;
        self.dispersion = d;
    }

    pub fn len(&self) -> usize {
        self.ln_psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ln_psi.is_empty()
    }

    pub fn psi(&self, i: usize) -> f64 {
        self.ln_psi[i].exp()
    }

    /// May be `+∞` near 0, where only `ln_eta` is meaningful.
    pub fn eta(&self, i: usize) -> f64 {
        self.ln_eta[i].exp()
    }

    pub fn psi_values(&self) -> Vec<f64> {
        self.ln_psi.iter().map(|l| l.exp()).collect()
    }

    pub fn dispersion_warning(&self) -> bool {
        !(self.dispersion <= DISPERSION_WARN)
    }

    /// Extends the grid upward with the forward relations
    /// `ψ(z_{n+1}) = ψ(z_n) / E^{z_n}[e^{−βτ_{z_{n+1}}}]` and
    /// `η(z_{n+1}) = η(z_n) · E^{z_{n+1}}[e^{−βτ_{z_n}}]`.
    /// Existing nodes keep their values, so the top node is no longer
    /// normalized to 1.
    pub fn extend_grid(&self, new_z_max: f64) -> Result<Self> {
        if !(new_z_max > self.grid.z_max) {
            return Err(invalid("new_z_max", "must exceed the current z_max"));
        }
        let grid = GridSpec::covering(self.grid.h, new_z_max)?;
        let (old, new) = (self.grid.n_points, grid.n_points);
        let model = &self.model;
        let mut edges = self.edges.clone();
        match &self.estimator {
            Estimator::Exact => {
                exact_up_continue(grid.h, old, new, model.beta(), model, &mut edges.ln_up);
                edges.up_var.resize(new, 0.0);
                let down = exact_down_factors(grid.h, new, model.beta(), model);
                edges.ln_down.extend_from_slice(&down[old..new]);
                edges.down_var.resize(new, 0.0);
            }
            Estimator::MonteCarlo(mc) => {
                let (l, v) = edge_estimates(&grid, model, mc, old..new, true)?;
                edges.ln_up.extend(l);
                edges.up_var.extend(v);
                let (l, v) = edge_estimates(&grid, model, mc, old..new, false)?;
                edges.ln_down.extend(l);
                edges.down_var.extend(v);
            }
        }
        let mut fs = self.clone();
        fs.grid = grid;
        for i in old..new {
            let lp = fs.ln_psi[i] - edges.ln_up[i];
            let le = fs.ln_eta[i] + edges.ln_down[i];
            fs.ln_psi.push(lp);
            fs.ln_eta.push(le);
            let ep = fs.psi_rel_err[i].hypot(edges.up_var[i].sqrt());
            let ee = fs.eta_rel_err[i].hypot(edges.down_var[i].sqrt());
            fs.psi_rel_err.push(ep);
            fs.eta_rel_err.push(ee);
        }
        fs.edges = edges;
        fs.ln_s_prime.clear();
        // Smoothing is re-applied but cannot move already-monotone old nodes
        // unless the seam itself violates monotonicity.
        fs.finish();
        Ok(fs)
    }

    /// Restricts to the first `n_points` intervals, keeping node values.
    pub fn restrict(&self, n_points: usize) -> Result<Self> {
        if n_points > self.grid.n_points {
            return Err(invalid("n_points", "restriction cannot enlarge the grid"));
        }
        let grid = GridSpec::new(self.grid.h, n_points)?;
        let k = n_points + 1;
        let mut fs = self.clone();
        fs.grid = grid;
        fs.ln_psi.truncate(k);
        fs.ln_eta.truncate(k);
        fs.psi_rel_err.truncate(k);
        fs.eta_rel_err.truncate(k);
        fs.ln_s_prime.truncate(k);
        fs.edges.ln_up.truncate(n_points);
        fs.edges.up_var.truncate(n_points);
        fs.edges.ln_down.truncate(n_points);
        fs.edges.down_var.truncate(n_points);
        let (b, d) = wronskian_ref(&fs);
        fs.b_ref = b;
        fs.dispersion = d;
        Ok(fs)
    }

    /// Columnar CSV: node, y, psi, ln_eta, ln_s_prime, psi_rel_err, eta_rel_err.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "node,y,psi,ln_eta,ln_s_prime,psi_rel_err,eta_rel_err")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{},{},{:.12e},{:.12e},{:.12e},{:.6e},{:.6e}",
                i,
                self.grid.node(i),
                self.psi(i),
                self.ln_eta[i],
                self.ln_s_prime[i],
                self.psi_rel_err[i],
                self.eta_rel_err[i]
            )?;
        }
        Ok(())
    }
}

/// Numerical-diffusion ratio of the chain at `y`.
fn diffusion_ratio(y: f64, h: f64, m: &ReducedModel) -> f64 {
    h * (m.lambda + m.a * y).abs() / (m.mu * m.mu * y * y)
}

/// `(B/S')(y_i)` from five-point derivatives of `ln ψ`, `ln η`.
pub fn wronskian_ratio(fs: &FundamentalSolutions, i: usize) -> f64 {
    let h = fs.grid.h;
    let dp = derivative(&fs.ln_psi, h, i);
    let de = derivative(&fs.ln_eta, h, i);
    (fs.ln_psi[i] + fs.ln_eta[i] - fs.ln_s_prime[i]).exp() * (dp - de)
}

/// Interior nodes used for the Wronskian reference: away from the stencil
/// edges, in the upper three quarters of the grid, and where the chain's
/// numerical diffusion is small. Falls back to the upper half of the grid.
pub fn reference_nodes(fs: &FundamentalSolutions) -> Vec<usize> {
    let n = fs.grid.n_points;
    let h = fs.grid.h;
    let lo = (n / 4).max(2);
    let nodes: Vec<usize> = (lo..n - 1)
        .filter(|&i| i + 2 <= n && diffusion_ratio(fs.grid.node(i), h, &fs.model) <= RESOLVED_RATIO)
        .collect();
    if nodes.len() >= 5 {
        nodes
    } else {
        ((n / 2).max(2)..n - 1).collect()
    }
}

/// Median of `(ψ'η − ψη')/S'` over the reference nodes, with its
/// interquartile range relative to the median.
pub fn wronskian_ref(fs: &FundamentalSolutions) -> (f64, f64) {
    let r: Vec<f64> = reference_nodes(fs)
        .into_iter()
        .map(|i| wronskian_ratio(fs, i))
        .filter(|x| x.is_finite())
        .collect();
    if r.len() < 5 {
        return (f64::NAN, f64::INFINITY);
    }
    let med = median(&r);
    let iqr = quantile(&r, 0.75) - quantile(&r, 0.25);
    (med, iqr / med.abs())
}

/// `ln(η/ψ)` at every node, reconstructed from the Wronskian relation
/// `(η/ψ)' = −B/ψ²` anchored at node `c_ref` with a trapezoid rule.
/// Entries where the reconstruction is not positive are NaN.
pub fn eta_over_psi_from_wronskian(fs: &FundamentalSolutions, c_ref: usize) -> Vec<f64> {
    let n = fs.len();
    let h = fs.grid.h;
    let lb = fs.b_ref.ln();
    let x: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 {
                f64::NEG_INFINITY
            } else {
                fs.ln_s_prime[i] - 2.0 * fs.ln_psi[i]
            }
        })
        .collect();
    let anchor = fs.ln_eta[c_ref] - fs.ln_psi[c_ref];
    let mut out = vec![f64::NAN; n];
    out[c_ref] = anchor;
    // Below the anchor the integral is added.
    let mut ln_int = f64::NEG_INFINITY;
    for i in (1..c_ref).rev() {
        let cell = (0.5 * h).ln() + log_add_exp(x[i], x[i + 1]);
        ln_int = log_add_exp(ln_int, cell);
        out[i] = log_add_exp(anchor, lb + ln_int);
    }
    // Above it the integral is subtracted.
    let a = anchor.exp();
    let mut int = 0.0;
    for i in c_ref + 1..n {
        int += 0.5 * h * ((x[i - 1] - anchor).exp() + (x[i] - anchor).exp()) * a;
        let v = a - fs.b_ref * int;
        out[i] = if v > 0.0 { v.ln() } else { f64::NAN };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::default_h;
    use crate::reference::{poly_eval, polynomial_psi_coefficients};
    use approx::assert_abs_diff_eq;

    fn model(l0: f64, mu: f64) -> ReducedModel {
        ReducedModel::simple(1.0, l0, 1.0, mu, 1.0).unwrap()
    }

    fn exact(m: &ReducedModel, z_max: f64) -> FundamentalSolutions {
        let g = GridSpec::for_model(m, z_max).unwrap();
        FundamentalSolutions::compute(g, m, Estimator::Exact).unwrap()
    }

    #[test]
    fn scale_density_examples() {
        let m = model(6.0, 1.0);
        assert_abs_diff_eq!(scale_density(1.0, &m).unwrap(), 2f64.exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            scale_density(2.0, &m).unwrap(),
            1f64.exp() * 2f64.powi(-12),
            epsilon = 1e-15
        );
        // The printed approximation 6.6367e-4 is off in the fifth digit.
        assert_abs_diff_eq!(scale_density(2.0, &m).unwrap(), 6.6367e-4, epsilon = 5e-8);
        assert!(scale_density(0.0, &m).is_err());
    }

    #[test]
    fn normalization_and_monotonicity() {
        let m = model(6.0, 1.0);
        let fs = exact(&m, 4.0);
        let n = fs.grid.n_points;
        assert_eq!(fs.ln_psi[n], 0.0);
        assert_eq!(fs.ln_eta[n], 0.0);
        assert!(fs.psi(n - 1) < 1.0);
        assert!(fs.eta(n - 1) > 1.0);
        assert!(fs.ln_psi.windows(2).all(|w| w[0] < w[1]));
        assert!(fs.ln_eta.windows(2).all(|w| w[0] > w[1]));
        assert!(fs.b_ref > 0.0);
        assert!(fs.dispersion < DISPERSION_WARN, "{}", fs.dispersion);
    }

    #[test]
    fn chain_psi_matches_terminating_series() {
        // λ + λ0 = a(n−1) + ½μ²(n−1)(n−2) holds with n = 3 for (2, 1, 2, 1).
        let m = ReducedModel::simple(2.0, 1.0, 2.0, 1.0, 1.0).unwrap();
        let coef = polynomial_psi_coefficients(&m, 6).unwrap();
        assert_eq!(coef.len(), 3);
        let fs = exact(&m, 2.0);
        let p2 = poly_eval(&coef, fs.grid.z_max);
        for i in (50..fs.len()).step_by(25) {
            let y = fs.grid.node(i);
            let rel = fs.psi(i) / (poly_eval(&coef, y) / p2) - 1.0;
            assert!(rel.abs() < 2e-3, "y = {y}: {rel}");
        }
    }

    #[test]
    fn wronskian_relation_reconstructs_eta() {
        for (l0, mu) in [(1.0, 1.0), (6.0, 1.0)] {
            let m = model(l0, mu);
            let fs = exact(&m, 8.0);
            let c = fs.grid.n_points / 2;
            let rec = eta_over_psi_from_wronskian(&fs, c);
            for i in reference_nodes(&fs) {
                let direct = fs.ln_eta[i] - fs.ln_psi[i];
                // Above the anchor the value is a difference; skip nodes
                // where it has cancelled by more than half.
                if rec[i].is_nan() || rec[i] < rec[c] - 2f64.ln() && i > c {
                    continue;
                }
                let rel = (rec[i] - direct).exp() - 1.0;
                assert!(rel.abs() < 0.05, "λ0={l0} μ={mu} node {i}: {rel}");
            }
        }
    }

    #[test]
    fn upwind_dispersion_shrinks_with_h() {
        // With a small diffusion coefficient the chain's numerical diffusion
        // tilts its Wronskian; refining the grid removes the tilt.
        let m = model(6.0, 0.5);
        let h = default_h(&m);
        let coarse = FundamentalSolutions::compute(
            GridSpec::covering(4.0 * h, 8.0).unwrap(),
            &m,
            Estimator::Exact,
        )
        .unwrap();
        let fine = FundamentalSolutions::compute(
            GridSpec::covering(h, 8.0).unwrap(),
            &m,
            Estimator::Exact,
        )
        .unwrap();
        assert!(
            fine.dispersion < 0.5 * coarse.dispersion,
            "{} {}",
            fine.dispersion,
            coarse.dispersion
        );
    }

    #[test]
    fn b_ref_scales_with_psi() {
        let m = model(1.0, 1.0);
        let fs = exact(&m, 3.0);
        let mut scaled = fs.clone();
        let k: f64 = 3.5;
        scaled.ln_psi.iter_mut().for_each(|l| *l += k.ln());
        let (b, _) = wronskian_ref(&scaled);
        assert_abs_diff_eq!(b / fs.b_ref, k, epsilon = 1e-9);
    }

    #[test]
    fn extension_keeps_old_nodes() {
        let m = model(6.0, 1.0);
        let fs = exact(&m, 2.0);
        let big = fs.extend_grid(3.0).unwrap();
        assert_eq!(&big.ln_psi[..fs.len()], &fs.ln_psi[..]);
        assert_eq!(&big.ln_eta[..fs.len()], &fs.ln_eta[..]);
        assert!(big.ln_psi.windows(2).all(|w| w[0] < w[1]));
        assert!(big.ln_eta.windows(2).all(|w| w[0] > w[1]));
        let back = big.restrict(fs.grid.n_points).unwrap();
        assert_eq!(back.ln_psi, fs.ln_psi);
        // A fresh computation on the large grid differs by a constant factor.
        let fresh = exact(&m, big.grid.z_max);
        let off = fresh.ln_psi[0] - big.ln_psi[0];
        for i in (0..big.len()).step_by(100) {
            assert_abs_diff_eq!(fresh.ln_psi[i] - big.ln_psi[i], off, epsilon = 1e-9);
        }
    }

    #[test]
    fn monte_carlo_estimator_agrees_with_exact() {
        let m = ReducedModel::simple(2.0, 1.0, 2.0, 1.0, 1.0).unwrap();
        let g = GridSpec::covering(4.0 * default_h(&m), 0.6).unwrap();
        let mc = MCConfig {
            n_paths: 4000,
            ..MCConfig::default()
        };
        // The coarse grid breaks the no-exit rule on purpose to keep this
        // test cheap, so build without validation.
        let (lp, ep) = compute_psi(&g, &m, &Estimator::MonteCarlo(mc)).unwrap();
        let (lx, _) = compute_psi(&g, &m, &Estimator::Exact).unwrap();
        for i in (0..g.len()).step_by(10) {
            assert!((lp[i] - lx[i]).abs() <= 4.0 * ep[i] + 1e-12, "node {i}");
        }
    }
}
