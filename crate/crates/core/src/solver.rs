//! Successive approximations `v_{n+1} = H v_n`, `v_0 ≡ 0`.
//!
//! For a nonpositive nondecreasing `w`, `Hw` is the value of stopping the
//! diffusion `Y` optimally before the next point-process event, with running
//! cost `k = g + λ0·Kw` discounted at `β = λ + λ0`. It vanishes above the
//! threshold `φ[w]`, the unique positive root of
//! `G(r) = ∫₀^r ψ(z) k(z) / (z² S'(z)) dz`.
//!
//! Two backends evaluate `Hw` below the threshold: a Green-function
//! quadrature built from `ψ` and the scale density, and direct simulation of
//! the discounted running cost of the chain.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chain::{default_h, discounted_running_cost, GridSpec, MCConfig};
use crate::error::{invalid, Error, Result};
use crate::fundamental::{ln_s, ln_speed, Estimator, FundamentalSolutions};
use crate::marks::{apply_k, Constant, ExtendedFn, JumpFactorTable};
use crate::model::{bayes_risk_from_value, ReducedModel};
use crate::numeric::{bisect, interp_uniform, isotonic_increasing};

/// Grid function below a threshold, extended by 0 at and above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub h: f64,
    /// Values at nodes `0, h, 2h, ...`; nodes at or above the threshold are 0.
    pub values: Vec<f64>,
    pub threshold: f64,
    /// Per-node standard error (zero for deterministic backends).
    pub stderr: Vec<f64>,
}

impl ValueFunction {
    pub fn zero(h: f64) -> Self {
        Self {
            h,
            values: vec![0.0],
            threshold: 0.0,
            stderr: vec![0.0],
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    /// Value at node `i`, 0 beyond the stored range.
    pub fn get(&self, i: usize) -> f64 {
        self.values.get(i).copied().unwrap_or(0.0)
    }

    pub fn stderr_at(&self, i: usize) -> f64 {
        self.stderr.get(i).copied().unwrap_or(0.0)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_stderr(&self) -> f64 {
        self.stderr.iter().copied().fold(0.0, f64::max)
    }

    /// `‖self − other‖_∞` over the union of both node ranges.
    pub fn sup_diff(&self, other: &ValueFunction) -> f64 {
        let n = self.values.len().max(other.values.len());
        (0..n).fold(0.0, |m, i| m.max((self.get(i) - other.get(i)).abs()))
    }

    /// Largest node-wise noise level: the standard error for Monte Carlo
    /// iterates, the second difference for deterministic ones.
    pub fn node_noise(&self) -> f64 {
        let d2 = self
            .values
            .windows(3)
            .fold(0.0_f64, |m, w| m.max((w[2] - 2.0 * w[1] + w[0]).abs()));
        self.max_stderr().max(d2)
    }

    /// Backward finite-difference slope `(v(φ) − v(φ − h))/h` at the
    /// threshold.
    pub fn slope_at_threshold(&self) -> f64 {
        let t = self.threshold;
        (self.at(t) - self.at((t - self.h).max(0.0))) / self.h
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "node,phi,v,stderr")?;
        for i in 0..self.values.len() {
            writeln!(
                out,
                "{},{},{:.12e},{:.6e}",
                i,
                self.node(i),
                self.values[i],
                self.stderr_at(i)
            )?;
        }
        Ok(())
    }
}

impl ExtendedFn for ValueFunction {
    fn at(&self, x: f64) -> f64 {
        if x >= self.threshold {
            return 0.0;
        }
        let last = (self.values.len() - 1) as f64 * self.h;
        if x > last {
            return 0.0;
        }
        interp_uniform(&self.values, self.h, x)
    }
}

/// Root of `φ ↦ g(φ) + λ0·(Kw)(φ)`, which is nondecreasing for
/// nondecreasing `w`.
pub fn phi_ell<W: ExtendedFn + ?Sized>(
    w: &W,
    model: &ReducedModel,
    table: &JumpFactorTable,
    tol: f64,
) -> f64 {
    let f = |p: f64| model.running_cost(p) + model.lambda0 * apply_k(w, p, table);
    let mut hi = model.lambda / model.c + 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    let (lo, hi) = bisect(f, 0.0, hi, tol);
    0.5 * (lo + hi)
}

/// A threshold with its bracket and the bounds `φℓ[w] ≤ φ[w] ≤ φr[w]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub phi: f64,
    pub lo: f64,
    pub hi: f64,
    pub phi_ell: f64,
    pub phi_r: f64,
}

/// Node-wise running cost `k = g + λ0·Kw`.
fn running_cost_nodes<W: ExtendedFn + ?Sized>(
    w: &W,
    fs: &FundamentalSolutions,
    table: &JumpFactorTable,
) -> Vec<f64> {
    let m = &fs.model;
    (0..fs.len())
        .map(|i| {
            let y = fs.grid.node(i);
            m.running_cost(y) + m.lambda0 * apply_k(w, y, table)
        })
        .collect()
}

/// First positive root of the trapezoid `G` on the grid; the root inside
/// the crossing cell is exact for the piecewise-linear integrand.
fn threshold_root(k: &[f64], fs: &FundamentalSolutions) -> Option<f64> {
    let h = fs.grid.h;
    let ln_w: Vec<f64> = (0..fs.len())
        .map(|i| ln_speed(fs.grid.node(i), &fs.model) + fs.ln_psi[i])
        .collect();
    let shift = ln_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let f: Vec<f64> = ln_w
        .iter()
        .zip(k)
        .map(|(l, k)| (l - shift).exp() * k)
        .collect();
    let mut g = 0.0;
    for j in 1..f.len() {
        let next = g + 0.5 * h * (f[j - 1] + f[j]);
        if next > 0.0 && g <= 0.0 && f[j] > 0.0 {
            let s = cell_root(g, f[j - 1], f[j], h);
            return Some(fs.grid.node(j - 1) + s);
        }
        g = next;
    }
    None
}

/// Root in `[0, h]` of `G0 + f0·s + (f1 − f0)s²/(2h)`.
fn cell_root(g0: f64, f0: f64, f1: f64, h: f64) -> f64 {
    let a = (f1 - f0) / (2.0 * h);
    let (b, c) = (f0, g0);
    let lin = if b != 0.0 { -c / b } else { h };
    if a.abs() * h < 1e-12 * (b.abs() + f1.abs()) {
        return lin.clamp(0.0, h);
    }
    let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
    let q = -0.5 * (b + b.signum() * disc);
    let cands = [q / a, if q != 0.0 { c / q } else { f64::NAN }];
    cands
        .into_iter()
        .filter(|s| s.is_finite() && *s >= -1e-12 * h && *s <= h * (1.0 + 1e-12))
        .fold(
            f64::NAN,
            |best, s| if best.is_nan() || s < best { s } else { best },
        )
        .clamp(0.0, h)
}

const MAX_EXTENSIONS: usize = 8;

/// Threshold `φ[w]` on the grid of `fs`, extending the grid when the root
/// lies beyond it.
pub fn find_threshold<W: ExtendedFn>(
    w: &W,
    w_sup: f64,
    fs: &mut FundamentalSolutions,
) -> Result<Threshold> {
    let table = fs.model.jump_table();
    let root = |fs: &mut FundamentalSolutions, w: &dyn ExtendedFn| -> Result<f64> {
        for _ in 0..=MAX_EXTENSIONS {
            let k = running_cost_nodes(w, fs, &table);
            if let Some(r) = threshold_root(&k, fs) {
                return Ok(r);
            }
            let z = 2.0 * fs.grid.z_max;
            *fs = fs.extend_grid(z)?;
        }
        Err(Error::NoThreshold {
            z_max: fs.grid.z_max,
            last: f64::NAN,
        })
    };
    let phi = root(fs, w)?;
    let phi_r = root(fs, &Constant(-w_sup))?;
    let h = fs.grid.h;
    let tol = h / 4.0;
    Ok(Threshold {
        phi,
        lo: phi - tol,
        hi: phi + tol,
        phi_ell: phi_ell(w, &fs.model, &table, tol),
        phi_r,
    })
}

/// Per-grid weights for the Green-function form of `H`.
///
/// With `η̃(y) = ψ(y)∫_y^{z_max} S'/ψ²`, the pair `(ψ, η̃)` has Wronskian
/// exactly `S'`. `H` is unchanged when `η` gains a multiple of `ψ` (the
/// extra term is proportional to `G(φ[w]) = 0`), so `ψ` and the analytic
/// scale density are enough; `η` from the chain is only a diagnostic.
#[derive(Debug, Clone)]
pub struct QuadratureKernel {
    h: f64,
    psi: Vec<f64>,
    /// `η̃/S'` at the nodes.
    r: Vec<f64>,
    /// `e^{L_{n+1} − L_n}` with `L = ln S'`.
    growth: Vec<f64>,
    /// Cell weights of `∫ e^{L_{n+1} − L(z)} f(z) dz` for linear `f`.
    jw0: Vec<f64>,
    jw1: Vec<f64>,
    mu2: f64,
    lambda: f64,
}

/// Weights `(w0, w1)` with `∫_{z0}^{z1} e^{sign·(L(z) − lref)} f ≈ w0 f(z0) + w1 f(z1)`
/// for linear `f`, by an exponential-linear product rule on subcells.
fn cell_weights(z0: f64, z1: f64, sign: f64, lref: f64, m: &ReducedModel) -> (f64, f64) {
    let width = z1 - z0;
    let zs = z0.max(1e-6 * width);
    let mid = 0.5 * (zs + z1);
    let mu2 = m.mu * m.mu;
    let curv = 4.0 * m.lambda / (mu2 * mid.powi(3)) + 2.0 * m.a.abs() / (mu2 * mid * mid);
    // The exponent is linearized per subcell; the relative error is about
    // L''d²/8, so this count keeps it near 1e-5.
    let sub = ((width * curv.sqrt() * 100.0).ceil() as usize).clamp(1, 256);
    let d = (z1 - zs) / sub as f64;
    let (mut w0, mut w1) = (0.0, 0.0);
    for j in 0..sub {
        let a = zs + j as f64 * d;
        let b = a + d;
        let (ea, eb) = (sign * (ln_s(a, m) - lref), sign * (ln_s(b, m) - lref));
        let (ta, tb) = ((a - z0) / width, (b - z0) / width);
        let (xa, xb) = (ea.exp(), eb.exp());
        let alpha = (eb - ea) / d;
        let (i0, it) = if (alpha * d).abs() < 1e-6 {
            (0.5 * d * (xa + xb), 0.5 * d * (xa * ta + xb * tb))
        } else {
            let i0 = (xb - xa) / alpha;
            let i1 = (d * xb - i0) / alpha;
            (i0, ta * i0 + (tb - ta) / d * i1)
        };
        w1 += it;
        w0 += i0 - it;
    }
    (w0, w1)
}

impl QuadratureKernel {
    pub fn new(fs: &FundamentalSolutions) -> Self {
        let m = &fs.model;
        let n = fs.grid.n_points;
        let h = fs.grid.h;
        let psi = fs.psi_values();
        let l = &fs.ln_s_prime;
        let mut growth = vec![0.0; n];
        for i in 1..n {
            growth[i] = (l[i + 1] - l[i]).exp();
        }
        let mut q = vec![0.0; n + 1];
        for i in (1..n).rev() {
            let (a, b) = cell_weights(fs.grid.node(i), fs.grid.node(i + 1), 1.0, l[i], m);
            q[i] = growth[i] * q[i + 1] + a / (psi[i] * psi[i]) + b / (psi[i + 1] * psi[i + 1]);
        }
        let r: Vec<f64> = q.iter().zip(&psi).map(|(q, p)| q * p).collect();
        let mut jw0 = vec![0.0; n];
        let mut jw1 = vec![0.0; n];
        for i in 0..n {
            let (a, b) = cell_weights(fs.grid.node(i), fs.grid.node(i + 1), -1.0, l[i + 1], m);
            jw0[i] = a;
            jw1[i] = b;
        }
        Self {
            h,
            psi,
            r,
            growth,
            jw0,
            jw1,
            mu2: m.mu * m.mu,
            lambda: m.lambda,
        }
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }
}

/// `Hw` by the Green-function representation
/// `ψ(φ)∫_φ^{φ[w]} 2η̃k/(σ²S') + η̃(φ)∫_0^φ 2ψk/(σ²S')`.
pub fn apply_h_quadrature<W: ExtendedFn + ?Sized>(
    w: &W,
    thr: &Threshold,
    fs: &FundamentalSolutions,
    kernel: &QuadratureKernel,
) -> ValueFunction {
    let table = fs.model.jump_table();
    let h = kernel.h;
    let r = thr.phi;
    let top = ((r / h).ceil() as usize).min(kernel.len() - 1).max(1);
    let k: Vec<f64> = (0..=top)
        .map(|i| {
            let y = i as f64 * h;
            fs.model.running_cost(y) + fs.model.lambda0 * apply_k(w, y, &table)
        })
        .collect();
    // First-term integrand 2η̃k/(μ²z²S') = 2Rk/(μ²z²), with its limit at 0.
    let a: Vec<f64> = (0..=top)
        .map(|i| {
            if i == 0 {
                k[0] / (kernel.lambda * kernel.psi[0])
            } else {
                let y = i as f64 * h;
                2.0 * kernel.r[i] * k[i] / (kernel.mu2 * y * y)
            }
        })
        .collect();
    let mut cum = vec![0.0; top + 1];
    for i in 1..=top {
        cum[i] = cum[i - 1] + 0.5 * h * (a[i - 1] + a[i]);
    }
    let cum_r = interp_uniform(&cum, h, r);
    let f: Vec<f64> = (0..=top)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                let y = i as f64 * h;
                2.0 * kernel.psi[i] * k[i] / (kernel.mu2 * y * y)
            }
        })
        .collect();
    let mut values = vec![0.0; top + 1];
    let mut jt = 0.0;
    for i in 0..top {
        let y = i as f64 * h;
        if y >= r {
            break;
        }
        values[i] = kernel.psi[i] * (cum_r - cum[i]) + kernel.r[i] * jt;
        jt = kernel.growth[i] * jt + kernel.jw0[i] * f[i] + kernel.jw1[i] * f[i + 1];
    }
    ValueFunction {
        h,
        values,
        threshold: r,
        stderr: vec![0.0; top + 1],
    }
}

/// `Hw` by simulating the chain's discounted running cost from each node
/// below the threshold, absorbed at the first node at or above it. Only
/// every `stride`-th node (and the last one below the threshold) is
/// simulated; the rest are interpolated.
pub fn apply_h_mc<W: ExtendedFn + ?Sized>(
    w: &W,
    thr: &Threshold,
    model: &ReducedModel,
    h: f64,
    mc: &MCConfig,
    stride: usize,
) -> Result<ValueFunction> {
    let stride = stride.max(1);
    let table = model.jump_table();
    let r = thr.phi;
    let top = (r / h).ceil() as usize;
    let k: Vec<f64> = (0..=top)
        .map(|i| {
            let y = i as f64 * h;
            model.running_cost(y) + model.lambda0 * apply_k(w, y, &table)
        })
        .collect();
    let below: Vec<usize> = (0..top).filter(|&i| (i as f64 * h) < r).collect();
    let mut nodes: Vec<usize> = below.iter().copied().filter(|i| i % stride == 0).collect();
    if let Some(&last) = below.last() {
        if nodes.last() != Some(&last) {
            nodes.push(last);
        }
    }
    let mut values = vec![0.0; top + 1];
    let mut stderr = vec![0.0; top + 1];
    let mut known = vec![false; top + 1];
    known[top] = true;
    for &i in &nodes {
        let e = discounted_running_cost(h, i, top, &k, model.beta(), mc, model)?;
        values[i] = e.mean;
        stderr[i] = e.stderr;
        known[i] = true;
    }
    // Linear interpolation between simulated nodes.
    let mut prev = 0usize;
    for i in 1..=top {
        if known[i] {
            for j in prev + 1..i {
                let t = (j - prev) as f64 / (i - prev) as f64;
                values[j] = values[prev] + t * (values[i] - values[prev]);
                stderr[j] = stderr[prev].max(stderr[i]);
            }
            prev = i;
        }
    }
    Ok(ValueFunction {
        h,
        values,
        threshold: r,
        stderr,
    })
}

/// Backend used to evaluate `H`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HBackend {
    #[default]
    Quadrature,
    MonteCarlo {
        mc: MCConfig,
        #[serde(default = "one")]
        stride: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveOptions {
    /// Target accuracy of the value function.
    pub epsilon: f64,
    #[serde(default)]
    pub backend: HBackend,
    #[serde(default)]
    pub estimator: Estimator,
    /// Grid step; defaults to [`default_h`].
    #[serde(default)]
    pub h: Option<f64>,
    /// Grid upper end; defaults to twice the largest possible threshold.
    #[serde(default)]
    pub z_max: Option<f64>,
    /// Keep every iterate in the solution.
    #[serde(default)]
    pub keep_iterates: bool,
    /// Stop early once successive iterates are close enough.
    #[serde(default = "yes")]
    pub early_exit: bool,
}

fn yes() -> bool {
    true
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            backend: HBackend::Quadrature,
            estimator: Estimator::Exact,
            h: None,
            z_max: None,
            keep_iterates: false,
            early_exit: true,
        }
    }
}

/// One row per iterate `v_n`, `n ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: usize,
    pub phi: f64,
    pub phi_lo: f64,
    pub phi_hi: f64,
    pub phi_ell: f64,
    pub phi_r: f64,
    /// `‖v_n − v_{n−1}‖_∞`.
    pub sup_diff: f64,
    /// `(1/c)(λ0/(λ+λ0))^n`.
    pub bound: f64,
    pub max_stderr: f64,
    /// Distance moved by the Monte Carlo projection.
    pub projection: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "n,phi,phi_lo,phi_hi,sup_diff,bound")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:.10},{:.10},{:.10},{:.6e},{:.6e}",
                r.n, r.phi, r.phi_lo, r.phi_hi, r.sup_diff, r.bound
            )?;
        }
        Ok(())
    }
}

/// Error bounds on the last iterate, in value-function units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `(1/c)ρ^n` after `n` iterations.
    pub a_priori: f64,
    /// `ρ/(1 − ρ)·‖v_n − v_{n−1}‖_∞`.
    pub a_posteriori: f64,
    /// The weaker of the two.
    pub quoted: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub model: ReducedModel,
    pub value: ValueFunction,
    pub phi_inf: f64,
    pub phi_bracket: (f64, f64),
    pub n_star: usize,
    pub iterations: usize,
    pub early_exit: bool,
    pub certificate: Certificate,
    pub trace: IterationTrace,
    pub iterates: Vec<ValueFunction>,
    pub fs: FundamentalSolutions,
    pub warnings: Vec<String>,
}

/// `n* = ⌈ln(cε)/ln(λ0/(λ+λ0))⌉`, at least 1.
pub fn n_star(model: &ReducedModel, epsilon: f64) -> usize {
    let x = (model.c * epsilon).ln() / model.rho().ln();
    if x.is_finite() && x > 1.0 {
        x.ceil() as usize
    } else {
        1
    }
}

/// Fundamental solutions on a grid reaching twice the largest threshold any
/// iterate can have, `φr[−1/c]`.
pub fn build_fundamental(
    model: &ReducedModel,
    opts: &SolveOptions,
) -> Result<FundamentalSolutions> {
    let h = opts.h.unwrap_or_else(|| default_h(model));
    if let Some(z) = opts.z_max {
        return FundamentalSolutions::compute(GridSpec::covering(h, z)?, model, opts.estimator);
    }
    let z0 = 3.0 * model.beta() / model.c;
    let mut fs = FundamentalSolutions::compute(GridSpec::covering(h, z0)?, model, opts.estimator)?;
    let floor = Constant(-1.0 / model.c);
    let thr = find_threshold(&floor, 1.0 / model.c, &mut fs)?;
    let z = 2.0 * thr.phi_r.max(thr.phi);
    let n = ((z / h).ceil() as usize).max(4);
    match opts.estimator {
        Estimator::Exact => {
            FundamentalSolutions::compute(GridSpec::new(h, n)?, model, opts.estimator)
        }
        Estimator::MonteCarlo(_) if n > fs.grid.n_points => fs.extend_grid(z),
        Estimator::MonteCarlo(_) => fs.restrict(n),
    }
}

/// Runs the successive approximations to `n*` (or the early exit).
pub fn value_iterate(model: &ReducedModel, opts: &SolveOptions) -> Result<Solution> {
    if !(opts.epsilon > 0.0) {
        return Err(invalid("epsilon", "must be > 0"));
    }
    let mut fs = build_fundamental(model, opts)?;
    let mut warnings = Vec::new();
    if fs.dispersion_warning() {
        warnings.push(format!(
            "Wronskian dispersion {:.3} exceeds {}",
            fs.dispersion,
            crate::fundamental::DISPERSION_WARN
        ));
    }
    let mut kernel = QuadratureKernel::new(&fs);
    let h = fs.grid.h;
    let rho = model.rho();
    let n_star = n_star(model, opts.epsilon);
    let exit_tol = model.c * opts.epsilon * model.lambda / model.beta();

    let mut w = ValueFunction::zero(h);
    let mut trace = IterationTrace::default();
    let mut iterates = Vec::new();
    let mut early = false;
    let mut last_diff = f64::INFINITY;
    for n in 1..=n_star {
        let n_before = fs.grid.n_points;
        let thr = find_threshold(&w, w.sup_norm(), &mut fs)?;
        if fs.grid.n_points != n_before {
            kernel = QuadratureKernel::new(&fs);
        }
        let mut next = match &opts.backend {
            HBackend::Quadrature => apply_h_quadrature(&w, &thr, &fs, &kernel),
            HBackend::MonteCarlo { mc, stride } => apply_h_mc(&w, &thr, model, h, mc, *stride)?,
        };
        let projection = project(&mut next, model.c);
        if projection > 0.0 && matches!(opts.backend, HBackend::Quadrature) && projection > 1e-9 {
            warnings.push(format!("iterate {n}: clipped by {projection:.3e}"));
        }
        check_decrease(n, &w, &next, model.c)?;
        let diff = next.sup_diff(&w);
        trace.records.push(IterationRecord {
            n,
            phi: thr.phi,
            phi_lo: thr.lo,
            phi_hi: thr.hi,
            phi_ell: thr.phi_ell,
            phi_r: thr.phi_r,
            sup_diff: diff,
            bound: rho.powi(n as i32) / model.c,
            max_stderr: next.max_stderr(),
            projection,
        });
        if opts.keep_iterates {
            iterates.push(next.clone());
        }
        w = next;
        last_diff = diff;
        if opts.early_exit && n >= 2 && diff < exit_tol {
            early = n < n_star;
            break;
        }
    }
    let iterations = trace.records.len();
    let a_priori = rho.powi(iterations as i32) / model.c;
    let a_posteriori = rho / (1.0 - rho) * last_diff;
    let last = trace
        .records
        .last()
        .copied()
        .expect("at least one iteration");
    Ok(Solution {
        model: model.clone(),
        phi_inf: last.phi,
        phi_bracket: (last.phi_lo, last.phi_hi),
        value: w,
        n_star,
        iterations,
        early_exit: early,
        certificate: Certificate {
            a_priori,
            a_posteriori,
            quoted: a_priori.max(a_posteriori),
        },
        trace,
        iterates,
        fs,
        warnings,
    })
}

/// Projects onto nondecreasing functions with values in `[−1/c, 0]`;
/// returns the largest node displacement.
fn project(v: &mut ValueFunction, c: f64) -> f64 {
    let before = v.values.clone();
    let noisy = v.stderr.iter().any(|s| *s > 0.0);
    if noisy {
        let weights = vec![1.0; v.values.len()];
        v.values = isotonic_increasing(&v.values, &weights);
    }
    for x in v.values.iter_mut() {
        *x = x.clamp(-1.0 / c, 0.0);
    }
    before
        .iter()
        .zip(&v.values)
        .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// Slack for increases between deterministic iterates: moving the threshold
/// within its root tolerance shifts the quadrature near the free boundary by
/// about this much (in units of `1/c`).
pub const DECREASE_SLACK: f64 = 1e-7;

fn check_decrease(n: usize, prev: &ValueFunction, next: &ValueFunction, c: f64) -> Result<()> {
    let len = prev.values.len().max(next.values.len());
    for i in 0..len {
        let se = (prev.stderr_at(i).powi(2) + next.stderr_at(i).powi(2)).sqrt();
        let excess = next.get(i) - prev.get(i);
        if excess > 3.0 * se + DECREASE_SLACK / c {
            return Err(Error::MonotonicityViolation {
                iteration: n,
                phi: next.node(i),
                excess,
            });
        }
    }
    Ok(())
}

/// Default prior grid `{0, 0.01, ..., 0.99}`.
pub fn default_pi_grid() -> Vec<f64> {
    (0..100).map(|i| i as f64 / 100.0).collect()
}

impl Solution {
    /// `V` at any odds, 0 in the stopping region.
    pub fn value_at(&self, phi: f64) -> f64 {
        self.value.at(phi)
    }

    /// Minimum Bayes risk `U(π)`.
    pub fn risk(&self, pi: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&pi) {
            return Err(invalid("pi", "must lie in [0, 1)"));
        }
        let v = self
            .value_at(pi / (1.0 - pi))
            .clamp(-1.0 / self.model.c, 0.0);
        bayes_risk_from_value(pi, v, self.model.c)
    }

    pub fn risk_curve(&self, pis: &[f64]) -> Result<Vec<(f64, f64)>> {
        pis.iter().map(|&p| Ok((p, self.risk(p)?))).collect()
    }

    /// Threshold of iterate `n ≥ 1`.
    pub fn threshold(&self, n: usize) -> Option<f64> {
        self.trace.records.get(n.checked_sub(1)?).map(|r| r.phi)
    }
}

/// Runs the solver and maps the value function to Bayes risks on the default
/// prior grid.
pub fn solve(model: &ReducedModel, opts: &SolveOptions) -> Result<(Solution, Vec<(f64, f64)>)> {
    let sol = value_iterate(model, opts)?;
    let risk = sol.risk_curve(&default_pi_grid())?;
    Ok((sol, risk))
}
