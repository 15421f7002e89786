//! Birth–death Markov chain on the grid `{n·h}` that is locally consistent
//! with the diffusion `dY = (λ + aY) dt + μY dX`, and Monte Carlo estimators
//! built on it.
//!
//! Besides simulation, the chain's hitting-time transforms are available in
//! closed form through first-step analysis ([`exact_up_factors`],
//! [`exact_down_factors`]). Both routes estimate the same quantities.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::ReducedModel;
use crate::rng::{path_rng, task_key};

/// Largest admissible ratio `p_down / p_up` at the first grid node.
pub const NO_EXIT_RATIO: f64 = 1e-3;

/// Paths stop once their discount factor falls below this; the rest of the
/// path cannot change the estimate at double precision.
pub const DISCOUNT_FLOOR: f64 = 1e-14;

/// Warn when more than this fraction of paths hit the step budget.
pub const TRUNCATION_WARN: f64 = 1e-3;

const MAX_BATCHES: u64 = 64;

/// Uniform odds grid `{0, h, ..., n_points·h}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: f64,
    pub n_points: usize,
    pub z_max: f64,
}

impl GridSpec {
    pub fn new(h: f64, n_points: usize) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(invalid("h", format!("must be > 0, got {h}")));
        }
        if n_points < 4 {
            return Err(invalid("n_points", "grid needs at least 4 intervals"));
        }
        Ok(Self {
            h,
            n_points,
            z_max: n_points as f64 * h,
        })
    }

    /// Smallest grid with step `h` covering `[0, z_max]`.
    pub fn covering(h: f64, z_max: f64) -> Result<Self> {
        Self::new(h, ((z_max / h).ceil() as usize).max(4))
    }

    /// Grid with the default step for `model`, covering `[0, z_max]`.
    pub fn for_model(model: &ReducedModel, z_max: f64) -> Result<Self> {
        Self::covering(default_h(model), z_max)
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    /// Number of nodes, `n_points + 1`.
    pub fn len(&self) -> usize {
        self.n_points + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Checks the near-zero no-exit rule.
    pub fn validate_for(&self, model: &ReducedModel) -> Result<()> {
        let r = no_exit_ratio(self.h, model);
        if r > NO_EXIT_RATIO {
            return Err(invalid(
                "h",
                format!(
                    "p_down/p_up at the first node is {r:.3e} > {NO_EXIT_RATIO:e}; use h ≤ {:.3e}",
                    default_h(model)
                ),
            ));
        }
        Ok(())
    }
}

/// `p_down / p_up` at `y = h`.
pub fn no_exit_ratio(h: f64, model: &ReducedModel) -> f64 {
    let s = step_core(h, h, model);
    (1.0 - s.0) / s.0
}

/// Default grid step, rounded down to two significant digits.
///
/// Two constraints apply. The no-exit rule keeps the chain from reaching 0
/// from inside. The accuracy rule bounds the upwind scheme's numerical
/// diffusion `h|λ + ay|`, whose integrated effect on the scale density is
/// about `2a²h/(μ⁴y)`; without it, small `μ` with large `a` distorts `ψ` by
/// percents.
pub fn default_h(model: &ReducedModel) -> f64 {
    let eps = NO_EXIT_RATIO;
    let den = 0.5 * model.mu * model.mu * (1.0 - eps) - eps * model.a;
    let no_exit = if den > 0.0 {
        eps * model.lambda / den
    } else {
        f64::INFINITY
    };
    let mu4 = model.mu.powi(4);
    let accuracy = 0.25 * mu4 / (model.lambda.powi(2) + model.a.powi(2));
    let raw = no_exit.min(accuracy).min(0.1);
    let inv = 10f64.powi(1 - raw.log10().floor() as i32);
    let mut h = (raw * inv).floor() / inv;
    while no_exit_ratio(h, model) > eps {
        h *= 0.99;
    }
    h
}

/// One-step law of the chain at a grid state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub p_up: f64,
    pub p_down: f64,
    /// Interpolation interval.
    pub dt: f64,
}

/// Returns `(p_up, dt)` at `y ≥ 0`. The state 0 is an entrance point: the
/// chain leaves it upward after `h/λ`.
#[inline]
fn step_core(y: f64, h: f64, m: &ReducedModel) -> (f64, f64) {
    let drift = m.lambda + m.a * y;
    let s2 = m.mu * m.mu * y * y;
    let den = s2 + h * drift.abs();
    ((0.5 * s2 + h * drift.max(0.0)) / den, h * h / den)
}

/// Transition probabilities and interpolation interval at `y > 0`.
pub fn step_params(y: f64, h: f64, model: &ReducedModel) -> Result<StepParams> {
    if !(y > 0.0) {
        return Err(invalid(
            "y",
            "the chain never occupies y ≤ 0 (0 is an entrance boundary)",
        ));
    }
    if !(h > 0.0) {
        return Err(invalid("h", "must be > 0"));
    }
    let drift = model.lambda + model.a * y;
    let s2 = model.mu * model.mu * y * y;
    let den = s2 + h * drift.abs();
    let p_up = (0.5 * s2 + h * drift.max(0.0)) / den;
    let p_down = (0.5 * s2 + h * (-drift).max(0.0)) / den;
    Ok(StepParams {
        p_up,
        p_down,
        dt: h * h / den,
    })
}

/// Both sides of the local consistency relations at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyReport {
    /// `(p_up − p_down)·h − (λ + ay)·dt`; zero up to rounding.
    pub mean_defect: f64,
    /// `h²`, the one-step second moment.
    pub second_moment: f64,
    /// `σ²(y)·dt`.
    pub diffusion_dt: f64,
    /// `h² − σ²(y)·dt`, which equals `h·|λ + ay|·dt`.
    pub second_moment_defect: f64,
    pub dt: f64,
}

pub fn local_consistency_check(y: f64, h: f64, model: &ReducedModel) -> Result<ConsistencyReport> {
    let s = step_params(y, h, model)?;
    let drift = model.lambda + model.a * y;
    let sig2 = model.mu * model.mu * y * y;
    Ok(ConsistencyReport {
        mean_defect: (s.p_up - s.p_down) * h - drift * s.dt,
        second_moment: h * h,
        diffusion_dt: sig2 * s.dt,
        second_moment_defect: h * h - sig2 * s.dt,
        dt: s.dt,
    })
}

/// Monte Carlo budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MCConfig {
    pub n_paths: u64,
    pub master_seed: u64,
    pub max_steps_per_path: u64,
    /// When set, batches of `n_paths` are added until the relative standard
    /// error drops below this value (at most 64 batches).
    #[serde(default)]
    pub target_rel_stderr: Option<f64>,
}

impl Default for MCConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            master_seed: 0x5EED,
            max_steps_per_path: 10_000_000,
            target_rel_stderr: None,
        }
    }
}

impl MCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(invalid("mc.n_paths", "need at least 2 paths"));
        }
        if self.max_steps_per_path < 1 {
            return Err(invalid("mc.max_steps_per_path", "must be ≥ 1"));
        }
        if let Some(t) = self.target_rel_stderr {
            if !(t > 0.0) {
                return Err(invalid("mc.target_rel_stderr", "must be > 0"));
            }
        }
        Ok(())
    }

    /// Step budget of ten times the squared number of grid intervals.
    pub fn default_max_steps(grid: &GridSpec) -> u64 {
        10 * (grid.n_points as u64).pow(2)
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: u64,
    /// Paths stopped by the step budget.
    pub truncated: u64,
}

impl MCEstimate {
    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            stderr: 0.0,
            n_paths: 0,
            truncated: 0,
        }
    }

    pub fn truncation_warning(&self) -> bool {
        self.n_paths > 0 && self.truncated as f64 > TRUNCATION_WARN * self.n_paths as f64
    }

    pub fn rel_stderr(&self) -> f64 {
        if self.mean == 0.0 {
            f64::INFINITY
        } else {
            self.stderr / self.mean.abs()
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) struct PathResult {
    pub value: f64,
    pub truncated: bool,
}

/// Runs independent paths in parallel and combines them in path order, so
/// the estimate is bitwise independent of the thread count.
pub(crate) fn run_paths<F>(key: u64, mc: &MCConfig, f: F) -> MCEstimate
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> PathResult + Sync,
{
    let (mut sum, mut sum2, mut n, mut trunc) = (0.0f64, 0.0f64, 0u64, 0u64);
    let mut batch = 0u64;
    loop {
        let start = batch * mc.n_paths;
        let results: Vec<PathResult> = (start..start + mc.n_paths)
            .into_par_iter()
            .map(|p| f(&mut path_rng(key, p)))
            .collect();
        for r in &results {
            sum += r.value;
            sum2 += r.value * r.value;
            trunc += r.truncated as u64;
        }
        n += mc.n_paths;
        batch += 1;
        let est = summarize(sum, sum2, n, trunc);
        match mc.target_rel_stderr {
            Some(t) if batch < MAX_BATCHES && est.rel_stderr() > t => continue,
            _ => return est,
        }
    }
}

pub(crate) fn summarize(sum: f64, sum2: f64, n: u64, truncated: u64) -> MCEstimate {
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
    MCEstimate {
        mean,
        stderr: (var / nf).sqrt(),
        n_paths: n,
        truncated,
    }
}

const TAG_LAPLACE: u64 = 1;
const TAG_COST: u64 = 2;

/// Estimates `E[exp(−β·t)]` where `t` is the chain's interpolated time to
/// move from node `start` to node `target`.
pub fn hitting_laplace(
    h: f64,
    start: usize,
    target: usize,
    beta: f64,
    mc: &MCConfig,
    model: &ReducedModel,
) -> Result<MCEstimate> {
    mc.validate()?;
    if !(beta >= 0.0) {
        return Err(invalid("beta", "must be ≥ 0"));
    }
    if start == target {
        return Ok(MCEstimate::exact(1.0));
    }
    let log_floor = -DISCOUNT_FLOOR.ln();
    let escape = if target < start {
        escape_node(target as f64 * h, h, model)
    } else {
        usize::MAX
    };
    let key = task_key(
        mc.master_seed,
        &[
            TAG_LAPLACE,
            start as u64,
            target as u64,
            beta.to_bits(),
            h.to_bits(),
        ],
    );
    Ok(run_paths(key, mc, |rng| {
        let mut i = start;
        let mut bt = 0.0;
        for _ in 0..mc.max_steps_per_path {
            let (pu, dt) = step_core(i as f64 * h, h, model);
            bt += beta * dt;
            i = if rng.random::<f64>() < pu {
                i + 1
            } else {
                i - 1
            };
            if i == target {
                return PathResult {
                    value: (-bt).exp(),
                    truncated: false,
                };
            }
            if bt > log_floor || i >= escape {
                return PathResult {
                    value: 0.0,
                    truncated: false,
                };
            }
        }
        PathResult {
            value: 0.0,
            truncated: true,
        }
    }))
}

/// First node from which the chain returns to level `x` with probability
/// below the discount floor, or `usize::MAX` when paths always come back.
///
/// For `u ≥ y` the scale density is at most `S'(y)(u/y)^(−p)`, `p = 2a/μ²`,
/// and at least `u^(−p)`, which bounds the return probability by
/// `e^(2λ/(μ²y)) (y/x)^(1−p)`.
fn escape_node(x: f64, h: f64, m: &ReducedModel) -> usize {
    let mu2 = m.mu * m.mu;
    let p = 2.0 * m.a / mu2;
    if p <= 1.0 {
        return usize::MAX;
    }
    let x = x.max(h);
    let bound = |y: f64| 2.0 * m.lambda / (mu2 * y) + (1.0 - p) * (y / x).ln();
    let mut y = 2.0 * x;
    while bound(y) > DISCOUNT_FLOOR.ln() {
        y *= 2.0;
        if y / h > 1e15 {
            return usize::MAX;
        }
    }
    (y / h).ceil() as usize
}

/// Estimates `E[Σ_{n<N} k(ξ_n) e^{−β t_n} (1 − e^{−β Δt_n})/β]` for the chain
/// started at node `start` and absorbed at node `absorb`. `k` is indexed by
/// node and must cover every node the paths visit below `absorb`.
pub fn discounted_running_cost(
    h: f64,
    start: usize,
    absorb: usize,
    k: &[f64],
    beta: f64,
    mc: &MCConfig,
    model: &ReducedModel,
) -> Result<MCEstimate> {
    mc.validate()?;
    if !(beta > 0.0) {
        return Err(invalid("beta", "must be > 0"));
    }
    if start > absorb {
        return Err(invalid("start", "must not exceed the absorbing node"));
    }
    if k.len() < absorb {
        return Err(invalid(
            "k",
            "cost must be defined below the absorbing node",
        ));
    }
    if start == absorb {
        return Ok(MCEstimate::exact(0.0));
    }
    let key = task_key(
        mc.master_seed,
        &[
            TAG_COST,
            start as u64,
            absorb as u64,
            beta.to_bits(),
            h.to_bits(),
        ],
    );
    Ok(run_paths(key, mc, |rng| {
        let mut i = start;
        let mut disc = 1.0;
        let mut acc = 0.0;
        for _ in 0..mc.max_steps_per_path {
            let (pu, dt) = step_core(i as f64 * h, h, model);
            let x = beta * dt;
            acc += k[i] * disc * (-(-x).exp_m1()) / beta;
            disc *= (-x).exp();
            i = if rng.random::<f64>() < pu {
                i + 1
            } else {
                i - 1
            };
            if i == absorb || disc < DISCOUNT_FLOOR {
                return PathResult {
                    value: acc,
                    truncated: false,
                };
            }
        }
        PathResult {
            value: acc,
            truncated: true,
        }
    }))
}

/// `ln E^{z_i}[e^{−β τ_{z_{i+1}}}]` for `i = 0..n`, by first-step analysis.
pub fn exact_up_factors(h: f64, n: usize, beta: f64, model: &ReducedModel) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    exact_up_continue(h, 0, n, beta, model, &mut out);
    out
}

/// Appends up factors for edges `from..to`, continuing the recursion from
/// the last entry of `out` (which must hold edges `0..from`).
pub(crate) fn exact_up_continue(
    h: f64,
    from: usize,
    to: usize,
    beta: f64,
    model: &ReducedModel,
    out: &mut Vec<f64>,
) {
    debug_assert_eq!(out.len(), from);
    let mut prev = out.last().map(|l| l.exp());
    for i in from..to {
        let (pu, dt) = step_core(i as f64 * h, h, model);
        let q = (-beta * dt).exp();
        let u = match prev {
            None => q,
            Some(p) => q * pu / (1.0 - q * (1.0 - pu) * p),
        };
        out.push(u.ln());
        prev = Some(u);
    }
}

/// `ln E^{z_{i+1}}[e^{−β τ_{z_i}}]` for `i = 0..n`, by first-step analysis
/// run downward from a node far above the grid.
pub fn exact_down_factors(h: f64, n: usize, beta: f64, model: &ReducedModel) -> Vec<f64> {
    let cap = 2 * n + 1000;
    let (pu, dt) = step_core(cap as f64 * h, h, model);
    let q = (-beta * dt).exp();
    let pd = 1.0 - pu;
    // Local fixed point of the recursion at the cap.
    let disc = (1.0 - 4.0 * q * q * pu * pd).max(0.0);
    let mut d = (1.0 - disc.sqrt()) / (2.0 * q * pu);
    let mut out = vec![0.0; n];
    for j in (1..cap).rev() {
        // d currently holds the factor for edge j -> j-1 once updated.
        let (pu, dt) = step_core(j as f64 * h, h, model);
        let q = (-beta * dt).exp();
        d = q * (1.0 - pu) / (1.0 - q * pu * d);
        if j - 1 < n {
            out[j - 1] = d.ln();
        }
    }
    out
}

/// Consistency checks on a Laplace estimate of a positive hitting time.
pub(crate) fn check_factor(node: usize, e: &MCEstimate) -> Result<()> {
    if e.mean >= 1.0 + 3.0 * e.stderr && e.n_paths > 0 {
        return Err(Error::LaplaceInconsistent {
            node,
            mean: e.mean,
            stderr: e.stderr,
        });
    }
    Ok(())
}
