//! Forward simulation of the observations, the odds filter and Monte Carlo
//! evaluation of threshold rules.
//!
//! Path `p` of every evaluation uses the same random stream, so risks at
//! different thresholds are computed on common scenarios.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::marks::MarkModel;
use crate::model::ReducedModel;
use crate::rng::{path_rng, task_key};

/// Warn when more than this fraction of paths is censored.
pub const CENSOR_WARN: f64 = 0.01;

const TAG_SCENARIO: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Time step of the discretized observations.
    pub dt_sim: f64,
    pub max_alarm_steps: u64,
    pub master_seed: u64,
    pub n_paths: u64,
    /// Overrides the model's prior mass; unlike the model, allows 1.
    #[serde(default)]
    pub prior_mass: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            dt_sim: 1e-3,
            max_alarm_steps: 1_000_000,
            master_seed: 0x5EED,
            n_paths: 100_000,
            prior_mass: None,
        }
    }
}

impl ScenarioConfig {
    /// Largest step allowed by the stability rule.
    pub fn max_dt(model: &ReducedModel) -> f64 {
        let rate = model
            .lambda0
            .max(model.lambda1)
            .max(model.lambda)
            .max(model.a.abs())
            .max(model.mu * model.mu);
        0.1 / rate
    }

    pub fn validate(&self, model: &ReducedModel) -> Result<()> {
        if !(self.dt_sim > 0.0) {
            return Err(invalid("dt_sim", "must be > 0"));
        }
        let max = Self::max_dt(model);
        if self.dt_sim > max {
            return Err(invalid(
                "dt_sim",
                format!("{} exceeds the stability limit {max}", self.dt_sim),
            ));
        }
        if self.n_paths < 2 {
            return Err(invalid("n_paths", "need at least 2 paths"));
        }
        if self.max_alarm_steps < 1 {
            return Err(invalid("max_alarm_steps", "must be ≥ 1"));
        }
        if let Some(p) = self.prior_mass {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid("prior_mass", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn prior(&self, model: &ReducedModel) -> f64 {
        self.prior_mass.unwrap_or(model.pi)
    }
}

/// Disorder time from the zero-modified exponential prior.
pub fn sample_theta<R: Rng + ?Sized>(pi: f64, lambda: f64, rng: &mut R) -> f64 {
    if rng.random::<f64>() < pi {
        0.0
    } else {
        let e: f64 = Exp1.sample(rng);
        e / lambda
    }
}

fn sample_mark<R: Rng + ?Sized>(marks: &MarkModel, post: bool, rng: &mut R) -> usize {
    match marks {
        MarkModel::Simple => 0,
        MarkModel::Discrete { nu0, nu1, .. } => {
            let w = if post { nu1 } else { nu0 };
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in w.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            w.iter().rposition(|p| *p > 0.0).unwrap_or(0)
        }
    }
}

/// Observations of one time step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepObservation {
    /// Increment of the scalar Wiener observation.
    pub dx: f64,
    /// Event times (absolute) and mark indices within the step.
    pub events: Vec<(f64, usize)>,
}

/// Generates observations step by step.
pub struct ScenarioStream<'a> {
    model: &'a ReducedModel,
    dt: f64,
    pub theta: f64,
    t: f64,
    next_event: f64,
    post: bool,
}

impl<'a> ScenarioStream<'a> {
    pub fn new<R: Rng + ?Sized>(model: &'a ReducedModel, dt: f64, theta: f64, rng: &mut R) -> Self {
        let post = theta <= 0.0;
        let rate = if post { model.lambda1 } else { model.lambda0 };
        let e: f64 = Exp1.sample(rng);
        Self {
            model,
            dt,
            theta,
            t: 0.0,
            next_event: e / rate,
            post,
        }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn next_step<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut StepObservation) {
        let m = self.model;
        let (t0, t1) = (self.t, self.t + self.dt);
        let overlap = (t1 - self.theta.max(t0)).clamp(0.0, self.dt);
        let z: f64 = StandardNormal.sample(rng);
        out.dx = m.mu * overlap + self.dt.sqrt() * z;
        out.events.clear();
        loop {
            // Regime switch inside the step: the exponential clock is
            // memoryless, so it restarts at θ with the post-change rate.
            if !self.post && self.theta < t1 && self.next_event >= self.theta {
                self.post = true;
                let e: f64 = Exp1.sample(rng);
                self.next_event = self.theta + e / m.lambda1;
                continue;
            }
            if self.next_event >= t1 {
                break;
            }
            let mark = sample_mark(&m.marks, self.post, rng);
            out.events.push((self.next_event, mark));
            let rate = if self.post { m.lambda1 } else { m.lambda0 };
            let e: f64 = Exp1.sample(rng);
            self.next_event += e / rate;
        }
        self.t = t1;
    }
}

/// A finite observation record.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub dt: f64,
    pub theta: f64,
    pub dx: Vec<f64>,
    pub events: Vec<(f64, usize)>,
}

/// Draws `θ` and `n_steps` steps of observations.
pub fn sample_scenario<R: Rng + ?Sized>(
    model: &ReducedModel,
    dt: f64,
    n_steps: usize,
    rng: &mut R,
) -> ObservationPath {
    let theta = sample_theta(model.pi, model.lambda, rng);
    sample_with_theta(model, dt, n_steps, theta, rng)
}

/// Observations under the reference measure (no disorder ever).
pub fn sample_reference_path<R: Rng + ?Sized>(
    model: &ReducedModel,
    dt: f64,
    n_steps: usize,
    rng: &mut R,
) -> ObservationPath {
    sample_with_theta(model, dt, n_steps, f64::INFINITY, rng)
}

fn sample_with_theta<R: Rng + ?Sized>(
    model: &ReducedModel,
    dt: f64,
    n_steps: usize,
    theta: f64,
    rng: &mut R,
) -> ObservationPath {
    let mut s = ScenarioStream::new(model, dt, theta, rng);
    let mut obs = StepObservation::default();
    let mut dx = Vec::with_capacity(n_steps);
    let mut events = Vec::new();
    for _ in 0..n_steps {
        s.next_step(rng, &mut obs);
        dx.push(obs.dx);
        events.extend_from_slice(&obs.events);
    }
    ObservationPath {
        dt,
        theta,
        dx,
        events,
    }
}

/// Odds update over one step: the exact solution of the homogeneous part
/// plus a left-endpoint `λ dt`, followed by the step's jumps.
#[derive(Debug, Clone)]
pub struct OddsFilter {
    drift: f64,
    mu: f64,
    lambda: f64,
    factors: Vec<f64>,
}

impl OddsFilter {
    pub fn new(model: &ReducedModel) -> Self {
        let factors = match &model.marks {
            MarkModel::Simple => vec![model.lambda1 / model.lambda0],
            MarkModel::Discrete { nu0, nu1, .. } => nu0
                .iter()
                .zip(nu1)
                .map(|(a, b)| {
                    if *a > 0.0 {
                        model.lambda1 / model.lambda0 * b / a
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        Self {
            drift: model.a - 0.5 * model.mu * model.mu,
            mu: model.mu,
            lambda: model.lambda,
            factors,
        }
    }

    #[inline]
    pub fn step(&self, phi: f64, dt: f64, obs: &StepObservation) -> f64 {
        let mut p = phi * (self.drift * dt + self.mu * obs.dx).exp() + self.lambda * dt;
        for &(_, m) in &obs.events {
            p *= self.factors[m];
        }
        p
    }
}

/// Result of filtering a finite record.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    /// `Φ` at times `0, dt, 2dt, ...` up to the alarm (inclusive).
    pub trajectory: Vec<f64>,
    pub alarm_time: Option<f64>,
}

/// Runs the odds filter from `Φ_0 = π/(1−π)` until `Φ ≥ φ*` or the record
/// ends (censored: `alarm_time = None`).
pub fn run_filter(
    path: &ObservationPath,
    model: &ReducedModel,
    threshold: f64,
) -> Result<FilterRun> {
    if !(threshold >= 0.0) {
        return Err(invalid("threshold", "must be ≥ 0"));
    }
    run_filter_from(path, model, model.initial_odds(), threshold)
}

pub fn run_filter_from(
    path: &ObservationPath,
    model: &ReducedModel,
    phi0: f64,
    threshold: f64,
) -> Result<FilterRun> {
    let f = OddsFilter::new(model);
    let mut phi = phi0;
    let mut traj = vec![phi];
    if phi >= threshold {
        return Ok(FilterRun {
            trajectory: traj,
            alarm_time: Some(0.0),
        });
    }
    let mut obs = StepObservation::default();
    let mut ev = path.events.iter().peekable();
    for (k, dx) in path.dx.iter().enumerate() {
        let t1 = (k + 1) as f64 * path.dt;
        obs.dx = *dx;
        obs.events.clear();
        while let Some(&&e) = ev.peek() {
            if e.0 >= t1 {
                break;
            }
            obs.events.push(e);
            ev.next();
        }
        phi = f.step(phi, path.dt, &obs);
        traj.push(phi);
        if phi >= threshold {
            return Ok(FilterRun {
                trajectory: traj,
                alarm_time: Some(t1),
            });
        }
    }
    Ok(FilterRun {
        trajectory: traj,
        alarm_time: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub theta: f64,
    pub tau: f64,
    pub false_alarm: bool,
    pub delay: f64,
    pub penalty: f64,
    pub censored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: u64,
    pub censored_count: u64,
}

impl RiskEstimate {
    pub fn censor_warning(&self) -> bool {
        self.censored_count as f64 > CENSOR_WARN * self.n_paths as f64
    }
}

/// Simulates path `index` of the evaluation stream under a threshold rule.
pub fn simulate_outcome(
    model: &ReducedModel,
    threshold: f64,
    cfg: &ScenarioConfig,
    index: u64,
) -> ScenarioOutcome {
    let key = task_key(cfg.master_seed, &[TAG_SCENARIO]);
    let mut rng = path_rng(key, index);
    outcome_with_rng(model, threshold, cfg, &mut rng)
}

fn outcome_with_rng(
    model: &ReducedModel,
    threshold: f64,
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> ScenarioOutcome {
    let pi = cfg.prior(model);
    let theta = sample_theta(pi, model.lambda, rng);
    let c = model.c;
    let finish = |tau: f64, censored: bool| {
        let false_alarm = !censored && tau < theta;
        let delay = (tau - theta).max(0.0);
        ScenarioOutcome {
            theta,
            tau,
            false_alarm,
            delay,
            penalty: if false_alarm { 1.0 } else { c * delay },
            censored,
        }
    };
    let phi0 = if pi >= 1.0 {
        f64::INFINITY
    } else {
        pi / (1.0 - pi)
    };
    if phi0 >= threshold {
        return finish(0.0, false);
    }
    let filter = OddsFilter::new(model);
    let mut stream = ScenarioStream::new(model, cfg.dt_sim, theta, rng);
    let mut obs = StepObservation::default();
    let mut phi = phi0;
    for _ in 0..cfg.max_alarm_steps {
        stream.next_step(rng, &mut obs);
        phi = filter.step(phi, cfg.dt_sim, &obs);
        if phi >= threshold {
            return finish(stream.time(), false);
        }
    }
    finish(stream.time(), true)
}

/// Monte Carlo Bayes risk `P{τ < Θ} + c E(τ − Θ)⁺` of the rule
/// "alarm when `Φ ≥ φ*`".
pub fn evaluate_policy(
    model: &ReducedModel,
    threshold: f64,
    cfg: &ScenarioConfig,
) -> Result<RiskEstimate> {
    cfg.validate(model)?;
    if !(threshold >= 0.0) {
        return Err(invalid("threshold", "must be ≥ 0"));
    }
    let key = task_key(cfg.master_seed, &[TAG_SCENARIO]);
    let out: Vec<(f64, bool)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(key, p);
            let o = outcome_with_rng(model, threshold, cfg, &mut rng);
            (o.penalty, o.censored)
        })
        .collect();
    let (mut s, mut s2, mut cens) = (0.0, 0.0, 0u64);
    for (p, c) in &out {
        s += p;
        s2 += p * p;
        cens += *c as u64;
    }
    let e = crate::chain::summarize(s, s2, cfg.n_paths, 0);
    Ok(RiskEstimate {
        mean: e.mean,
        stderr: e.stderr,
        n_paths: cfg.n_paths,
        censored_count: cens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn base_model() -> ReducedModel {
        ReducedModel::simple(1.0, 6.0, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn certain_disorder_starts_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_theta(1.0, 1.0, &mut rng), 0.0);
        }
    }

    #[test]
    fn theta_mean_is_one_over_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_theta(0.0, 1.0, &mut rng)).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((m - 1.0).abs() <= 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn pre_disorder_event_rate() {
        let m = base_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let horizon = 2000.0;
        let p = sample_reference_path(&m, 0.01, (horizon / 0.01) as usize, &mut rng);
        let n = p.events.len() as f64;
        // Poisson count: variance equals mean.
        assert!((n - 6.0 * horizon).abs() <= 3.0 * (6.0 * horizon).sqrt());
    }

    #[test]
    fn post_disorder_event_rate_and_marks() {
        let marks = MarkModel::discrete(&["a", "b"], &[0.5, 0.5], &[0.2, 0.8]).unwrap();
        let m = ReducedModel::new(1.0, 6.0, 3.0, 1.0, 1.0, 0.0, marks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = sample_with_theta(&m, 0.01, 100_000, 0.0, &mut rng);
        let n = p.events.len() as f64;
        assert!((n - 3000.0).abs() <= 3.0 * 3000f64.sqrt());
        let b = p.events.iter().filter(|e| e.1 == 1).count() as f64;
        assert!((b / n - 0.8).abs() <= 3.0 * (0.16 / n).sqrt());
    }

    #[test]
    fn deterministic_step() {
        let m = base_model();
        let f = OddsFilter::new(&m);
        let obs = StepObservation::default();
        let (phi, dt) = (0.7, 0.01);
        assert_abs_diff_eq!(
            f.step(phi, dt, &obs),
            phi * ((m.a - 0.5) * dt).exp() + m.lambda * dt,
            epsilon = 1e-15
        );
    }

    #[test]
    fn simple_jump_factor() {
        let m = base_model();
        let f = OddsFilter::new(&m);
        let obs = StepObservation {
            dx: 0.0,
            events: vec![(0.0, 0)],
        };
        // With dt = 0 only the jump acts.
        assert_abs_diff_eq!(f.step(3.0, 0.0, &obs), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn filter_stays_positive() {
        let m = base_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = sample_scenario(&m, 0.005, 4000, &mut rng);
        let run = run_filter(&p, &m, f64::INFINITY).unwrap();
        assert!(run.trajectory.iter().all(|x| *x >= 0.0));
        assert!(run.trajectory[1..].iter().all(|x| *x > 0.0));
        assert!(run.alarm_time.is_none());
    }

    #[test]
    fn reference_mean_of_odds() {
        // E0 Φ_1 = (1 + Φ_0)e^λ − 1 with Φ_0 = 0, λ = 1.
        let m = base_model();
        let dt = 1e-3;
        let n = 10_000;
        let key = task_key(9, &[77]);
        let xs: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = path_rng(key, i);
                let p = sample_reference_path(&m, dt, 1000, &mut rng);
                *run_filter_from(&p, &m, 0.0, f64::INFINITY)
                    .unwrap()
                    .trajectory
                    .last()
                    .unwrap()
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!(
            (mean - (1f64.exp() - 1.0)).abs() <= 3.0 * se,
            "{mean} ± {se}"
        );
    }

    #[test]
    fn immediate_alarm_costs_prior_complement() {
        let m = base_model().with_prior(0.3).unwrap();
        let cfg = ScenarioConfig {
            n_paths: 20_000,
            dt_sim: 0.01,
            ..ScenarioConfig::default()
        };
        let r = evaluate_policy(&m, 0.0, &cfg).unwrap();
        assert!((r.mean - 0.7).abs() <= 3.0 * r.stderr + 1e-12);
        let sure = ScenarioConfig {
            prior_mass: Some(1.0),
            ..cfg
        };
        let r = evaluate_policy(&m, 0.0, &sure).unwrap();
        assert_eq!((r.mean, r.stderr), (0.0, 0.0));
    }

    #[test]
    fn outcomes_are_reproducible() {
        let m = base_model();
        let cfg = ScenarioConfig {
            dt_sim: 0.005,
            ..ScenarioConfig::default()
        };
        for i in [0u64, 17, 12345] {
            assert_eq!(
                simulate_outcome(&m, 2.0, &cfg, i),
                simulate_outcome(&m, 2.0, &cfg, i)
            );
        }
        let o = simulate_outcome(&m, 2.0, &cfg, 3);
        assert!(o.penalty >= 0.0);
        if o.false_alarm {
            assert_eq!(o.delay, 0.0);
        }
    }

    #[test]
    fn stability_rule() {
        let m = base_model();
        let bad = ScenarioConfig {
            dt_sim: 0.02,
            ..ScenarioConfig::default()
        };
        assert!(bad.validate(&m).is_err());
        assert!(ScenarioConfig::default().validate(&m).is_ok());
    }
}
