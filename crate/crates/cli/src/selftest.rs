//! Fast oracle checks for an installed binary.

use qdetect_core::chain::{default_h, discounted_running_cost};
use qdetect_core::fundamental::{wronskian_ref, FundamentalSolutions};
use qdetect_core::marks::{apply_k, Constant, ExtendedFn, MarkModel};
use qdetect_core::reference::{
    poly_eval, polynomial_psi_coefficients, running_cost_oracles, running_cost_unit_rate,
    wiener_risk, wiener_threshold,
};
use qdetect_core::solver::value_iterate;
use qdetect_core::{Estimator, GridSpec, JumpFactorTable, MCConfig, ReducedModel, SolveOptions};

/// Corruptions used to check that the suite notices broken numerics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Adds a slow oscillation to `ln ψ`.
    Psi,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub expected: f64,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: measured {:.6e}, expected {:.6e}, tolerance {:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.expected,
            self.tol
        )
    }
}

fn check(name: &'static str, measured: f64, expected: f64, tol: f64) -> Check {
    Check {
        name,
        measured,
        expected,
        tol,
        pass: (measured - expected).abs() <= tol,
    }
}

pub fn run(seed: u64, fault: Option<Fault>) -> Vec<Check> {
    let mut out = Vec::new();
    out.extend(running_cost(seed));
    out.push(closed_forms_differ());
    out.push(terminating_series());
    out.extend(wiener());
    out.extend(jump_operator());
    out.push(wronskian(fault));
    out
}

fn running_cost(seed: u64) -> Vec<Check> {
    let m = ReducedModel::simple(2.0, 1.0, 4.0, 0.3, 1.0).expect("valid model");
    let h = 0.01;
    let absorb = 4000;
    let k: Vec<f64> = (0..=absorb).map(|i| i as f64 * h).collect();
    let mc = MCConfig {
        n_paths: 4_000,
        master_seed: seed,
        ..MCConfig::default()
    };
    let names = [
        "running cost from φ = 0.5",
        "running cost from φ = 1",
        "running cost from φ = 2",
    ];
    [0.5, 1.0, 2.0]
        .iter()
        .zip(names)
        .map(|(&phi, name)| {
            let start = (phi / h).round() as usize;
            let e = discounted_running_cost(h, start, absorb, &k, m.beta(), &mc, &m)
                .expect("valid inputs");
            check(
                name,
                e.mean,
                running_cost_oracles(&m, phi).1,
                4.0 * e.stderr,
            )
        })
        .collect()
}

fn closed_forms_differ() -> Check {
    let m = ReducedModel::simple(2.0, 1.0, 4.0, 0.3, 1.0).expect("valid model");
    let gap = (running_cost_unit_rate(&m, 1.0) - running_cost_oracles(&m, 1.0).1).abs();
    Check {
        name: "competing mean-integral formulas are distinguishable",
        measured: gap,
        expected: 0.05,
        tol: 0.0,
        pass: gap > 0.05,
    }
}

fn terminating_series() -> Check {
    let m = ReducedModel::simple(2.0, 1.0, 2.0, 1.0, 1.0).expect("valid model");
    let coef = polynomial_psi_coefficients(&m, 6).expect("series terminates");
    let grid = GridSpec::for_model(&m, 2.0).expect("valid grid");
    let fs = FundamentalSolutions::compute(grid, &m, Estimator::Exact).expect("chain solves");
    let top = poly_eval(&coef, fs.grid.z_max);
    let worst = (0..fs.len())
        .filter(|&i| fs.grid.node(i) >= 0.1)
        .map(|i| (fs.psi(i) / (poly_eval(&coef, fs.grid.node(i)) / top) - 1.0).abs())
        .fold(0.0, f64::max);
    check("chain ψ vs terminating series", worst, 0.0, 5e-3)
}

fn wiener() -> Vec<Check> {
    let m = ReducedModel::simple(1.0, 1.0, 1.0, 1.0, 1.0).expect("valid model");
    let sol = value_iterate(&m, &SolveOptions::default()).expect("solver converges");
    let r = wiener_threshold(1.0).expect("threshold exists");
    let worst = (0..10)
        .map(|i| {
            let pi = i as f64 / 10.0;
            let exact = wiener_risk(pi, 1.0).expect("closed form");
            (sol.risk(pi).expect("risk") / exact - 1.0).abs()
        })
        .fold(0.0, f64::max);
    vec![
        check("Wiener-only threshold", sol.phi_inf, r, 2.0 * sol.fs.grid.h),
        check("Wiener-only risk, sup relative error", worst, 0.0, 0.05),
    ]
}

fn jump_operator() -> Vec<Check> {
    let w = |x: f64| (x / 3.0 - 1.0).min(0.0);
    let simple = JumpFactorTable::new(&MarkModel::Simple, 0.25);
    let mut identity: f64 = 0.0;
    for i in 0..100 {
        let y = i as f64 * 0.07;
        identity = identity.max((apply_k(&w, y, &simple) - w.at(0.25 * y)).abs());
    }
    let marks = MarkModel::discrete(&["a", "b", "c"], &[0.5, 0.3, 0.2], &[0.1, 0.3, 0.6])
        .expect("valid marks");
    let table = JumpFactorTable::new(&marks, 0.5);
    let ys: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
    let kv: Vec<f64> = ys.iter().map(|&y| apply_k(&w, y, &table)).collect();
    let worst_curv = kv
        .windows(3)
        .map(|p| p[2] - 2.0 * p[1] + p[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let constant = apply_k(&Constant(-0.7), 1.3, &table);
    vec![
        check("K with one atom is a rescaling", identity, 0.0, 1e-15),
        check("K of a constant", constant, -0.7, 1e-12),
        Check {
            name: "K preserves concavity",
            measured: worst_curv,
            expected: 0.0,
            tol: 1e-12,
            pass: worst_curv <= 1e-12,
        },
    ]
}

fn wronskian(fault: Option<Fault>) -> Check {
    let m = ReducedModel::simple(1.0, 6.0, 1.0, 1.0, 1.0).expect("valid model");
    let grid = GridSpec::covering(default_h(&m), 6.0).expect("valid grid");
    let mut fs = FundamentalSolutions::compute(grid, &m, Estimator::Exact).expect("chain solves");
    if fault == Some(Fault::Psi) {
        for (i, l) in fs.ln_psi.iter_mut().enumerate() {
            *l += 0.5 * (i as f64 * 0.01).sin();
        }
    }
    let (_, dispersion) = wronskian_ref(&fs);
    Check {
        name: "Wronskian dispersion",
        measured: dispersion,
        expected: 0.0,
        tol: 0.2,
        pass: dispersion < 0.2,
    }
}
