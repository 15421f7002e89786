//! Numerical solver and simulator for the Bayesian quickest detection of a
//! simultaneous change in the drift of Wiener observations and the local
//! characteristics of compound Poisson observations.
//!
//! The optimal rule raises an alarm when the posterior odds process `Φ`
//! first reaches a threshold `φ_∞`. The solver computes `φ_∞` and the value
//! function `V` by successive approximations `v_{n+1} = H v_n`, where each
//! application of `H` solves a single-jump optimal stopping problem for the
//! diffusion that drives `Φ` between events. The simulator evaluates any
//! threshold rule by forward Monte Carlo.
//!
//! Module map:
//!
//! * [`model`]: problem specification, multi-source reduction, risk bridge.
//! * [`marks`]: finite mark distributions and the jump operator `K`.
//! * [`chain`]: Markov chain approximation of the diffusion and its Monte
//!   Carlo estimators.
//! * [`fundamental`]: increasing/decreasing fundamental solutions `ψ`, `η`.
//! * [`solver`]: threshold equation, the operator `H`, value iteration.
//! * [`simulate`]: observation paths, the odds filter, policy evaluation.
//! * [`reference`]: closed-form oracles and asymptotic expansions.

pub mod chain;
mod error;
pub mod fundamental;
pub mod marks;
pub mod model;
pub mod numeric;
pub mod reference;
mod rng;
pub mod simulate;
pub mod solver;

pub use chain::{GridSpec, MCConfig, MCEstimate, StepParams};
pub use error::{Error, Result};
pub use fundamental::{Estimator, FundamentalSolutions};
pub use marks::{JumpFactorTable, MarkModel};
pub use model::{PoissonSource, ReducedModel, SourceSpec};
pub use simulate::{RiskEstimate, ScenarioConfig, ScenarioOutcome};
pub use solver::{HBackend, IterationTrace, Solution, SolveOptions, ValueFunction};
