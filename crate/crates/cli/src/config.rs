use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qdetect_core::model::reduce_sources;
use qdetect_core::{
    Error, Estimator, HBackend, MCConfig, PoissonSource, ReducedModel, ScenarioConfig,
    SolveOptions, SourceSpec,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub problem: SourceSpec,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub simulation: Simulation,
    #[serde(default)]
    pub output: Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    /// Grid step; chosen from the model when absent.
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub z_max: Option<f64>,
    #[serde(default)]
    pub estimator: Estimator,
    #[serde(default)]
    pub backend: HBackend,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    /// Worker threads; falls back to `QDETECT_WORKERS`, then to all cores.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            h: None,
            epsilon: default_epsilon(),
            z_max: None,
            estimator: Estimator::default(),
            backend: HBackend::default(),
            master_seed: default_seed(),
            workers: None,
        }
    }
}

fn default_epsilon() -> f64 {
    1e-3
}

fn default_seed() -> u64 {
    MCConfig::default().master_seed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Simulation {
    #[serde(default = "default_dt")]
    pub dt_sim: f64,
    #[serde(default = "default_paths")]
    pub n_paths: u64,
    #[serde(default = "default_alarm_steps")]
    pub max_alarm_steps: u64,
    #[serde(default)]
    pub thresholds: Vec<f64>,
}

impl Default for Simulation {
    fn default() -> Self {
        Self {
            dt_sim: default_dt(),
            n_paths: default_paths(),
            max_alarm_steps: default_alarm_steps(),
            thresholds: Vec::new(),
        }
    }
}

fn default_dt() -> f64 {
    ScenarioConfig::default().dt_sim
}

fn default_paths() -> u64 {
    ScenarioConfig::default().n_paths
}

fn default_alarm_steps() -> u64 {
    ScenarioConfig::default().max_alarm_steps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    #[serde(default)]
    pub directory: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    /// Also write whitespace-separated `.dat` files for gnuplot.
    #[serde(default)]
    pub gnuplot: bool,
}

impl Default for Output {
    fn default() -> Self {
        Self {
            directory: None,
            formats: default_formats(),
            gnuplot: false,
        }
    }
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

/// Problems found while loading a configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<Error> for ConfigError {
    fn from(e: Error) -> Self {
        ConfigError(e.to_string())
    }
}

/// A validated configuration with its reduced model.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub model: ReducedModel,
    /// The prior as given; the model carries 0 in its place when it is 1.
    pub prior_mass: f64,
    pub hash: String,
    pub warnings: Vec<String>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(self) -> Result<Loaded, ConfigError> {
        if self.version != SCHEMA_VERSION {
            return Err(ConfigError(format!(
                "version: unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        let mut warnings = Vec::new();
        let prior_mass = self.problem.prior_mass;
        let mut spec = self.problem.clone();
        if prior_mass == 1.0 {
            warnings.push("prior_mass = 1: the disorder has already happened; the optimal rule alarms at once".into());
            spec.prior_mass = 0.0;
        }
        let model = reduce_sources(&spec)?;
        self.options()?;
        Ok(Loaded {
            hash: self.hash(),
            config: self,
            model,
            prior_mass,
            warnings,
        })
    }

    pub fn options(&self) -> Result<SolveOptions, ConfigError> {
        let n = &self.numerics;
        if !(n.epsilon > 0.0) {
            return Err(ConfigError(format!(
                "numerics.epsilon: must be > 0, got {}",
                n.epsilon
            )));
        }
        if let Some(h) = n.h {
            if !(h > 0.0 && h.is_finite()) {
                return Err(ConfigError(format!(
                    "numerics.h: must be finite and > 0, got {h}"
                )));
            }
        }
        if let Some(z) = n.z_max {
            if !(z > 0.0 && z.is_finite()) {
                return Err(ConfigError(format!(
                    "numerics.z_max: must be finite and > 0, got {z}"
                )));
            }
        }
        if n.workers == Some(0) {
            return Err(ConfigError("numerics.workers: must be ≥ 1".into()));
        }
        let seeded = |mc: &MCConfig| MCConfig {
            master_seed: n.master_seed,
            ..*mc
        };
        let estimator = match &n.estimator {
            Estimator::MonteCarlo(mc) => {
                mc.validate()?;
                Estimator::MonteCarlo(seeded(mc))
            }
            e => e.clone(),
        };
        let backend = match &n.backend {
            HBackend::MonteCarlo { mc, stride } => {
                mc.validate()?;
                HBackend::MonteCarlo {
                    mc: seeded(mc),
                    stride: *stride,
                }
            }
            b => *b,
        };
        Ok(SolveOptions {
            epsilon: n.epsilon,
            backend,
            estimator,
            h: n.h,
            z_max: n.z_max,
            ..SolveOptions::default()
        })
    }

    pub fn scenario(&self, model: &ReducedModel) -> Result<ScenarioConfig, ConfigError> {
        let s = &self.simulation;
        let cfg = ScenarioConfig {
            dt_sim: s.dt_sim,
            max_alarm_steps: s.max_alarm_steps,
            master_seed: self.numerics.master_seed,
            n_paths: s.n_paths,
            prior_mass: Some(self.problem.prior_mass),
        };
        cfg.validate(model)
            .map_err(|e| ConfigError(format!("simulation: {e}")))?;
        if s.thresholds.iter().any(|t| !(*t >= 0.0)) {
            return Err(ConfigError(
                "simulation.thresholds: every threshold must be ≥ 0".into(),
            ));
        }
        Ok(cfg)
    }
}

/// Single Wiener and Poisson source, `λ0 = 6`, `λ1 = λ = μ = c = 1`.
pub fn example_config() -> RunConfig {
    RunConfig {
        version: SCHEMA_VERSION,
        problem: SourceSpec {
            wiener_drifts: vec![1.0],
            poisson_sources: vec![PoissonSource {
                rate_pre: 6.0,
                rate_post: 1.0,
                marks: Default::default(),
            }],
            disorder_rate: 1.0,
            prior_mass: 0.0,
            delay_cost: 1.0,
        },
        numerics: Numerics::default(),
        simulation: Simulation::default(),
        output: Output::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_are_stable() {
        let c = example_config();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(example_config()).unwrap();
        v["numerics"]["speed"] = serde_json::json!(3);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn certain_disorder_is_accepted_with_a_warning() {
        let mut c = example_config();
        c.problem.prior_mass = 1.0;
        let l = c.load().unwrap();
        assert_eq!(l.prior_mass, 1.0);
        assert_eq!(l.model.pi, 0.0);
        assert_eq!(l.warnings.len(), 1);
    }

    #[test]
    fn invalid_prior_names_the_field() {
        let mut c = example_config();
        c.problem.prior_mass = 1.2;
        let e = c.load().unwrap_err();
        assert!(e.0.contains("prior_mass"), "{e}");
    }
}
