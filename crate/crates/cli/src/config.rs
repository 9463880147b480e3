//! Experiment configuration: strict JSON with a schema version.

use std::fs;
use std::path::Path;

use contraction_core::envs::PegFactory;
use contraction_core::latent::Branch;
use contraction_core::policy::{Architecture, SignMode, WeightInit};
use contraction_core::trainer::{DetectorConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub env: EnvSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_eval_episodes() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Peg(PegFactory),
    Lti(LtiSpec),
    SecondOrder(SecondOrderSpec),
}

impl EnvSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            EnvSpec::Peg(_) => "peg",
            EnvSpec::Lti(_) => "lti",
            EnvSpec::SecondOrder(_) => "second_order",
        }
    }
}

/// Diagonal latent model `A·ẏ + B·y + u = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtiSpec {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "one")]
    pub x0_half_width: f64,
    #[serde(default = "default_verify_s2")]
    pub verify_s2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecondOrderSpec {
    pub lambda_d: Vec<f64>,
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    #[serde(default)]
    pub branch: Branch,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "one")]
    pub e0_half_width: f64,
    #[serde(default = "one")]
    pub edot0_half_width: f64,
    #[serde(default = "default_verify_s2")]
    pub verify_s2: f64,
}

fn default_dt() -> f64 {
    1e-3
}

fn default_horizon() -> f64 {
    5.0
}

fn one() -> f64 {
    1.0
}

fn default_verify_s2() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySpec {
    pub architecture: Architecture,
    pub init: WeightInit,
    pub sign_mode: SignMode,
    /// Feed the integral `∫z dt` to every net.
    pub integral: bool,
    /// Output scale factor on `|Λ_ii|/|R_ii|`.
    pub gain: f64,
    /// Set flips from the transforms so that `∂a/∂s·R < 0`.
    pub set_flips: bool,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            init: WeightInit::default(),
            sign_mode: SignMode::Positive,
            integral: true,
            gain: 1.0,
            set_flips: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    pub alpha: f64,
    /// Rate for the `λ_max` condition; contraction must show at least half of it.
    pub beta: f64,
    pub samples: usize,
    pub pairs: usize,
    /// Relative size of the second initial state's offset within each pair.
    pub pair_offset: f64,
    /// Contraction horizon; the env horizon when absent.
    pub horizon: Option<f64>,
    /// States per pair trajectory at which `F1` is sampled.
    pub theorem1_stride: usize,
    pub robustness: RobustnessSpec,
    pub checks: ChecksSpec,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            alpha: 1e-6,
            beta: 0.0,
            samples: 256,
            pairs: 4,
            pair_offset: 0.2,
            horizon: None,
            theorem1_stride: 25,
            robustness: RobustnessSpec::default(),
            checks: ChecksSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessSpec {
    /// Disturbance `d_bar·sin(ω·t)` on every latent component.
    pub d_bar: f64,
    pub omega: f64,
    pub slack: f64,
    /// Scale on `d̄/β`; metric-bound default when absent.
    pub scale: Option<f64>,
}

impl Default for RobustnessSpec {
    fn default() -> Self {
        Self {
            d_bar: 0.01,
            omega: 5.0,
            slack: 0.5,
            scale: None,
        }
    }
}

/// Which checks gate the exit code. `theorem1` defaults to off for the peg,
/// whose input coupling dominates the identity-metric bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSpec {
    pub margins: bool,
    pub char_roots: bool,
    pub theorem1: Option<bool>,
    pub contraction: bool,
    pub robustness: bool,
}

impl Default for ChecksSpec {
    fn default() -> Self {
        Self {
            margins: true,
            char_roots: true,
            theorem1: None,
            contraction: true,
            robustness: true,
        }
    }
}

/// Trainer settings; the run seed is the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub population: usize,
    pub sigma: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub episodes_per_eval: usize,
    pub constrained: bool,
    pub verify_every: usize,
    pub verify_samples: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            population: t.population,
            sigma: t.sigma,
            step_size: t.step_size,
            iterations: t.iterations,
            episodes_per_eval: t.episodes_per_eval,
            constrained: t.constrained,
            verify_every: t.verify_every,
            verify_samples: t.verify_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.train.constrained && self.policy.sign_mode == SignMode::Free {
            return bad("constrained training needs sign_mode \"positive\"".into());
        }
        if !(self.policy.gain > 0.0) {
            return bad("policy.gain must be positive".into());
        }
        let v = &self.verify;
        if v.samples == 0 || v.pairs == 0 || v.theorem1_stride == 0 {
            return bad(
                "verify.samples, verify.pairs and verify.theorem1_stride must be positive".into(),
            );
        }
        if !(v.alpha >= 0.0) || !(v.beta >= 0.0) || !(v.pair_offset > 0.0) {
            return bad(
                "verify.alpha and verify.beta must be non-negative, pair_offset positive".into(),
            );
        }
        if let Some(h) = v.horizon {
            if !(h > 0.0) {
                return bad("verify.horizon must be positive".into());
            }
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive".into());
        }
        let (dt, horizon) = match &self.env {
            EnvSpec::Peg(p) => {
                let s = &p.sampling;
                for (name, r) in [("tau_x", s.tau_x), ("tau_z", s.tau_z), ("k_sur", s.k_sur)] {
                    if !(r[0] > 0.0) || r[1] < r[0] {
                        return bad(format!("env.sampling.{name} must be a positive range"));
                    }
                }
                if s.k_sur[0] < 1.0 {
                    return bad("env.sampling.k_sur must be at least 1".into());
                }
                (p.dt, p.horizon)
            }
            EnvSpec::Lti(l) => {
                if l.a.is_empty() || l.a.len() != l.b.len() {
                    return bad("env.a and env.b must be non-empty and of equal length".into());
                }
                (l.dt, l.horizon)
            }
            EnvSpec::SecondOrder(s) => {
                if s.lambda_d.is_empty() {
                    return bad("env.lambda_d must be non-empty".into());
                }
                (s.dt, s.horizon)
            }
        };
        if !(dt > 0.0) || !(horizon > dt) {
            return bad("env.dt must be positive and below env.horizon".into());
        }
        Ok(())
    }

    /// Trainer settings with the run seed.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            population: t.population,
            sigma: t.sigma,
            step_size: t.step_size,
            iterations: t.iterations,
            episodes_per_eval: t.episodes_per_eval,
            seed: self.seed,
            constrained: t.constrained,
            verify_every: t.verify_every,
            verify_samples: t.verify_samples,
            alpha: self.verify.alpha,
        }
    }

    pub fn theorem1_enabled(&self) -> bool {
        self.verify
            .checks
            .theorem1
            .unwrap_or(!matches!(self.env, EnvSpec::Peg(_)))
    }

    /// SHA-256 of the canonical JSON of the effective config.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(&canonical))
    }
}
