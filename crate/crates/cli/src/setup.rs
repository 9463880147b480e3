//! Factories and initial banks from a config.

use std::fs;
use std::path::Path;

use contraction_core::envs::{EpisodeFactory, LtiFactory, PegFactory, SecondOrderFactory};
use contraction_core::latent::{lti_model, GainSet, LatentLti};
use contraction_core::policy::{PolicyBank, SignMode};
use contraction_core::trainer::rng_for;
use contraction_core::transform::TransformPair;

use crate::config::{EnvSpec, ExperimentConfig};
use crate::CliError;

/// Stream tags under the run seed, one per consumer of randomness.
pub mod stream {
    pub const BANK: u64 = 10;
    pub const MARGINS: u64 = 11;
    pub const PAIRS: u64 = 12;
    pub const ROLLOUT: u64 = 13;
    pub const SWEEP: u64 = 14;
}

pub enum Factory {
    Peg(PegFactory),
    Lti(LtiFactory),
    SecondOrder(SecondOrderFactory),
}

/// Runs `$body` with `$f` bound to the concrete factory.
#[macro_export]
macro_rules! with_factory {
    ($factory:expr, $f:ident => $body:expr) => {
        match $factory {
            $crate::setup::Factory::Peg($f) => $body,
            $crate::setup::Factory::Lti($f) => $body,
            $crate::setup::Factory::SecondOrder($f) => $body,
        }
    };
}

/// Flips follow the transforms only for sign-constrained banks.
pub fn flips_enabled(cfg: &ExperimentConfig) -> bool {
    cfg.policy.set_flips && cfg.policy.sign_mode == SignMode::Positive
}

pub fn build_factory(cfg: &ExperimentConfig) -> Result<Factory, CliError> {
    let flips = flips_enabled(cfg);
    let latent = |e: contraction_core::latent::LatentError| CliError::Config(e.to_string());
    Ok(match &cfg.env {
        EnvSpec::Peg(p) => Factory::Peg(PegFactory {
            refresh_flips: flips,
            ..p.clone()
        }),
        EnvSpec::Lti(l) => {
            let model = lti_model(&LatentLti::new(l.a.clone(), l.b.clone()).map_err(latent)?);
            let mut f = LtiFactory::new(model, l.dt, l.horizon);
            f.x0_half_width = l.x0_half_width;
            f.verify_s2 = l.verify_s2;
            f.set_flips = flips;
            Factory::Lti(f)
        }
        EnvSpec::SecondOrder(s) => {
            let g = GainSet::new(s.lambda_d.clone(), s.kp.clone(), s.kd.clone()).map_err(latent)?;
            let mut f = SecondOrderFactory::new(&g, s.branch, s.dt, s.horizon)
                .map_err(|e| CliError::Config(e.to_string()))?;
            f.e0_half_width = s.e0_half_width;
            f.edot0_half_width = s.edot0_half_width;
            f.verify_s2 = s.verify_s2;
            f.set_flips = flips;
            Factory::SecondOrder(f)
        }
    })
}

pub fn nominal_transforms(factory: &Factory) -> Result<TransformPair, CliError> {
    Ok(with_factory!(factory, f => f.nominal_transforms())?)
}

/// Per-dimension output scales `gain·|Λ_ii|/|R_ii|`; the peg uses its
/// stiffest surface.
pub fn policy_scale(cfg: &ExperimentConfig, factory: &Factory) -> Result<Vec<f64>, CliError> {
    if let Factory::Peg(p) = factory {
        return Ok(p.policy_scale(cfg.policy.gain)?);
    }
    let tp = nominal_transforms(factory)?;
    Ok(tp
        .lambda_diag()
        .iter()
        .zip(tp.r_diag())
        .map(|(l, r)| cfg.policy.gain * l.abs() / r.abs())
        .collect())
}

/// Bank drawn from the config seed, projected and flipped when constrained.
pub fn initial_bank(cfg: &ExperimentConfig, factory: &Factory) -> Result<PolicyBank, CliError> {
    let n = with_factory!(factory, f => f.latent_dim());
    let scale = policy_scale(cfg, factory)?;
    let mut rng = rng_for(cfg.seed, &[stream::BANK]);
    let p = &cfg.policy;
    let bank = PolicyBank::random(
        &vec![p.integral; n],
        &scale,
        &p.architecture,
        &p.init,
        p.sign_mode,
        &mut rng,
    )?;
    if flips_enabled(cfg) {
        let tp = nominal_transforms(factory)?;
        return Ok(bank.project().set_flips(&tp.r_diag(), &tp.lambda_diag())?);
    }
    Ok(bank)
}

/// Bank from a file when given, else the config's initial bank.
pub fn load_bank(
    cfg: &ExperimentConfig,
    factory: &Factory,
    path: Option<&Path>,
) -> Result<PolicyBank, CliError> {
    let Some(path) = path else {
        return initial_bank(cfg, factory);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("policy file {}: {e}", path.display())))?;
    let bank = PolicyBank::from_json(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    let n = with_factory!(factory, f => f.latent_dim());
    if bank.dim() != n {
        return Err(CliError::Usage(format!(
            "policy has {} dimensions, env has {n}",
            bank.dim()
        )));
    }
    Ok(bank)
}
