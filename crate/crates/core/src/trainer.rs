//! Antithetic evolution strategies over policy banks, plus rollout
//! evaluation with oscillation and drift detectors.
//!
//! Constrained runs project every evaluated member and every update onto
//! the sign-constraint set and reset flips from the nominal transforms, so
//! no policy outside the constraint set is ever evaluated or returned.
//! Their updates are additionally gated by a sampled margin check.

use std::io::{self, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{fmt_f64, EnvError, EpisodeFactory, Rollout};
use crate::policy::{PolicyBank, PolicyError};
use crate::verifier::{margins, MarginReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub population: usize,
    pub sigma: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub episodes_per_eval: usize,
    pub seed: u64,
    pub constrained: bool,
    /// Margin check period in iterations.
    pub verify_every: usize,
    pub verify_samples: usize,
    pub alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            population: 16,
            sigma: 0.02,
            step_size: 0.01,
            iterations: 50,
            episodes_per_eval: 2,
            seed: 0,
            constrained: true,
            verify_every: 10,
            verify_samples: 64,
            alpha: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.population == 0 || !self.population.is_multiple_of(2) {
            return bad("population must be positive and even");
        }
        if !(self.sigma > 0.0) || !(self.step_size > 0.0) {
            return bad("sigma and step_size must be positive");
        }
        if self.episodes_per_eval == 0 || self.verify_every == 0 {
            return bad("episodes_per_eval and verify_every must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub mean_return: f64,
    pub best_return: f64,
    /// Sign-pattern violations of the kept bank, plus its failing margin
    /// samples on check iterations.
    pub violations: usize,
    /// `−max(worst_c1, worst_c2)` from the most recent margin check.
    pub min_margin: f64,
    pub verified: bool,
    /// The update failed the margin check and was rolled back.
    pub rejected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn total_violations(&self) -> usize {
        self.rows.iter().map(|r| r.violations).sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "iteration,mean_return,best_return,violations,min_margin,verified,rejected"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.iteration,
                fmt_f64(r.mean_return),
                fmt_f64(r.best_return),
                r.violations,
                fmt_f64(r.min_margin),
                r.verified,
                r.rejected
            )?;
        }
        Ok(())
    }
}

/// Deterministic seed for a tuple of indices under a base seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    let mut s = rng.next_u64();
    for &p in parts {
        let mut r = ChaCha8Rng::seed_from_u64(s ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        s = r.next_u64();
    }
    s
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// Centered ranks in `[-0.5, 0.5]`; ties broken by index.
pub fn centered_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    for (rank, &i) in idx.iter().enumerate() {
        out[i] = rank as f64 / (n - 1) as f64 - 0.5;
    }
    out
}

/// Replaces `−∞` by the worst finite score minus one standard deviation of
/// the finite scores. All-infinite input maps to zeros.
pub fn finite_scores(scores: &[f64]) -> Vec<f64> {
    let fin: Vec<f64> = scores.iter().cloned().filter(|s| s.is_finite()).collect();
    if fin.is_empty() {
        return vec![0.0; scores.len()];
    }
    let n = fin.len() as f64;
    let mean = fin.iter().sum::<f64>() / n;
    let std = (fin.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let worst = fin.iter().cloned().fold(f64::INFINITY, f64::min);
    scores
        .iter()
        .map(|s| if s.is_finite() { *s } else { worst - std })
        .collect()
}

/// Antithetic ES estimate `Σ_m w_m·ε_m / (population·σ)` for `w` already shaped.
pub fn es_direction(
    noise: &[Vec<f64>],
    shaped_plus: &[f64],
    shaped_minus: &[f64],
    sigma: f64,
) -> Vec<f64> {
    let dim = noise.first().map_or(0, Vec::len);
    let pop = 2 * noise.len();
    let mut g = vec![0.0; dim];
    for (j, eps) in noise.iter().enumerate() {
        let w = shaped_plus[j] - shaped_minus[j];
        for (gk, e) in g.iter_mut().zip(eps) {
            *gk += w * e;
        }
    }
    g.iter_mut().for_each(|v| *v /= pop as f64 * sigma);
    g
}

fn feasible_member<F: EpisodeFactory>(
    factory: &F,
    bank: PolicyBank,
    constrained: bool,
) -> Result<PolicyBank, TrainError> {
    if !constrained {
        return Ok(bank);
    }
    let tp = factory.nominal_transforms()?;
    Ok(bank.project().set_flips(&tp.r_diag(), &tp.lambda_diag())?)
}

fn run_episode<F: EpisodeFactory>(
    factory: &F,
    bank: &PolicyBank,
    seed: u64,
) -> Result<Rollout, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = factory.build(bank, &mut rng)?;
    Ok(ep.closed_loop.rollout(&ep.x0, ep.horizon)?)
}

fn mean_return<F: EpisodeFactory>(
    factory: &F,
    bank: &PolicyBank,
    seeds: &[u64],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for &s in seeds {
        total += run_episode(factory, bank, s)?.reward;
    }
    Ok(total / seeds.len() as f64)
}

fn sign_violations(bank: &PolicyBank) -> usize {
    bank.nets
        .iter()
        .flat_map(|n| n.layers.iter().map(move |l| (l, n.weight_floor)))
        .map(|(l, eps)| {
            l.weights
                .iter()
                .zip(&l.signs)
                .filter(|(w, s)| **s != 0 && (w.signum() != f64::from(**s) || w.abs() < eps))
                .count()
        })
        .sum()
}

/// Margin check of `bank` at `count` sampled states: the report and the
/// number of samples failing it.
fn margin_check<F: EpisodeFactory>(
    factory: &F,
    bank: &PolicyBank,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<(MarginReport, usize), TrainError> {
    let samples = factory.margin_samples(bank, rng, cfg.verify_samples)?;
    let rep = margins(&samples, cfg.alpha)
        .map_err(|e| TrainError::InvalidConfig(format!("margin sampling: {e}")))?;
    let failing = samples
        .iter()
        .filter(|s| s.c1().iter().chain(&s.c2()).any(|c| !(*c < -cfg.alpha)))
        .count();
    Ok((rep, failing))
}

fn report_margin(rep: &MarginReport) -> f64 {
    -rep.worst_c1.max(rep.worst_c2)
}

/// Runs ES from `bank0`. Members and episodes are evaluated in parallel and
/// reduced in index order.
///
/// Constrained runs are also gated: on check iterations a bank failing the
/// sampled margin check is rejected and training resumes from the last bank
/// that passed. The initial bank must pass.
pub fn train<F: EpisodeFactory>(
    factory: &F,
    bank0: &PolicyBank,
    cfg: &TrainConfig,
) -> Result<(PolicyBank, TrainLog), TrainError> {
    cfg.validate()?;
    let mut bank = feasible_member(factory, bank0.clone(), cfg.constrained)?;
    let mut log = TrainLog::default();
    let half = cfg.population / 2;
    let mut min_margin = f64::NAN;
    if cfg.constrained {
        let (rep, failing) = margin_check(factory, &bank, &mut rng_for(cfg.seed, &[4]), cfg)?;
        if failing > 0 {
            return Err(TrainError::InvalidConfig(format!(
                "initial bank fails the margin check at {failing} of {} samples",
                cfg.verify_samples
            )));
        }
        min_margin = report_margin(&rep);
    }
    let mut last_verified = bank.clone();
    for it in 0..cfg.iterations {
        let theta = bank.params();
        let mut noise_rng = rng_for(cfg.seed, &[0, it as u64]);
        let noise: Vec<Vec<f64>> = (0..half)
            .map(|_| {
                (0..theta.len())
                    .map(|_| StandardNormal.sample(&mut noise_rng))
                    .collect()
            })
            .collect();
        // Common episode seeds across members of one iteration.
        let seeds: Vec<u64> = (0..cfg.episodes_per_eval)
            .map(|e| derive_seed(cfg.seed, &[1, it as u64, e as u64]))
            .collect();
        let members: Vec<(usize, f64)> = (0..half).flat_map(|j| [(j, 1.0), (j, -1.0)]).collect();
        let raw: Vec<f64> = members
            .par_iter()
            .map(|&(j, sign)| {
                let p: Vec<f64> = theta
                    .iter()
                    .zip(&noise[j])
                    .map(|(t, e)| t + sign * cfg.sigma * e)
                    .collect();
                let member = feasible_member(factory, bank.with_params(&p)?, cfg.constrained)?;
                mean_return(factory, &member, &seeds)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let scores = finite_scores(&raw);
        let shaped = centered_ranks(&scores);
        let plus: Vec<f64> = (0..half).map(|j| shaped[2 * j]).collect();
        let minus: Vec<f64> = (0..half).map(|j| shaped[2 * j + 1]).collect();
        let g = es_direction(&noise, &plus, &minus, cfg.sigma);
        let next: Vec<f64> = theta
            .iter()
            .zip(&g)
            .map(|(t, d)| t + cfg.step_size * d)
            .collect();
        bank = feasible_member(factory, bank.with_params(&next)?, cfg.constrained)?;

        let mut violations = if cfg.constrained {
            sign_violations(&bank)
        } else {
            0
        };
        let verified = (it + 1) % cfg.verify_every == 0 || it + 1 == cfg.iterations;
        let mut rejected = false;
        if verified {
            let mut rng = rng_for(cfg.seed, &[2, it as u64]);
            let (mut rep, mut failing) = margin_check(factory, &bank, &mut rng.clone(), cfg)?;
            if cfg.constrained && failing > 0 {
                rejected = true;
                bank = last_verified.clone();
                // Same states, restored bank.
                (rep, failing) = margin_check(factory, &bank, &mut rng, cfg)?;
            }
            if failing == 0 {
                last_verified = bank.clone();
            }
            min_margin = report_margin(&rep);
            violations += failing;
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        log.rows.push(TrainLogRow {
            iteration: it,
            mean_return: mean,
            best_return: best,
            violations,
            min_margin,
            verified,
            rejected,
        });
    }
    Ok((bank, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Sign changes in the final half needed to call a trace oscillating.
    pub sign_changes: usize,
    /// Errors below this magnitude count as zero.
    pub amplitude_floor: f64,
    /// Relative slack when comparing quarter amplitudes.
    pub envelope_tol: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            sign_changes: 20,
            amplitude_floor: 1e-6,
            envelope_tol: 0.05,
        }
    }
}

fn mean_abs(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
    }
}

/// Many sign changes in the final half with a non-decreasing envelope.
pub fn is_oscillating(e: &[f64], cfg: &DetectorConfig) -> bool {
    let n = e.len();
    if n < 4 {
        return false;
    }
    let mut changes = 0;
    let mut last = 0.0f64;
    for &v in &e[n / 2..] {
        if v.abs() <= cfg.amplitude_floor {
            continue;
        }
        if last != 0.0 && v.signum() != last {
            changes += 1;
        }
        last = v.signum();
    }
    let q3 = mean_abs(&e[n / 2..3 * n / 4]);
    let q4 = mean_abs(&e[3 * n / 4..]);
    changes > cfg.sign_changes && q4 >= (1.0 - cfg.envelope_tol) * q3 && q4 > cfg.amplitude_floor
}

/// Final error norm above the initial one.
pub fn is_drifting(norms: &[f64], cfg: &DetectorConfig) -> bool {
    match (norms.first(), norms.last()) {
        (Some(a), Some(b)) => *b > *a && *b > cfg.amplitude_floor,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutClass {
    pub diverged: bool,
    pub oscillating: bool,
    pub drifting: bool,
}

impl RolloutClass {
    pub fn unstable(&self) -> bool {
        self.diverged || self.oscillating || self.drifting
    }
}

pub fn classify(ro: &Rollout, cfg: &DetectorConfig) -> RolloutClass {
    if ro.diverged() {
        return RolloutClass {
            diverged: true,
            oscillating: false,
            drifting: false,
        };
    }
    let dims = ro.records.first().map_or(0, |r| r.error.len());
    let oscillating = (0..dims).any(|i| {
        let e: Vec<f64> = ro.records.iter().map(|r| r.error[i]).collect();
        is_oscillating(&e, cfg)
    });
    RolloutClass {
        diverged: false,
        oscillating,
        drifting: is_drifting(&ro.error_norms(), cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_return: f64,
    pub frac_diverged: f64,
    pub frac_oscillating: f64,
    pub frac_drifting: f64,
    pub episodes: usize,
    pub classes: Vec<RolloutClass>,
}

impl EvalStats {
    pub fn unstable_count(&self) -> usize {
        self.classes.iter().filter(|c| c.unstable()).count()
    }
}

/// Rolls out `bank` on `episodes` seeded episodes.
pub fn evaluate<F: EpisodeFactory>(
    bank: &PolicyBank,
    factory: &F,
    episodes: usize,
    seed: u64,
    cfg: &DetectorConfig,
) -> Result<EvalStats, TrainError> {
    let results: Vec<(f64, RolloutClass)> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let ro = run_episode(factory, bank, derive_seed(seed, &[3, e as u64]))?;
            Ok((ro.reward, classify(&ro, cfg)))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let n = episodes.max(1) as f64;
    let frac = |f: fn(&RolloutClass) -> bool| results.iter().filter(|r| f(&r.1)).count() as f64 / n;
    Ok(EvalStats {
        mean_return: results.iter().map(|r| r.0).sum::<f64>() / n,
        frac_diverged: frac(|c| c.diverged),
        frac_oscillating: frac(|c| c.oscillating),
        frac_drifting: frac(|c| c.drifting),
        episodes,
        classes: results.into_iter().map(|r| r.1).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(n: usize, t1: f64) -> Vec<f64> {
        (0..=n).map(|k| t1 * k as f64 / n as f64).collect()
    }

    #[test]
    fn decaying_error_is_stable() {
        let cfg = DetectorConfig::default();
        let e: Vec<f64> = grid(1000, 5.0).iter().map(|t| (-t).exp()).collect();
        assert!(!is_oscillating(&e, &cfg));
        assert!(!is_drifting(&e, &cfg));
    }

    #[test]
    fn constant_amplitude_sine_oscillates() {
        let cfg = DetectorConfig::default();
        // 50 Hz over 1 s: 50 sign changes in the final half.
        let e: Vec<f64> = grid(10_000, 1.0)
            .iter()
            .map(|t| (2.0 * PI * 50.0 * t + 0.3).sin())
            .collect();
        assert!(is_oscillating(&e, &cfg));
        // 50 rad/s gives only about 8 changes in the final half.
        let slow: Vec<f64> = grid(10_000, 1.0).iter().map(|t| (50.0 * t).sin()).collect();
        assert!(!is_oscillating(&slow, &cfg));
    }

    #[test]
    fn decaying_sine_is_not_oscillating() {
        let cfg = DetectorConfig::default();
        let e: Vec<f64> = grid(10_000, 1.0)
            .iter()
            .map(|t| (-5.0 * t).exp() * (2.0 * PI * 50.0 * t).sin())
            .collect();
        assert!(!is_oscillating(&e, &cfg));
    }

    #[test]
    fn ramp_drifts() {
        let cfg = DetectorConfig::default();
        let e: Vec<f64> = grid(100, 1.0).iter().map(|t| 0.1 * t).collect();
        assert!(is_drifting(&e, &cfg));
    }

    #[test]
    fn ranks_and_sentinels() {
        assert_eq!(centered_ranks(&[3.0, 1.0, 2.0]), vec![0.5, -0.5, 0.0]);
        let s = finite_scores(&[-1.0, f64::NEG_INFINITY, -3.0]);
        assert_eq!(s[0], -1.0);
        assert!((s[1] - (-3.0 - 1.0)).abs() < 1e-15);
        assert_eq!(finite_scores(&[f64::NEG_INFINITY]), vec![0.0]);
    }

    #[test]
    fn es_direction_tracks_gradient() {
        // Score −|θ − c|² near θ = 0 with small σ.
        let c = [0.7, -0.3];
        let score = |p: &[f64]| -((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2));
        let sigma = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let plus: Vec<f64> = noise
            .iter()
            .map(|e| score(&[sigma * e[0], sigma * e[1]]))
            .collect();
        let minus: Vec<f64> = noise
            .iter()
            .map(|e| score(&[-sigma * e[0], -sigma * e[1]]))
            .collect();
        let g = es_direction(&noise, &plus, &minus, sigma);
        let truth = [2.0 * c[0], 2.0 * c[1]];
        let cos = (g[0] * truth[0] + g[1] * truth[1])
            / ((g[0] * g[0] + g[1] * g[1]).sqrt()
                * (truth[0] * truth[0] + truth[1] * truth[1]).sqrt());
        assert!(cos > 0.9, "cosine {cos}");
    }

    #[test]
    fn config_checks() {
        let odd = TrainConfig {
            population: 7,
            ..TrainConfig::default()
        };
        assert!(odd.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
    }
}
