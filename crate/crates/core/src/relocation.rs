//! Periodic relocation of nearly transparent primitives.
//!
//! Every primitive gets a sampling score `λ_g·∇g + λ_o·σ`, where `∇g` is the
//! running screen-space gradient statistic normalized by its maximum. Each
//! primitive whose opacity fell below the dead threshold picks a live target
//! with probability proportional to the score, copies the target's parameters
//! with a small jitter in position and time, restarts at a fixed opacity and
//! loses its Adam history. The primitive count never changes.

use log::warn;
use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::AdamState;
use crate::primitives::{logit, sigmoid, GaussianSet};
use crate::rasterizer::GradientSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelocationConfig {
    pub enabled: bool,
    /// Iterations between relocations.
    pub period: u64,
    pub lambda_g: f64,
    pub lambda_o: f64,
    /// Activated opacity below which a primitive is considered dead.
    pub dead_threshold: f64,
    /// Position jitter standard deviation, as a fraction of the target scale.
    pub position_jitter: f64,
    /// Time jitter standard deviation, as a fraction of the target duration.
    pub time_jitter: f64,
    pub reset_opacity: f64,
}

impl Default for RelocationConfig {
    fn default() -> Self {
        RelocationConfig {
            enabled: true,
            period: 100,
            lambda_g: 0.5,
            lambda_o: 0.5,
            dead_threshold: 0.005,
            position_jitter: 0.1,
            time_jitter: 0.1,
            reset_opacity: 0.1,
        }
    }
}

impl RelocationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::Config("relocation.period must be positive".into()));
        }
        if !(self.lambda_g >= 0.0 && self.lambda_o >= 0.0 && self.lambda_g + self.lambda_o > 0.0) {
            return Err(Error::Config(
                "relocation weights must be non-negative with a positive sum".into(),
            ));
        }
        if !(self.dead_threshold > 0.0 && self.dead_threshold < 1.0) {
            return Err(Error::Config(
                "relocation.dead_threshold must lie in (0, 1)".into(),
            ));
        }
        if !(self.reset_opacity > 0.0 && self.reset_opacity < 1.0) {
            return Err(Error::Config(
                "relocation.reset_opacity must lie in (0, 1)".into(),
            ));
        }
        if !(self.position_jitter >= 0.0 && self.time_jitter >= 0.0) {
            return Err(Error::Config(
                "relocation jitter must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `λ_g·∇g/max(∇g) + λ_o·σ` per primitive.
pub fn sampling_score(grad_stat: &[f64], opacity: &[f64], cfg: &RelocationConfig) -> Vec<f64> {
    let max = grad_stat.iter().cloned().fold(0.0, f64::max);
    let inv = if max > 0.0 { 1.0 / max } else { 0.0 };
    grad_stat
        .iter()
        .zip(opacity)
        .map(|(g, o)| cfg.lambda_g * g * inv + cfg.lambda_o * o)
        .collect()
}

/// Draws `n` indices among `candidates`, proportionally to `scores`, or
/// uniformly when all candidate scores are zero.
pub fn sample_targets<R: Rng>(
    scores: &[f64],
    candidates: &[usize],
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let weights: Vec<f64> = candidates.iter().map(|&i| scores[i].max(0.0)).collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => (0..n).map(|_| candidates[dist.sample(rng)]).collect(),
        Err(_) => (0..n)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelocationReport {
    pub dead: usize,
    pub moved: usize,
    pub mean_target_score: f64,
    /// `(dead index, target index)` pairs.
    pub moves: Vec<(usize, usize)>,
}

pub fn relocate<R: Rng>(
    set: &mut GaussianSet,
    adam: &mut AdamState,
    grads: &mut GradientSet,
    cfg: &RelocationConfig,
    rng: &mut R,
) -> Result<RelocationReport> {
    let n = set.count();
    let opacity: Vec<f64> = set.opacity_logit.iter().map(|&l| sigmoid(l)).collect();
    let scores = sampling_score(&grads.accum_grad2d, &opacity, cfg);
    let (dead, alive): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| opacity[i] < cfg.dead_threshold);
    let mut report = RelocationReport {
        dead: dead.len(),
        ..Default::default()
    };
    if !dead.is_empty() && alive.is_empty() {
        warn!("relocation skipped: all {n} primitives are below the opacity threshold");
    } else if !dead.is_empty() {
        let targets = sample_targets(&scores, &alive, dead.len(), rng);
        let reset = logit(cfg.reset_opacity);
        for (&i, &j) in dead.iter().zip(&targets) {
            set.copy_primitive(j, i);
            let scale = set.scale(j);
            let rot = set.activate(j)?.rotation;
            let local = Vector3::from_fn(|a, _| {
                let z: f64 = rng.sample(StandardNormal);
                z * cfg.position_jitter * scale[a]
            });
            let offset = rot * local;
            for a in 0..3 {
                set.position[3 * i + a] += offset[a];
            }
            let z: f64 = rng.sample(StandardNormal);
            set.time[i] += z * cfg.time_jitter * set.duration(j);
            set.opacity_logit[i] = reset;
            adam.zero_primitive(i);
            report.mean_target_score += scores[j];
            report.moves.push((i, j));
        }
        report.moved = targets.len();
        if report.moved > 0 {
            report.mean_target_score /= report.moved as f64;
        }
    }
    grads.reset_stats();
    Ok(report)
}
