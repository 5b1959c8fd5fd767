//! Greedy fusion of classifier probabilities with state transitions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdphmm::TransitionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Weight of the transition energy.
    pub beta_weight: f64,
    /// Floor applied to probabilities before taking logs.
    pub prob_floor: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { beta_weight: 0.1, prob_floor: 1e-6 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_weight.is_finite() && self.beta_weight >= 0.0) {
            return Err(Error::invalid(format!("fusion weight must be non-negative, got {}", self.beta_weight)));
        }
        if !(self.prob_floor.is_finite() && self.prob_floor > 0.0) {
            return Err(Error::invalid(format!("probability floor must be positive, got {}", self.prob_floor)));
        }
        Ok(())
    }
}

/// Energy of labelling a clip `cand` after `prev`. `p[i]` is the classifier
/// probability of `classes[i]`; states are model state ids. Improbable
/// transitions raise the energy.
pub fn state_energy(
    p: &[f64],
    classes: &[usize],
    prev: usize,
    cand: usize,
    m: &TransitionMatrix,
    cfg: &FusionConfig,
) -> Result<f64> {
    if p.len() != classes.len() {
        return Err(Error::invalid(format!("{} probabilities for {} classes", p.len(), classes.len())));
    }
    let i = classes
        .iter()
        .position(|&c| c == cand)
        .ok_or_else(|| Error::invalid(format!("state {cand} is not a class")))?;
    let unary = -p[i].max(cfg.prob_floor).ln();
    if cand == prev {
        if prev >= m.n_states() {
            return Err(Error::invalid(format!("state {prev} outside the transition matrix")));
        }
        return Ok(unary);
    }
    let t = m.prob(prev, cand)?;
    Ok(unary - cfg.beta_weight * t.max(cfg.prob_floor).ln())
}

/// Fused decision for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fused {
    pub state: usize,
    /// Energy of every class, in class order.
    pub energies: Vec<f64>,
}

/// Pick the class of least energy, first class on ties. Without a previous
/// state the classifier's most probable class wins.
pub fn fuse_classify(
    p: &[f64],
    classes: &[usize],
    prev: Option<usize>,
    m: &TransitionMatrix,
    cfg: &FusionConfig,
) -> Result<Fused> {
    if classes.is_empty() || p.len() != classes.len() {
        return Err(Error::invalid(format!("{} probabilities for {} classes", p.len(), classes.len())));
    }
    let energies: Vec<f64> = match prev {
        Some(prev) => classes.iter().map(|&c| state_energy(p, classes, prev, c, m, cfg)).collect::<Result<_>>()?,
        None => p.iter().map(|v| -v.max(cfg.prob_floor).ln()).collect(),
    };
    let best = match prev {
        Some(_) => argmin(&energies),
        None => crate::gp::GpMulticlass::argmax(p),
    };
    Ok(Fused { state: classes[best], energies })
}

fn argmin(e: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in e.iter().enumerate() {
        if v < e[best] {
            best = i;
        }
    }
    best
}
