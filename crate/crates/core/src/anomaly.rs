//! Rare-motion, conflicting-activity and illegal-transition detectors.

use serde::{Deserialize, Serialize};

use crate::codebook::{ClipDocument, GridSpec, VisualWord};
use crate::error::{Error, Result};
use crate::gp::ConflictRegressors;
use crate::hdphmm::TransitionMatrix;
use crate::representation::{ActivityWordSet, ClipFeature};

pub const EVENTS_SCHEMA: &str = "events/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    RareMotion,
    ConflictingActivity,
    IllegalTransition,
}

/// One detected anomaly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyEvent {
    pub clip_id: u64,
    pub kind: AnomalyKind,
    pub score: f64,
    /// Cells `(x, y)` of the words behind the event.
    #[serde(default)]
    pub locations: Vec<(u32, u32)>,
    /// Activity ids for conflicts, `[prev, cur]` states for transitions.
    #[serde(default)]
    pub detail: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyThresholds {
    /// A clip with more unassigned tokens than this holds rare motion.
    pub th_rare: usize,
    /// Transitions less likely than this are illegal.
    pub th_trans: f64,
    /// Upper z-bound for conflicting activities.
    pub conflict_z: f64,
}

impl Default for AnomalyThresholds {
    fn default() -> Self {
        AnomalyThresholds { th_rare: 50, th_trans: 0.05, conflict_z: 1.96 }
    }
}

impl AnomalyThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.th_trans > 0.0 && self.th_trans < 1.0) {
            return Err(Error::invalid(format!("transition threshold must lie in (0, 1), got {}", self.th_trans)));
        }
        if !(self.conflict_z.is_finite() && self.conflict_z > 0.0) {
            return Err(Error::invalid(format!("conflict z must be positive, got {}", self.conflict_z)));
        }
        Ok(())
    }
}

/// Distinct cells of `words`, sorted by `(x, y)`.
pub fn localize(words: &[u32], grid: &GridSpec) -> Result<Vec<(u32, u32)>> {
    let mut cells = words
        .iter()
        .map(|&w| grid.decode(VisualWord(w)).map(|c| (c.cell_x, c.cell_y)))
        .collect::<Result<Vec<_>>>()?;
    cells.sort_unstable();
    cells.dedup();
    Ok(cells)
}

/// Rare motion: too many tokens outside every activity word set.
pub fn detect_rare_motions(
    feature: &ClipFeature,
    grid: &GridSpec,
    th: &AnomalyThresholds,
) -> Result<Option<AnomalyEvent>> {
    if feature.n_unassigned <= th.th_rare {
        return Ok(None);
    }
    Ok(Some(AnomalyEvent {
        clip_id: feature.clip_id,
        kind: AnomalyKind::RareMotion,
        score: feature.n_unassigned as f64,
        locations: localize(&feature.unassigned, grid)?,
        detail: Vec::new(),
    }))
}

/// z-score of an observed proportion when it lies above the upper bound.
pub fn conflict_score(observed: f64, mu: f64, sigma: f64, z: f64) -> Option<f64> {
    (sigma > 0.0 && observed > mu + z * sigma).then(|| (observed - mu) / sigma)
}

/// Conflicting activities: proportions far above what the other
/// proportions predict. `word_sets[i]` is the set behind `feature.c[i]`.
pub fn detect_conflicts(
    clip: &ClipDocument,
    feature: &ClipFeature,
    word_sets: &[ActivityWordSet],
    regressors: &ConflictRegressors,
    grid: &GridSpec,
    th: &AnomalyThresholds,
) -> Result<Vec<AnomalyEvent>> {
    let k = feature.c.len();
    if regressors.dim() != k || word_sets.len() != k {
        return Err(Error::invalid(format!(
            "feature has {k} entries but there are {} regressors and {} word sets",
            regressors.dim(),
            word_sets.len()
        )));
    }
    let mut events = Vec::new();
    for (i, set) in word_sets.iter().enumerate() {
        let observed = feature.c[i];
        if observed <= 0.0 {
            continue;
        }
        let (mu, sigma) = regressors.predict(&feature.c, i)?;
        if let Some(score) = conflict_score(observed, mu, sigma, th.conflict_z) {
            let words: Vec<u32> = clip.words.iter().copied().filter(|&w| set.contains(w)).collect();
            events.push(AnomalyEvent {
                clip_id: feature.clip_id,
                kind: AnomalyKind::ConflictingActivity,
                score,
                locations: localize(&words, grid)?,
                detail: vec![set.activity_id],
            });
        }
    }
    Ok(events)
}

/// Illegal transition: a change of state the transition model deems unlikely.
pub fn detect_illegal_transition(
    clip_id: u64,
    prev: usize,
    cur: usize,
    m: &TransitionMatrix,
    th: &AnomalyThresholds,
) -> Result<Option<AnomalyEvent>> {
    if prev == cur {
        return Ok(None);
    }
    let p = m.prob(prev, cur)?;
    if p >= th.th_trans {
        return Ok(None);
    }
    Ok(Some(AnomalyEvent {
        clip_id,
        kind: AnomalyKind::IllegalTransition,
        score: -p.max(f64::MIN_POSITIVE).ln(),
        locations: Vec::new(),
        detail: vec![prev, cur],
    }))
}
