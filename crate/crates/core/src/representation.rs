//! Activity word sets and fixed-length clip features.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codebook::{ClipDocument, Corpus};
use crate::error::{Error, Result};
use crate::hdp::ActivityModel;
use crate::hdphmm::StateModel;
use crate::io::{load_records, read_records, save_records, RecordHeader};

pub const FEATURES_SCHEMA: &str = "features/1";

/// Default accumulated-mass cutoff for activity word sets.
pub const DEFAULT_WORD_CUTOFF: f64 = 0.9;

/// The most probable words of one activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityWordSet {
    pub activity_id: usize,
    /// Word indices in ascending order.
    pub words: Vec<u32>,
    pub covered_mass: f64,
}

impl ActivityWordSet {
    pub fn contains(&self, word: u32) -> bool {
        self.words.binary_search(&word).is_ok()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Words of `phi` taken in descending probability (ties by ascending index)
/// while their accumulated mass stays within `word_cutoff`. The top word is
/// always included and zero-probability words never are.
pub fn activity_word_set(activity_id: usize, phi: &[f64], word_cutoff: f64) -> Result<ActivityWordSet> {
    if !(word_cutoff > 0.0 && word_cutoff <= 1.0) {
        return Err(Error::invalid(format!("word cutoff must lie in (0, 1], got {word_cutoff}")));
    }
    if phi.is_empty() {
        return Err(Error::invalid("activity distribution is empty"));
    }
    if phi.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid(format!("activity {activity_id} has a negative or non-finite probability")));
    }
    let sum: f64 = phi.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("activity {activity_id} sums to {sum}, not 1")));
    }
    let mut order: Vec<usize> = (0..phi.len()).collect();
    order.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
    let mut words = Vec::new();
    let mut acc = 0.0;
    for (rank, &w) in order.iter().enumerate() {
        let p = phi[w];
        if p == 0.0 || (rank > 0 && acc + p > word_cutoff + 1e-9) {
            break;
        }
        acc += p;
        words.push(w as u32);
    }
    words.sort_unstable();
    Ok(ActivityWordSet { activity_id, words, covered_mass: acc })
}

/// Word sets of the model's typical activities, in typical order.
pub fn activity_word_sets(model: &ActivityModel, word_cutoff: f64) -> Result<Vec<ActivityWordSet>> {
    model.typical.iter().map(|&k| activity_word_set(k, &model.phi[k], word_cutoff)).collect()
}

/// Feature vector of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeature {
    pub clip_id: u64,
    /// Share of the clip's tokens inside each word set.
    pub c: Vec<f64>,
    pub n_words: usize,
    /// Distinct word types outside every word set, ascending.
    pub unassigned: Vec<u32>,
    /// Tokens whose word is outside every word set.
    pub n_unassigned: usize,
}

/// Word-to-set membership table for fast featurization.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    word_sets: Vec<ActivityWordSet>,
    membership: Vec<Vec<u32>>,
}

impl FeatureMap {
    pub fn new(word_sets: Vec<ActivityWordSet>, codebook_size: usize) -> Result<Self> {
        if word_sets.is_empty() {
            return Err(Error::invalid("at least one activity word set is required"));
        }
        let mut membership = vec![Vec::new(); codebook_size];
        for (j, s) in word_sets.iter().enumerate() {
            for &w in &s.words {
                let slot = membership
                    .get_mut(w as usize)
                    .ok_or_else(|| Error::invalid(format!("word {w} outside codebook of {codebook_size}")))?;
                slot.push(j as u32);
            }
        }
        Ok(FeatureMap { word_sets, membership })
    }

    pub fn from_model(model: &ActivityModel, word_cutoff: f64) -> Result<Self> {
        Self::new(activity_word_sets(model, word_cutoff)?, model.codebook_size)
    }

    pub fn word_sets(&self) -> &[ActivityWordSet] {
        &self.word_sets
    }

    pub fn dim(&self) -> usize {
        self.word_sets.len()
    }

    /// Indices of the word sets containing `word`; empty when out of range.
    pub fn sets_of(&self, word: u32) -> &[u32] {
        self.membership.get(word as usize).map_or(&[], |v| v.as_slice())
    }

    pub fn feature(&self, clip: &ClipDocument) -> ClipFeature {
        let mut hits = vec![0usize; self.dim()];
        let mut unassigned = Vec::new();
        for &w in &clip.words {
            let sets = self.sets_of(w);
            if sets.is_empty() {
                unassigned.push(w);
            }
            for &j in sets {
                hits[j as usize] += 1;
            }
        }
        finish(clip, hits, unassigned)
    }
}

fn finish(clip: &ClipDocument, hits: Vec<usize>, mut unassigned: Vec<u32>) -> ClipFeature {
    let n = clip.words.len();
    let n_unassigned = unassigned.len();
    unassigned.sort_unstable();
    unassigned.dedup();
    let c = if n == 0 { vec![0.0; hits.len()] } else { hits.iter().map(|&h| h as f64 / n as f64).collect() };
    ClipFeature { clip_id: clip.clip_id, c, n_words: n, unassigned, n_unassigned }
}

/// Feature of a clip against explicit word sets. Each token counts once
/// toward every set containing its word.
pub fn clip_feature(clip: &ClipDocument, word_sets: &[ActivityWordSet]) -> ClipFeature {
    let mut hits = vec![0usize; word_sets.len()];
    let mut unassigned = Vec::new();
    for &w in &clip.words {
        let mut any = false;
        for (j, s) in word_sets.iter().enumerate() {
            if s.contains(w) {
                hits[j] += 1;
                any = true;
            }
        }
        if !any {
            unassigned.push(w);
        }
    }
    finish(clip, hits, unassigned)
}

/// Labelled clip features for classifier training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub features: Vec<ClipFeature>,
    /// State id per feature.
    pub labels: Vec<usize>,
    /// The typical states, i.e. the classes.
    pub classes: Vec<usize>,
    /// Clips dropped because their state is not typical.
    pub dropped: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn inputs(&self) -> Vec<Vec<f64>> {
        self.features.iter().map(|f| f.c.clone()).collect()
    }

    pub fn records(&self) -> Vec<FeatureRecord> {
        self.features.iter().zip(&self.labels).map(|(f, &l)| FeatureRecord::new(f, Some(l))).collect()
    }
}

/// Pair every clip's feature with its state label, dropping clips in
/// non-typical states.
pub fn build_training_set(
    corpus: &Corpus,
    activities: &ActivityModel,
    states: &StateModel,
    word_cutoff: f64,
) -> Result<TrainingSet> {
    if corpus.len() != states.state_seq.len() {
        return Err(Error::invalid(format!(
            "corpus has {} clips but the state sequence has {}",
            corpus.len(),
            states.state_seq.len()
        )));
    }
    if corpus.codebook_size() != activities.codebook_size {
        return Err(Error::invalid("corpus and activity model use different codebooks"));
    }
    let map = FeatureMap::from_model(activities, word_cutoff)?;
    let mut classes = states.typical.clone();
    classes.sort_unstable();
    let mut features = Vec::with_capacity(corpus.len());
    let mut labels = Vec::with_capacity(corpus.len());
    let mut dropped = 0;
    for (clip, &s) in corpus.clips.iter().zip(&states.state_seq) {
        if classes.binary_search(&s).is_err() {
            dropped += 1;
            continue;
        }
        features.push(map.feature(clip));
        labels.push(s);
    }
    if dropped > 0 {
        log::info!("dropped {dropped} training clips labelled with non-typical states");
    }
    Ok(TrainingSet { features, labels, classes, dropped })
}

/// One line of a feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub clip_id: u64,
    pub label: Option<usize>,
    pub c: Vec<f64>,
    pub n_words: usize,
    pub n_unassigned: usize,
}

impl FeatureRecord {
    pub fn new(f: &ClipFeature, label: Option<usize>) -> Self {
        FeatureRecord { clip_id: f.clip_id, label, c: f.c.clone(), n_words: f.n_words, n_unassigned: f.n_unassigned }
    }
}

pub fn save_features(path: impl AsRef<Path>, records: &[FeatureRecord], config_hash: Option<&str>) -> Result<()> {
    let header = RecordHeader { schema: FEATURES_SCHEMA.into(), config_hash: config_hash.map(str::to_string), meta: None };
    save_records(path, &header, records)
}

/// Load a feature file, checking every vector has the same length.
pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let (_, records): (_, Vec<FeatureRecord>) = load_records(path, FEATURES_SCHEMA)?;
    check_features(&records)?;
    Ok(records)
}

/// [`load_features`] over any buffered reader.
pub fn read_features<R: BufRead>(reader: R, source: &str) -> Result<Vec<FeatureRecord>> {
    let (_, records): (_, Vec<FeatureRecord>) = read_records(reader, source, FEATURES_SCHEMA)?;
    check_features(&records)?;
    Ok(records)
}

pub fn check_features(records: &[FeatureRecord]) -> Result<()> {
    let Some(first) = records.first() else { return Ok(()) };
    let dim = first.c.len();
    for r in records {
        if r.c.len() != dim {
            return Err(Error::invalid(format!("clip {}: feature length {} differs from {dim}", r.clip_id, r.c.len())));
        }
        if r.c.iter().any(|x| !(x.is_finite() && (0.0..=1.0).contains(x))) {
            return Err(Error::invalid(format!("clip {}: feature entries must lie in [0, 1]", r.clip_id)));
        }
        if r.n_unassigned > r.n_words {
            return Err(Error::invalid(format!("clip {}: more unassigned tokens than tokens", r.clip_id)));
        }
    }
    Ok(())
}
