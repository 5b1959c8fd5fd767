//! Atomic-activity discovery with a hierarchical Dirichlet process.
//!
//! Clips are groups, visual words are observations and each activity is a
//! multinomial over the codebook with a symmetric Dirichlet prior. Inference
//! is the direct-assignment Gibbs sampler: token topics are resampled with
//! the global weights instantiated, then table counts and global weights are
//! refreshed once per sweep. The returned model is the post-burn-in sample
//! with the highest joint log probability.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::Corpus;
use crate::dp::{
    break_stick, chain_rng, crf_log_prob, dirichlet_multinomial_ln, sample_dirichlet, sample_table_count, HdpHyperParams,
    TypicalSelection, Restaurant, StirlingCache,
};
use crate::error::{Error, Result};

pub const ACTIVITIES_SCHEMA: &str = "activities/1";

/// Token-level state of one sample, kept alongside the fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct HdpSample {
    /// Topic label per token, per clip (parallel to the corpus clips).
    pub assignments: Vec<Vec<u32>>,
    /// Table count per clip and topic.
    pub tables: Vec<Vec<u32>>,
    pub log_prob: f64,
    pub sweep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityModel {
    pub hyper: HdpHyperParams,
    pub codebook_size: usize,
    /// Word distribution of each activity, one dense row per activity.
    pub phi: Vec<Vec<f64>>,
    /// Global activity weights.
    pub pi0: Vec<f64>,
    /// Tokens assigned to each activity.
    pub counts: Vec<u64>,
    /// Typical activities, most frequent first.
    pub typical: Vec<usize>,
    pub selection: TypicalSelection,
    #[serde(skip)]
    pub sample: Option<HdpSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivityFile {
    schema: String,
    hyper: HdpHyperParams,
    codebook_size: usize,
    #[serde(rename = "K")]
    k: usize,
    phi: Vec<Vec<f64>>,
    pi0: Vec<f64>,
    counts: Vec<u64>,
    typical: Vec<usize>,
    selection: TypicalSelection,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl ActivityModel {
    pub fn n_activities(&self) -> usize {
        self.phi.len()
    }

    /// Re-run typical selection with a different cutoff or rule.
    pub fn reselect_typical(&mut self, selection: TypicalSelection) -> Result<()> {
        let counts: Vec<f64> = self.counts.iter().map(|&c| c as f64).collect();
        self.typical = selection.select(&counts)?;
        self.selection = selection;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.phi.len();
        if k == 0 {
            return Err(Error::invalid("activity model has no activities"));
        }
        if self.counts.len() != k || self.pi0.len() != k {
            return Err(Error::invalid("phi, counts and pi0 lengths disagree"));
        }
        if self.codebook_size == 0 {
            return Err(Error::invalid("codebook_size must be positive"));
        }
        for (i, row) in self.phi.iter().enumerate() {
            if row.len() != self.codebook_size {
                return Err(Error::invalid(format!("phi row {i} has {} entries", row.len())));
            }
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::invalid(format!("phi row {i} has invalid entries")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("phi row {i} sums to {s}")));
            }
        }
        if self.typical.is_empty() || self.typical.iter().any(|&t| t >= k) {
            return Err(Error::invalid("typical activity ids out of range"));
        }
        let mut seen = self.typical.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.typical.len() {
            return Err(Error::invalid("duplicate typical activity ids"));
        }
        self.hyper.validate()
    }

    pub fn to_json(&self, config_hash: Option<&str>) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file(config_hash))?)
    }

    fn to_file(&self, config_hash: Option<&str>) -> ActivityFile {
        ActivityFile {
            schema: ACTIVITIES_SCHEMA.into(),
            hyper: self.hyper,
            codebook_size: self.codebook_size,
            k: self.phi.len(),
            phi: self.phi.clone(),
            pi0: self.pi0.clone(),
            counts: self.counts.clone(),
            typical: self.typical.clone(),
            selection: self.selection,
            seed: self.hyper.seed,
            config_hash: config_hash.map(str::to_string),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ActivityFile = serde_json::from_str(text)?;
        if f.schema != ACTIVITIES_SCHEMA {
            return Err(Error::Schema { expected: ACTIVITIES_SCHEMA.into(), found: f.schema });
        }
        if f.k != f.phi.len() {
            return Err(Error::invalid(format!("K = {} but phi has {} rows", f.k, f.phi.len())));
        }
        let m = ActivityModel {
            hyper: f.hyper,
            codebook_size: f.codebook_size,
            phi: f.phi,
            pi0: f.pi0,
            counts: f.counts,
            typical: f.typical,
            selection: f.selection,
            sample: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: Option<&str>) -> Result<()> {
        crate::io::write_json(path, &self.to_file(config_hash))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = crate::io::read_text(path.as_ref())?;
        Self::from_json(&text)
    }
}

/// Mutable sampler state. Topics live in slots; emptied slots are recycled.
struct Sampler<'a> {
    hyper: HdpHyperParams,
    vocab: usize,
    docs: Vec<&'a [u32]>,
    z: Vec<Vec<u32>>,
    doc_topic: Vec<Vec<u32>>,
    topic_word: Vec<Vec<u32>>,
    topic_total: Vec<u64>,
    beta: Vec<f64>,
    beta_rest: f64,
    active: Vec<usize>,
    free: Vec<usize>,
    tables: Vec<Vec<u32>>,
    rng: ChaCha8Rng,
    weights: Vec<f64>,
}

const UNASSIGNED: u32 = u32::MAX;

impl<'a> Sampler<'a> {
    fn new(corpus: &'a Corpus, hyper: HdpHyperParams, chain: usize) -> Self {
        let docs: Vec<&[u32]> = corpus.clips.iter().map(|c| c.words.as_slice()).collect();
        let z = docs.iter().map(|d| vec![UNASSIGNED; d.len()]).collect();
        let n_docs = docs.len();
        Sampler {
            hyper,
            vocab: corpus.codebook_size(),
            docs,
            z,
            doc_topic: vec![Vec::new(); n_docs],
            topic_word: Vec::new(),
            topic_total: Vec::new(),
            beta: Vec::new(),
            beta_rest: 1.0,
            active: Vec::new(),
            free: Vec::new(),
            tables: vec![Vec::new(); n_docs],
            rng: chain_rng(hyper.seed, chain),
            weights: Vec::new(),
        }
    }

    fn n_slots(&self) -> usize {
        self.topic_total.len()
    }

    fn alloc_topic(&mut self) -> usize {
        let (w, rest) = break_stick(&mut self.rng, self.beta_rest, self.hyper.gamma);
        self.beta_rest = rest;
        let slot = if let Some(s) = self.free.pop() {
            self.topic_word[s].iter_mut().for_each(|c| *c = 0);
            self.topic_total[s] = 0;
            s
        } else {
            self.topic_word.push(vec![0; self.vocab]);
            self.topic_total.push(0);
            self.beta.push(0.0);
            self.topic_total.len() - 1
        };
        self.beta[slot] = w;
        self.active.push(slot);
        slot
    }

    fn release_topic(&mut self, slot: usize) {
        self.beta_rest += self.beta[slot];
        self.beta[slot] = 0.0;
        self.active.retain(|&s| s != slot);
        self.free.push(slot);
    }

    #[inline]
    fn doc_count(&self, d: usize, k: usize) -> u32 {
        self.doc_topic[d].get(k).copied().unwrap_or(0)
    }

    fn add(&mut self, d: usize, w: usize, k: usize) {
        if self.doc_topic[d].len() <= k {
            self.doc_topic[d].resize(k + 1, 0);
        }
        self.doc_topic[d][k] += 1;
        self.topic_word[k][w] += 1;
        self.topic_total[k] += 1;
    }

    fn remove(&mut self, d: usize, w: usize, k: usize) {
        self.doc_topic[d][k] -= 1;
        self.topic_word[k][w] -= 1;
        self.topic_total[k] -= 1;
        if self.topic_total[k] == 0 {
            self.release_topic(k);
        }
    }

    /// Spread every token uniformly over `k` fresh topics.
    fn init_random(&mut self, k: usize) {
        let slots: Vec<usize> = (0..k).map(|_| self.alloc_topic()).collect();
        for d in 0..self.docs.len() {
            for i in 0..self.docs[d].len() {
                let w = self.docs[d][i] as usize;
                let t = slots[self.rng.random_range(0..k)];
                self.z[d][i] = t as u32;
                self.add(d, w, t);
            }
        }
        for t in slots {
            if self.topic_total[t] == 0 {
                self.release_topic(t);
            }
        }
        self.resample_globals();
    }

    fn sweep(&mut self) {
        let alpha = self.hyper.alpha;
        let d0 = self.hyper.d0;
        let vd0 = self.vocab as f64 * d0;
        let new_weight_base = alpha / self.vocab as f64;
        for d in 0..self.docs.len() {
            for i in 0..self.docs[d].len() {
                let w = self.docs[d][i] as usize;
                let old = self.z[d][i];
                if old != UNASSIGNED {
                    self.remove(d, w, old as usize);
                }
                self.weights.clear();
                let mut total = 0.0;
                for &k in &self.active {
                    let p = (self.doc_count(d, k) as f64 + alpha * self.beta[k])
                        * (self.topic_word[k][w] as f64 + d0)
                        / (self.topic_total[k] as f64 + vd0);
                    total += p;
                    self.weights.push(total);
                }
                total += new_weight_base * self.beta_rest;
                let u = self.rng.random::<f64>() * total;
                let pos = self.weights.partition_point(|&c| c <= u);
                let k = if pos < self.active.len() { self.active[pos] } else { self.alloc_topic() };
                self.z[d][i] = k as u32;
                self.add(d, w, k);
            }
        }
        self.resample_globals();
    }

    fn resample_globals(&mut self) {
        let alpha = self.hyper.alpha;
        let n_slots = self.n_slots();
        let mut dish_tables = vec![0.0; n_slots];
        for d in 0..self.docs.len() {
            let mut t = vec![0u32; n_slots];
            for &k in &self.active {
                let n = self.doc_count(d, k);
                if n > 0 {
                    t[k] = sample_table_count(&mut self.rng, n, alpha * self.beta[k]);
                    dish_tables[k] += t[k] as f64;
                }
            }
            self.tables[d] = t;
        }
        let mut params: Vec<f64> = self.active.iter().map(|&k| dish_tables[k]).collect();
        params.push(self.hyper.gamma);
        let draw = sample_dirichlet(&mut self.rng, &params);
        for (j, &k) in self.active.iter().enumerate() {
            self.beta[k] = draw[j];
        }
        self.beta_rest = draw[self.active.len()];
    }

    /// Joint log probability of the current (assignment, table) state.
    fn joint(&self, stirling: &mut StirlingCache) -> f64 {
        let n_slots = self.n_slots();
        let mut lp = 0.0;
        for &k in &self.active {
            lp += dirichlet_multinomial_ln(&self.topic_word[k], self.topic_total[k], self.vocab, self.hyper.d0);
        }
        let padded: Vec<Vec<u32>> = self
            .doc_topic
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.resize(n_slots, 0);
                r
            })
            .collect();
        let tables: Vec<Vec<u32>> = self
            .tables
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.resize(n_slots, 0);
                r
            })
            .collect();
        let rest = padded
            .iter()
            .zip(&tables)
            .map(|(c, t)| Restaurant { customers: c, tables: t });
        lp + crf_log_prob(rest, n_slots, self.hyper.alpha, self.hyper.gamma, stirling)
            .expect("sampler keeps table counts consistent")
    }
}

/// Fit the activity model by direct-assignment Gibbs sampling.
///
/// Empty clips are skipped (they carry no tokens). The result is
/// deterministic for a given `hyper.seed`.
pub fn fit_hdp(corpus: &Corpus, hyper: HdpHyperParams) -> Result<ActivityModel> {
    fit_hdp_with_selection(corpus, hyper, TypicalSelection::default())
}

pub fn fit_hdp_with_selection(corpus: &Corpus, hyper: HdpHyperParams, selection: TypicalSelection) -> Result<ActivityModel> {
    hyper.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("cannot learn activities from an empty corpus"));
    }
    if corpus.n_tokens() == 0 {
        return Err(Error::invalid("corpus has no tokens"));
    }
    let empty = corpus.clips.iter().filter(|c| c.is_empty()).count();
    if empty > 0 {
        log::warn!("skipping {empty} empty clips during activity learning");
    }
    let mut stirling = StirlingCache::new();
    let mut best: Option<(f64, usize, Vec<Vec<u32>>, Vec<Vec<u32>>, Vec<f64>)> = None;
    for chain in 0..hyper.n_chains {
        let mut s = Sampler::new(corpus, hyper, chain);
        if hyper.init_components > 0 {
            s.init_random(hyper.init_components);
        }
        for sweep in 0..hyper.n_sweeps {
            s.sweep();
            if sweep >= hyper.n_burnin {
                let lp = s.joint(&mut stirling);
                if best.as_ref().is_none_or(|b| lp > b.0) {
                    best = Some((lp, sweep, s.z.clone(), s.tables.clone(), s.beta.clone()));
                }
            }
        }
        log::debug!("activity chain {chain} done, best joint so far {:.3}", best.as_ref().map_or(f64::NAN, |b| b.0));
    }
    let (log_prob, sweep, z, tables, beta) = best.expect("at least one post-burn-in sweep");
    Ok(build_model(corpus, hyper, selection, log_prob, sweep, &z, &tables, &beta))
}

#[allow(clippy::too_many_arguments)]
fn build_model(
    corpus: &Corpus,
    hyper: HdpHyperParams,
    selection: TypicalSelection,
    log_prob: f64,
    sweep: usize,
    z: &[Vec<u32>],
    tables: &[Vec<u32>],
    beta: &[f64],
) -> ActivityModel {
    let vocab = corpus.codebook_size();
    let n_slots = beta.len();
    let mut slot_word = vec![Vec::<u32>::new(); n_slots];
    let mut slot_total = vec![0u64; n_slots];
    for (clip, zs) in corpus.clips.iter().zip(z) {
        for (&w, &k) in clip.words.iter().zip(zs) {
            let k = k as usize;
            if slot_word[k].is_empty() {
                slot_word[k] = vec![0; vocab];
            }
            slot_word[k][w as usize] += 1;
            slot_total[k] += 1;
        }
    }
    // Relabel live slots by descending size, ties by slot index.
    let mut live: Vec<usize> = (0..n_slots).filter(|&k| slot_total[k] > 0).collect();
    live.sort_by(|&a, &b| slot_total[b].cmp(&slot_total[a]).then(a.cmp(&b)));
    let mut relabel = vec![u32::MAX; n_slots];
    for (new, &old) in live.iter().enumerate() {
        relabel[old] = new as u32;
    }
    let vd0 = vocab as f64 * hyper.d0;
    let phi = live
        .iter()
        .map(|&k| {
            let denom = slot_total[k] as f64 + vd0;
            slot_word[k].iter().map(|&c| (c as f64 + hyper.d0) / denom).collect()
        })
        .collect();
    let counts: Vec<u64> = live.iter().map(|&k| slot_total[k]).collect();
    let pi0 = live.iter().map(|&k| beta[k]).collect();
    let assignments = z.iter().map(|zs| zs.iter().map(|&k| relabel[k as usize]).collect()).collect();
    let tables = tables
        .iter()
        .map(|t| live.iter().map(|&k| t.get(k).copied().unwrap_or(0)).collect())
        .collect();
    let count_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let typical = selection.select(&count_f).expect("tokens exist");
    ActivityModel {
        hyper,
        codebook_size: vocab,
        phi,
        pi0,
        counts,
        typical,
        selection,
        sample: Some(HdpSample { assignments, tables, log_prob, sweep }),
    }
}

/// Joint log probability of a model's retained sample on its corpus:
/// the collapsed word likelihood plus the franchise seating probability.
pub fn joint_log_prob(model: &ActivityModel, corpus: &Corpus) -> Result<f64> {
    let sample = model
        .sample
        .as_ref()
        .ok_or_else(|| Error::invalid("model carries no token assignments (loaded from file?)"))?;
    assignment_log_prob(
        corpus,
        &sample.assignments,
        &sample.tables,
        model.n_activities(),
        &model.hyper,
    )
}

/// Joint log probability of explicit token assignments and table counts.
pub fn assignment_log_prob(
    corpus: &Corpus,
    assignments: &[Vec<u32>],
    tables: &[Vec<u32>],
    n_topics: usize,
    hyper: &HdpHyperParams,
) -> Result<f64> {
    if assignments.len() != corpus.len() || tables.len() != corpus.len() {
        return Err(Error::invalid(format!(
            "assignments cover {} clips, tables {}, corpus has {}",
            assignments.len(),
            tables.len(),
            corpus.len()
        )));
    }
    let vocab = corpus.codebook_size();
    let mut topic_word = vec![vec![0u32; vocab]; n_topics];
    let mut topic_total = vec![0u64; n_topics];
    let mut doc_topic = vec![vec![0u32; n_topics]; corpus.len()];
    for (d, (clip, zs)) in corpus.clips.iter().zip(assignments).enumerate() {
        if zs.len() != clip.words.len() {
            return Err(Error::invalid(format!("clip {} has {} tokens but {} labels", clip.clip_id, clip.words.len(), zs.len())));
        }
        for (&w, &k) in clip.words.iter().zip(zs) {
            let k = k as usize;
            if k >= n_topics {
                return Err(Error::invalid(format!("topic label {k} out of range")));
            }
            topic_word[k][w as usize] += 1;
            topic_total[k] += 1;
            doc_topic[d][k] += 1;
        }
    }
    let mut padded_tables = Vec::with_capacity(tables.len());
    for t in tables {
        if t.len() > n_topics {
            return Err(Error::invalid("table counts reference unknown topics"));
        }
        let mut t = t.clone();
        t.resize(n_topics, 0);
        padded_tables.push(t);
    }
    let mut lp = 0.0;
    for k in 0..n_topics {
        if topic_total[k] > 0 {
            lp += dirichlet_multinomial_ln(&topic_word[k], topic_total[k], vocab, hyper.d0);
        }
    }
    let mut stirling = StirlingCache::new();
    let rest = doc_topic
        .iter()
        .zip(&padded_tables)
        .map(|(c, t)| Restaurant { customers: c, tables: t });
    Ok(lp + crf_log_prob(rest, n_topics, hyper.alpha, hyper.gamma, &mut stirling)?)
}
