//! Traffic-state discovery with an HDP hidden Markov model.
//!
//! Each clip carries one latent state; a state emits the clip's whole word
//! bag from its own multinomial over the codebook. Transition rows share the
//! global state weights through a hierarchical DP. State labels are resampled
//! one clip at a time given both neighbours (direct assignment), with
//! transition table counts and global weights refreshed after each sweep.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::Corpus;
use crate::dp::{
    break_stick, chain_rng, crf_log_prob, dirichlet_multinomial_ln, ln_rising, sample_dirichlet, sample_table_count,
    select_typical, HdpHyperParams, Restaurant, StirlingCache, TypicalSelection,
};
use crate::error::{Error, Result};

pub const STATES_SCHEMA: &str = "states/1";

/// Column-stochastic transition matrix: `m[to][from] = P(next = to | current = from)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransitionMatrix(Vec<Vec<f64>>);

impl TransitionMatrix {
    pub const CONVENTION: &'static str = "col-from";

    /// Build from a `[to][from]` table, checking every column sums to one.
    pub fn from_col_from(m: Vec<Vec<f64>>) -> Result<Self> {
        let t = TransitionMatrix(m);
        t.validate()?;
        Ok(t)
    }

    /// Build from row-stochastic `[from][to]` probabilities.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = vec![vec![0.0; n]; n];
        for (from, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid("transition rows must be square"));
            }
            for (to, &p) in row.iter().enumerate() {
                m[to][from] = p;
            }
        }
        Self::from_col_from(m)
    }

    /// Smoothed estimate from a label sequence: each column is
    /// `(count + pseudo) / (total + n * pseudo)`.
    pub fn from_sequence(labels: &[usize], n_states: usize, pseudo: f64) -> Result<Self> {
        if n_states == 0 || pseudo <= 0.0 {
            return Err(Error::invalid("need at least one state and a positive pseudo-count"));
        }
        let mut counts = vec![vec![0.0; n_states]; n_states];
        for w in labels.windows(2) {
            if w[0] >= n_states || w[1] >= n_states {
                return Err(Error::invalid("label out of range"));
            }
            counts[w[1]][w[0]] += 1.0;
        }
        for from in 0..n_states {
            let total: f64 = (0..n_states).map(|to| counts[to][from]).sum();
            for row in counts.iter_mut() {
                row[from] = (row[from] + pseudo) / (total + n_states as f64 * pseudo);
            }
        }
        Ok(TransitionMatrix(counts))
    }

    pub fn n_states(&self) -> usize {
        self.0.len()
    }

    pub fn as_col_from(&self) -> &[Vec<f64>] {
        &self.0
    }

    pub fn prob(&self, from: usize, to: usize) -> Result<f64> {
        let n = self.n_states();
        if from >= n || to >= n {
            return Err(Error::invalid(format!("state pair ({from}, {to}) outside {n} states")));
        }
        Ok(self.0[to][from])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.0.len();
        if n == 0 || self.0.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("transition matrix must be square and non-empty"));
        }
        for from in 0..n {
            let mut s = 0.0;
            for to in 0..n {
                let p = self.0[to][from];
                if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                    return Err(Error::invalid(format!("invalid transition probability {p}")));
                }
                s += p;
            }
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("transitions out of state {from} sum to {s}")));
            }
        }
        Ok(())
    }
}

/// Retained sampler state for the selected sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmSample {
    /// Transition table counts `[from][to]`.
    pub tables: Vec<Vec<u32>>,
    pub log_prob: f64,
    pub sweep: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateModel {
    pub hyper: HdpHyperParams,
    pub codebook_size: usize,
    /// Word distribution of each state.
    pub emission: Vec<Vec<f64>>,
    pub transition: TransitionMatrix,
    pub beta_weights: Vec<f64>,
    /// State label of every training clip, in corpus order.
    pub state_seq: Vec<usize>,
    /// Typical states, most frequent first.
    pub typical: Vec<usize>,
    pub selection: TypicalSelection,
    pub sample: Option<HmmSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    schema: String,
    #[serde(rename = "L")]
    l: usize,
    codebook_size: usize,
    emission: Vec<Vec<f64>>,
    transition: TransitionMatrix,
    convention: String,
    beta_weights: Vec<f64>,
    state_seq: Vec<usize>,
    typical: Vec<usize>,
    selection: TypicalSelection,
    hyper: HdpHyperParams,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl StateModel {
    pub fn n_states(&self) -> usize {
        self.emission.len()
    }

    /// Number of training clips carrying each state label.
    pub fn clip_counts(&self) -> Vec<u64> {
        let mut c = vec![0u64; self.n_states()];
        for &s in &self.state_seq {
            c[s] += 1;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.emission.len();
        if l == 0 {
            return Err(Error::invalid("state model has no states"));
        }
        self.transition.validate()?;
        if self.transition.n_states() != l || self.beta_weights.len() != l {
            return Err(Error::invalid("emission, transition and weights disagree on the state count"));
        }
        for (i, row) in self.emission.iter().enumerate() {
            if row.len() != self.codebook_size || row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::invalid(format!("emission row {i} is malformed")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("emission row {i} sums to {s}")));
            }
        }
        if self.state_seq.iter().any(|&s| s >= l) {
            return Err(Error::invalid("state sequence label out of range"));
        }
        if self.typical.is_empty() || self.typical.iter().any(|&s| s >= l) {
            return Err(Error::invalid("typical state ids out of range"));
        }
        let mut t = self.typical.clone();
        t.sort_unstable();
        t.dedup();
        if t.len() != self.typical.len() {
            return Err(Error::invalid("duplicate typical state ids"));
        }
        self.hyper.validate()
    }

    fn to_file(&self, config_hash: Option<&str>) -> StateFile {
        StateFile {
            schema: STATES_SCHEMA.into(),
            l: self.n_states(),
            codebook_size: self.codebook_size,
            emission: self.emission.clone(),
            transition: self.transition.clone(),
            convention: TransitionMatrix::CONVENTION.into(),
            beta_weights: self.beta_weights.clone(),
            state_seq: self.state_seq.clone(),
            typical: self.typical.clone(),
            selection: self.selection,
            hyper: self.hyper,
            seed: self.hyper.seed,
            config_hash: config_hash.map(str::to_string),
        }
    }

    pub fn to_json(&self, config_hash: Option<&str>) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file(config_hash))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: StateFile = serde_json::from_str(text)?;
        if f.schema != STATES_SCHEMA {
            return Err(Error::Schema { expected: STATES_SCHEMA.into(), found: f.schema });
        }
        if f.convention != TransitionMatrix::CONVENTION {
            return Err(Error::invalid(format!("unsupported transition convention {:?}", f.convention)));
        }
        if f.l != f.emission.len() {
            return Err(Error::invalid(format!("L = {} but {} emission rows", f.l, f.emission.len())));
        }
        let m = StateModel {
            hyper: f.hyper,
            codebook_size: f.codebook_size,
            emission: f.emission,
            transition: f.transition,
            beta_weights: f.beta_weights,
            state_seq: f.state_seq,
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
        Self::from_json(&crate::io::read_text(path.as_ref())?)
    }
}

/// `P(next = to | current = from)` under the model's smoothed transitions.
pub fn transition_prob(model: &StateModel, from: usize, to: usize) -> Result<f64> {
    model.transition.prob(from, to)
}

pub fn select_typical_states(state_seq: &[usize], n_states: usize, cutoff: f64) -> Result<Vec<usize>> {
    let mut counts = vec![0.0; n_states];
    for &s in state_seq {
        if s >= n_states {
            return Err(Error::invalid(format!("state {s} out of range")));
        }
        counts[s] += 1.0;
    }
    select_typical(&counts, cutoff)
}

/// Sparse word bag of one clip.
struct Bag {
    words: Vec<(u32, u32)>,
    total: u32,
}

impl Bag {
    fn from_words(words: &[u32]) -> Bag {
        let mut w = words.to_vec();
        w.sort_unstable();
        let mut out: Vec<(u32, u32)> = Vec::new();
        for x in w {
            match out.last_mut() {
                Some((y, c)) if *y == x => *c += 1,
                _ => out.push((x, 1)),
            }
        }
        Bag { words: out, total: words.len() as u32 }
    }
}

struct Sampler {
    hyper: HdpHyperParams,
    vocab: usize,
    bags: Vec<Bag>,
    y: Vec<usize>,
    state_word: Vec<Vec<u32>>,
    state_total: Vec<u64>,
    state_clips: Vec<u64>,
    /// `trans[from][to]`, grown on demand.
    trans: Vec<Vec<u32>>,
    beta: Vec<f64>,
    beta_rest: f64,
    active: Vec<usize>,
    free: Vec<usize>,
    tables: Vec<Vec<u32>>,
    rng: ChaCha8Rng,
    logw: Vec<f64>,
}

const NONE: usize = usize::MAX;

impl Sampler {
    fn new(corpus: &Corpus, hyper: HdpHyperParams, chain: usize) -> Self {
        let bags: Vec<Bag> = corpus.clips.iter().map(|c| Bag::from_words(&c.words)).collect();
        let n = bags.len();
        Sampler {
            hyper,
            vocab: corpus.codebook_size(),
            bags,
            y: vec![NONE; n],
            state_word: Vec::new(),
            state_total: Vec::new(),
            state_clips: Vec::new(),
            trans: Vec::new(),
            beta: Vec::new(),
            beta_rest: 1.0,
            active: Vec::new(),
            free: Vec::new(),
            tables: Vec::new(),
            rng: chain_rng(hyper.seed, chain),
            logw: Vec::new(),
        }
    }

    fn n_slots(&self) -> usize {
        self.state_total.len()
    }

    fn alloc_state(&mut self) -> usize {
        let (w, rest) = break_stick(&mut self.rng, self.beta_rest, self.hyper.gamma);
        self.beta_rest = rest;
        let slot = if let Some(s) = self.free.pop() {
            self.state_word[s].iter_mut().for_each(|c| *c = 0);
            self.state_total[s] = 0;
            self.state_clips[s] = 0;
            s
        } else {
            self.state_word.push(vec![0; self.vocab]);
            self.state_total.push(0);
            self.state_clips.push(0);
            self.beta.push(0.0);
            let n = self.n_slots();
            for row in &mut self.trans {
                row.resize(n, 0);
            }
            self.trans.push(vec![0; n]);
            n - 1
        };
        self.beta[slot] = w;
        self.active.push(slot);
        slot
    }

    fn release_state(&mut self, slot: usize) {
        self.beta_rest += self.beta[slot];
        self.beta[slot] = 0.0;
        self.active.retain(|&s| s != slot);
        self.free.push(slot);
    }

    fn set_emission(&mut self, t: usize, k: usize, add: bool) {
        let bag = &self.bags[t];
        let row = &mut self.state_word[k];
        for &(w, c) in &bag.words {
            if add {
                row[w as usize] += c;
            } else {
                row[w as usize] -= c;
            }
        }
        if add {
            self.state_total[k] += bag.total as u64;
            self.state_clips[k] += 1;
        } else {
            self.state_total[k] -= bag.total as u64;
            self.state_clips[k] -= 1;
        }
    }

    fn set_transitions(&mut self, t: usize, k: usize, add: bool) {
        let n = self.y.len();
        let mut bump = |from: usize, to: usize| {
            if add {
                self.trans[from][to] += 1;
            } else {
                self.trans[from][to] -= 1;
            }
        };
        if t > 0 && self.y[t - 1] != NONE {
            bump(self.y[t - 1], k);
        }
        if t + 1 < n && self.y[t + 1] != NONE {
            bump(k, self.y[t + 1]);
        }
    }

    fn bag_loglik(&self, t: usize, k: Option<usize>) -> f64 {
        let d0 = self.hyper.d0;
        let vd0 = self.vocab as f64 * d0;
        let bag = &self.bags[t];
        if bag.total == 0 {
            return 0.0;
        }
        let (row, total) = match k {
            Some(k) => (Some(&self.state_word[k]), self.state_total[k] as f64),
            None => (None, 0.0),
        };
        let mut lp = -ln_rising(total + vd0, bag.total);
        for &(w, c) in &bag.words {
            let n = row.map_or(0, |r| r[w as usize]) as f64;
            lp += ln_rising(n + d0, c);
        }
        lp
    }

    /// Spread clips uniformly over `k` fresh states.
    fn init_random(&mut self, k: usize) {
        let slots: Vec<usize> = (0..k).map(|_| self.alloc_state()).collect();
        for t in 0..self.y.len() {
            self.y[t] = slots[self.rng.random_range(0..k)];
        }
        for t in 0..self.y.len() {
            self.set_emission(t, self.y[t], true);
            if t > 0 {
                self.trans[self.y[t - 1]][self.y[t]] += 1;
            }
        }
        for s in slots {
            if self.state_clips[s] == 0 {
                self.release_state(s);
            }
        }
        self.resample_globals();
    }

    fn sweep(&mut self) {
        let alpha = self.hyper.alpha;
        let n = self.y.len();
        for t in 0..n {
            let old = self.y[t];
            if old != NONE {
                self.set_emission(t, old, false);
                self.set_transitions(t, old, false);
                self.y[t] = NONE;
                if self.state_clips[old] == 0 {
                    self.release_state(old);
                }
            }
            let prev = if t > 0 { self.y[t - 1] } else { NONE };
            let next = if t + 1 < n { self.y[t + 1] } else { NONE };
            self.logw.clear();
            let mut max = f64::NEG_INFINITY;
            for idx in 0..self.active.len() {
                let k = self.active[idx];
                let into = if prev != NONE {
                    self.trans[prev][k] as f64 + alpha * self.beta[k]
                } else {
                    self.beta[k]
                };
                let out = if next != NONE {
                    let same = (prev == k && k == next) as u32 as f64;
                    let row_total: u32 = self.active.iter().map(|&j| self.trans[k][j]).sum();
                    (self.trans[k][next] as f64 + alpha * self.beta[next] + same)
                        / (row_total as f64 + alpha + (prev == k) as u32 as f64)
                } else {
                    1.0
                };
                let lw = into.ln() + out.ln() + self.bag_loglik(t, Some(k));
                max = max.max(lw);
                self.logw.push(lw);
            }
            let into_new = if prev != NONE { alpha * self.beta_rest } else { self.beta_rest };
            let out_new = if next != NONE { self.beta[next] } else { 1.0 };
            let lw_new = into_new.ln() + out_new.ln() + self.bag_loglik(t, None);
            max = max.max(lw_new);
            self.logw.push(lw_new);
            let mut total = 0.0;
            for lw in self.logw.iter_mut() {
                total += (*lw - max).exp();
                *lw = total;
            }
            let u = self.rng.random::<f64>() * total;
            let pos = self.logw.partition_point(|&c| c <= u).min(self.active.len());
            let k = if pos < self.active.len() { self.active[pos] } else { self.alloc_state() };
            self.y[t] = k;
            self.set_emission(t, k, true);
            self.set_transitions(t, k, true);
        }
        self.resample_globals();
    }

    fn resample_globals(&mut self) {
        let alpha = self.hyper.alpha;
        let ns = self.n_slots();
        let mut dish_tables = vec![0.0; ns];
        // The first clip is the lone customer of a start restaurant.
        dish_tables[self.y[0]] += 1.0;
        self.tables = vec![vec![0; ns]; ns];
        for &j in &self.active {
            for &k in &self.active {
                let c = self.trans[j][k];
                if c > 0 {
                    let m = sample_table_count(&mut self.rng, c, alpha * self.beta[k]);
                    self.tables[j][k] = m;
                    dish_tables[k] += m as f64;
                }
            }
        }
        let mut params: Vec<f64> = self.active.iter().map(|&k| dish_tables[k]).collect();
        params.push(self.hyper.gamma);
        let draw = sample_dirichlet(&mut self.rng, &params);
        for (j, &k) in self.active.iter().enumerate() {
            self.beta[k] = draw[j];
        }
        self.beta_rest = draw[self.active.len()];
    }

    fn joint(&self, stirling: &mut StirlingCache) -> f64 {
        let ns = self.n_slots();
        let mut lp = 0.0;
        for &k in &self.active {
            lp += dirichlet_multinomial_ln(&self.state_word[k], self.state_total[k], self.vocab, self.hyper.d0);
        }
        let mut start_c = vec![0u32; ns];
        start_c[self.y[0]] = 1;
        let start_t = start_c.clone();
        let rows = std::iter::once(Restaurant { customers: &start_c, tables: &start_t })
            .chain((0..ns).map(|j| Restaurant { customers: &self.trans[j], tables: &self.tables[j] }));
        lp + crf_log_prob(rows, ns, self.hyper.alpha, self.hyper.gamma, stirling)
            .expect("sampler keeps table counts consistent")
    }
}

/// Fit the state model by direct-assignment Gibbs sampling over clip labels.
pub fn fit_hdphmm(corpus: &Corpus, hyper: HdpHyperParams) -> Result<StateModel> {
    fit_hdphmm_with_selection(corpus, hyper, TypicalSelection::default())
}

pub fn fit_hdphmm_with_selection(corpus: &Corpus, hyper: HdpHyperParams, selection: TypicalSelection) -> Result<StateModel> {
    hyper.validate()?;
    if corpus.len() < 2 {
        return Err(Error::invalid(format!("state learning needs at least 2 clips, got {}", corpus.len())));
    }
    let mut stirling = StirlingCache::new();
    let mut best: Option<(f64, usize, Vec<usize>, Vec<Vec<u32>>, Vec<f64>)> = None;
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
                    best = Some((lp, sweep, s.y.clone(), s.tables.clone(), s.beta.clone()));
                }
            }
        }
        log::debug!("state chain {chain} done, best joint so far {:.3}", best.as_ref().map_or(f64::NAN, |b| b.0));
    }
    let (log_prob, sweep, y, tables, beta) = best.expect("at least one post-burn-in sweep");
    Ok(build_model(corpus, hyper, selection, log_prob, sweep, &y, &tables, &beta))
}

#[allow(clippy::too_many_arguments)]
fn build_model(
    corpus: &Corpus,
    hyper: HdpHyperParams,
    selection: TypicalSelection,
    log_prob: f64,
    sweep: usize,
    y: &[usize],
    tables: &[Vec<u32>],
    beta: &[f64],
) -> StateModel {
    let vocab = corpus.codebook_size();
    let ns = beta.len();
    let mut clips = vec![0u64; ns];
    for &k in y {
        clips[k] += 1;
    }
    let mut live: Vec<usize> = (0..ns).filter(|&k| clips[k] > 0).collect();
    live.sort_by(|&a, &b| clips[b].cmp(&clips[a]).then(a.cmp(&b)));
    let l = live.len();
    let mut relabel = vec![usize::MAX; ns];
    for (new, &old) in live.iter().enumerate() {
        relabel[old] = new;
    }
    let state_seq: Vec<usize> = y.iter().map(|&k| relabel[k]).collect();

    let mut word = vec![vec![0u64; vocab]; l];
    let mut total = vec![0u64; l];
    for (clip, &s) in corpus.clips.iter().zip(&state_seq) {
        for &w in &clip.words {
            word[s][w as usize] += 1;
        }
        total[s] += clip.words.len() as u64;
    }
    let vd0 = vocab as f64 * hyper.d0;
    let emission = (0..l)
        .map(|s| word[s].iter().map(|&c| (c as f64 + hyper.d0) / (total[s] as f64 + vd0)).collect())
        .collect();

    let beta_live: Vec<f64> = live.iter().map(|&k| beta[k]).collect();
    let bsum: f64 = beta_live.iter().sum();
    let beta_norm: Vec<f64> = beta_live.iter().map(|b| b / bsum).collect();
    let mut counts = vec![vec![0.0; l]; l];
    for w in state_seq.windows(2) {
        counts[w[0]][w[1]] += 1.0;
    }
    let alpha = hyper.alpha;
    let mut m = vec![vec![0.0; l]; l];
    for from in 0..l {
        let row_total: f64 = counts[from].iter().sum();
        for to in 0..l {
            m[to][from] = (counts[from][to] + alpha * beta_norm[to]) / (row_total + alpha);
        }
    }
    let tables_live = live.iter().map(|&j| live.iter().map(|&k| tables[j][k]).collect()).collect();
    let clip_f: Vec<f64> = live.iter().map(|&k| clips[k] as f64).collect();
    let typical = selection.select(&clip_f).expect("clips exist");
    StateModel {
        hyper,
        codebook_size: vocab,
        emission,
        transition: TransitionMatrix(m),
        beta_weights: beta_norm,
        state_seq,
        typical,
        selection,
        sample: Some(HmmSample { tables: tables_live, log_prob, sweep }),
    }
}

/// Joint log probability of a state labelling with its transition table
/// counts: collapsed emissions plus the franchise seating of transitions.
pub fn labelling_log_prob(
    corpus: &Corpus,
    state_seq: &[usize],
    tables: &[Vec<u32>],
    n_states: usize,
    hyper: &HdpHyperParams,
) -> Result<f64> {
    if state_seq.len() != corpus.len() || corpus.is_empty() {
        return Err(Error::invalid("state sequence length differs from the corpus"));
    }
    if tables.len() != n_states || tables.iter().any(|r| r.len() != n_states) {
        return Err(Error::invalid("table counts must be n_states x n_states"));
    }
    let vocab = corpus.codebook_size();
    let mut word = vec![vec![0u32; vocab]; n_states];
    let mut total = vec![0u64; n_states];
    for (clip, &s) in corpus.clips.iter().zip(state_seq) {
        if s >= n_states {
            return Err(Error::invalid(format!("state {s} out of range")));
        }
        for &w in &clip.words {
            word[s][w as usize] += 1;
        }
        total[s] += clip.words.len() as u64;
    }
    let mut trans = vec![vec![0u32; n_states]; n_states];
    for w in state_seq.windows(2) {
        trans[w[0]][w[1]] += 1;
    }
    let mut lp = 0.0;
    for s in 0..n_states {
        if total[s] > 0 || word[s].iter().any(|&c| c > 0) {
            lp += dirichlet_multinomial_ln(&word[s], total[s], vocab, hyper.d0);
        }
    }
    let mut start = vec![0u32; n_states];
    start[state_seq[0]] = 1;
    let rows = std::iter::once(Restaurant { customers: &start, tables: &start })
        .chain((0..n_states).map(|j| Restaurant { customers: &trans[j], tables: &tables[j] }));
    let mut stirling = StirlingCache::new();
    Ok(lp + crf_log_prob(rows, n_states, hyper.alpha, hyper.gamma, &mut stirling)?)
}

/// Joint log probability of a fitted model's retained sample.
pub fn joint_log_prob(model: &StateModel, corpus: &Corpus) -> Result<f64> {
    let sample = model
        .sample
        .as_ref()
        .ok_or_else(|| Error::invalid("model carries no sampler state (loaded from file?)"))?;
    labelling_log_prob(corpus, &model.state_seq, &sample.tables, model.n_states(), &model.hyper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{ClipDocument, GridSpec};

    fn corpus_of(docs: Vec<Vec<u32>>) -> Corpus {
        let mut c = Corpus::new(GridSpec::new(64, 32).unwrap(), 75).unwrap();
        for (i, words) in docs.into_iter().enumerate() {
            c.push(ClipDocument { clip_id: i as u64, frame_start: 75 * i as u64, frame_end: 75 * (i as u64 + 1), words })
                .unwrap();
        }
        c
    }

    fn quick(seed: u64) -> HdpHyperParams {
        HdpHyperParams { n_sweeps: 80, n_burnin: 40, seed, n_chains: 1, ..Default::default() }
    }

    #[test]
    fn needs_two_clips() {
        assert!(fit_hdphmm(&corpus_of(vec![vec![1]]), quick(0)).is_err());
    }

    #[test]
    fn identical_clips_collapse_to_one_state() {
        let c = corpus_of((0..40).map(|_| vec![3, 3, 9, 12, 12, 12]).collect());
        let m = fit_hdphmm(&c, quick(1)).unwrap();
        assert_eq!(m.typical.len(), 1);
        let s = m.typical[0];
        assert!(m.transition.prob(s, s).unwrap() > 0.95);
    }

    #[test]
    fn two_alternating_blocks() {
        let mut docs = Vec::new();
        for b in 0..8 {
            for _ in 0..10 {
                docs.push(if b % 2 == 0 { vec![1; 30] } else { vec![40; 30] });
            }
        }
        let c = corpus_of(docs);
        let m = fit_hdphmm(&c, quick(2)).unwrap();
        m.validate().unwrap();
        assert_eq!(m.n_states(), 2);
        let a = m.state_seq[0];
        let b = m.state_seq[10];
        assert_ne!(a, b);
        assert!(m.state_seq[..10].iter().all(|&s| s == a));
        assert!(m.transition.prob(a, a).unwrap() > 0.8);
        for from in 0..m.n_states() {
            let s: f64 = (0..m.n_states()).map(|to| transition_prob(&m, from, to).unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9);
            for to in 0..m.n_states() {
                assert!(transition_prob(&m, from, to).unwrap() > 0.0);
            }
        }
        assert!(transition_prob(&m, 0, 5).is_err());
    }

    #[test]
    fn reproducible_and_relabel_invariant() {
        let docs: Vec<Vec<u32>> = (0..30).map(|i| vec![(i / 10) as u32 * 20; 10]).collect();
        let c = corpus_of(docs);
        let a = fit_hdphmm(&c, quick(7)).unwrap();
        let b = fit_hdphmm(&c, quick(7)).unwrap();
        assert_eq!(a, b);
        let base = joint_log_prob(&a, &c).unwrap();
        assert!(base.is_finite());
        let l = a.n_states();
        let perm: Vec<usize> = (0..l).rev().collect();
        let seq: Vec<usize> = a.state_seq.iter().map(|&s| perm[s]).collect();
        let tables = a.sample.as_ref().unwrap().tables.clone();
        let mut t2 = vec![vec![0; l]; l];
        for j in 0..l {
            for k in 0..l {
                t2[perm[j]][perm[k]] = tables[j][k];
            }
        }
        let permuted = labelling_log_prob(&c, &seq, &t2, l, &a.hyper).unwrap();
        assert!((base - permuted).abs() < 1e-9 * base.abs());
    }

    #[test]
    fn typical_state_examples() {
        let seq: Vec<usize> = [vec![0; 40], vec![1; 30], vec![2; 20], vec![3; 8], vec![4; 2]].concat();
        assert_eq!(select_typical_states(&seq, 5, 0.99).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(select_typical_states(&[0, 1, 0, 1], 2, 0.99).unwrap(), vec![0]);
        assert_eq!(select_typical_states(&[0, 0], 1, 0.99).unwrap(), vec![0]);
    }

    #[test]
    fn transition_matrix_helpers() {
        let t = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
        assert_eq!(t.prob(0, 1).unwrap(), 0.1);
        assert_eq!(t.prob(1, 0).unwrap(), 0.3);
        assert!(TransitionMatrix::from_rows(&[vec![0.9, 0.2], vec![0.3, 0.7]]).is_err());
        let s = TransitionMatrix::from_sequence(&[0, 0, 1, 1, 0], 3, 0.5).unwrap();
        s.validate().unwrap();
        assert!(s.prob(2, 2).unwrap() > 0.0);
    }

    #[test]
    fn file_round_trip() {
        let c = corpus_of((0..10).map(|i| vec![(i % 2) as u32; 5]).collect());
        let m = fit_hdphmm(&c, quick(3)).unwrap();
        let back = StateModel::from_json(&m.to_json(None).unwrap()).unwrap();
        assert_eq!(back.transition, m.transition);
        assert_eq!(back.state_seq, m.state_seq);
        assert!(back.sample.is_none());
    }
}
