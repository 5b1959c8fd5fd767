//! Synthetic traffic scenes with planted activities, a Markov chain of
//! states and optional injected anomalies.

mod eval;

pub use eval::{
    align_labels, evaluate, false_positive_rate, match_distributions, match_topics, per_class_accuracy, EvalReport,
    LabelAlignment, TopicMatch,
};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::anomaly::AnomalyKind;
use crate::codebook::{ClipDocument, Corpus, GridSpec};
use crate::dp::sample_dirichlet;
use crate::error::{Error, Result};

pub const TRUTH_SCHEMA: &str = "truth/1";
const STOCHASTIC_TOL: f64 = 1e-6;

/// A planted activity: a word distribution over a sparse support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedActivity {
    pub words: Vec<u32>,
    pub weights: Vec<f64>,
}

impl PlantedActivity {
    /// Words along a path of cells moving in one direction, weighted by a
    /// smooth bump so the distribution is not flat.
    pub fn lane(grid: &GridSpec, cells: &[(u32, u32)], directions: &[u32]) -> Result<Self> {
        let mut words = Vec::new();
        let mut weights = Vec::new();
        let n = cells.len().max(1) as f64;
        for (i, &(x, y)) in cells.iter().enumerate() {
            let w = 1.0 + 0.6 * (std::f64::consts::PI * (i as f64 + 0.5) / n).sin();
            for &d in directions {
                words.push(grid.encode(x, y, d)?.0);
                weights.push(w);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(PlantedActivity { words, weights })
    }

    /// Dense distribution over a codebook of size `vocab`.
    pub fn dense(&self, vocab: usize) -> Vec<f64> {
        let mut v = vec![0.0; vocab];
        for (&w, &p) in self.words.iter().zip(&self.weights) {
            v[w as usize] += p;
        }
        v
    }
}

/// Description of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub grid: GridSpec,
    #[serde(default = "default_clip_length")]
    pub clip_length: u32,
    pub activities: Vec<PlantedActivity>,
    /// Activity mixture of each state.
    pub states: Vec<Vec<f64>>,
    /// Row-stochastic: `transition[from][to]`.
    pub transition: Vec<Vec<f64>>,
    pub clips: usize,
    pub tokens_per_clip: usize,
    pub noise_rate: f64,
    /// Per-clip mixtures are drawn from a Dirichlet with this concentration
    /// around the state mixture; `None` uses the state mixture verbatim.
    #[serde(default)]
    pub mixture_concentration: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_clip_length() -> u32 {
    75
}

impl SceneSpec {
    /// Desk-scale junction: six lanes on a 45x36 cell grid and four states
    /// cycling with self-loop probability 0.9.
    pub fn default_desk() -> Self {
        let grid = GridSpec::new(360, 288).expect("valid grid");
        let row = |y0: u32, xs: std::ops::Range<u32>| -> Vec<(u32, u32)> {
            xs.flat_map(|x| [(x, y0), (x, y0 + 1)]).collect()
        };
        let col = |x0: u32, ys: std::ops::Range<u32>| -> Vec<(u32, u32)> {
            ys.flat_map(|y| [(x0, y), (x0 + 1, y)]).collect()
        };
        let diagonal: Vec<(u32, u32)> = (0..20).flat_map(|i| [(i, 33 - i), (i + 1, 33 - i)]).collect();
        let crossing: Vec<(u32, u32)> = (15..31).map(|x| (x, 25)).collect();
        let lanes = [
            (row(8, 0..45), vec![0]),
            (row(12, 0..45), vec![4]),
            (col(10, 0..36), vec![6]),
            (col(30, 0..36), vec![2]),
            (diagonal, vec![1]),
            (crossing, vec![0, 4]),
        ];
        let activities = lanes
            .iter()
            .map(|(cells, dirs)| PlantedActivity::lane(&grid, cells, dirs).expect("cells inside grid"))
            .collect();
        let states = vec![
            vec![0.5, 0.3, 0.2, 0.0, 0.0, 0.0],
            vec![0.2, 0.0, 0.0, 0.5, 0.3, 0.0],
            vec![0.0, 0.3, 0.0, 0.2, 0.0, 0.5],
            vec![0.0, 0.0, 0.5, 0.0, 0.2, 0.3],
        ];
        SceneSpec {
            grid,
            clip_length: 75,
            activities,
            states,
            transition: cycle_transition(4, 0.9),
            clips: 1000,
            tokens_per_clip: 300,
            noise_rate: 0.02,
            mixture_concentration: Some(20.0),
            seed: 0,
        }
    }

    pub fn n_activities(&self) -> usize {
        self.activities.len()
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.grid.codebook_size()
    }

    /// Dense word distribution of every planted activity.
    pub fn planted_distributions(&self) -> Vec<Vec<f64>> {
        let v = self.codebook_size();
        self.activities.iter().map(|a| a.dense(v)).collect()
    }

    /// True when `word` lies in some planted activity's support.
    pub fn in_support(&self, word: u32) -> bool {
        self.activities.iter().any(|a| a.words.contains(&word))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.clip_length == 0 || self.clips == 0 || self.tokens_per_clip == 0 {
            return Err(Error::invalid("clip_length, clips and tokens_per_clip must be positive"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::invalid(format!("noise_rate {} outside [0, 1)", self.noise_rate)));
        }
        if let Some(c) = self.mixture_concentration {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid("mixture_concentration must be positive"));
            }
        }
        let k = self.activities.len();
        if k == 0 || self.states.is_empty() {
            return Err(Error::invalid("scene needs at least one activity and one state"));
        }
        let v = self.codebook_size() as u32;
        for (i, a) in self.activities.iter().enumerate() {
            if a.words.is_empty() || a.words.len() != a.weights.len() {
                return Err(Error::invalid(format!("activity {i}: words and weights must be non-empty and aligned")));
            }
            if let Some(w) = a.words.iter().find(|&&w| w >= v) {
                return Err(Error::invalid(format!("activity {i}: word {w} outside codebook of size {v}")));
            }
            check_stochastic(&a.weights, &format!("activity {i} weights"))?;
        }
        for (s, m) in self.states.iter().enumerate() {
            if m.len() != k {
                return Err(Error::invalid(format!("state {s}: mixture has {} entries, expected {k}", m.len())));
            }
            check_stochastic(m, &format!("state {s} mixture"))?;
        }
        let n = self.states.len();
        if self.transition.len() != n {
            return Err(Error::invalid("transition must have one row per state"));
        }
        for (s, row) in self.transition.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(format!("transition row {s} has {} entries, expected {n}", row.len())));
            }
            check_stochastic(row, &format!("transition row {s}"))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SceneSpec = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&crate::io::read_text(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

/// `n`-state cycle where each state stays with probability `self_loop` and
/// otherwise moves to the next state.
pub fn cycle_transition(n: usize, self_loop: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut row = vec![0.0; n];
            if n == 1 {
                row[0] = 1.0;
            } else {
                row[i] = self_loop;
                row[(i + 1) % n] = 1.0 - self_loop;
            }
            row
        })
        .collect()
}

fn check_stochastic(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid(format!("{what}: entries must be finite and non-negative")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::invalid(format!("{what}: sums to {s}, expected 1")));
    }
    Ok(())
}

/// A logged injected anomaly. `first_clip..=last_clip` is the span the
/// event covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedAnomaly {
    pub clip_id: u64,
    pub kind: AnomalyKind,
    pub first_clip: u64,
    pub last_clip: u64,
    #[serde(default)]
    pub cells: Vec<(u32, u32)>,
    /// Activity id for conflicts, injected state for illegal transitions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<usize>,
}

impl InjectedAnomaly {
    pub fn covers(&self, clip_id: u64) -> bool {
        (self.first_clip..=self.last_clip).contains(&clip_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub schema: String,
    pub n_states: usize,
    pub state_seq: Vec<usize>,
    /// Activity mixture used for each clip.
    pub mixtures: Vec<Vec<f64>>,
    #[serde(default)]
    pub anomalies: Vec<InjectedAnomaly>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        if self.schema != TRUTH_SCHEMA {
            return Err(Error::Schema { expected: TRUTH_SCHEMA.into(), found: self.schema.clone() });
        }
        if self.mixtures.len() != self.state_seq.len() {
            return Err(Error::invalid("truth: mixtures and state sequence differ in length"));
        }
        if self.state_seq.iter().any(|&s| s >= self.n_states) {
            return Err(Error::invalid("truth: state label out of range"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t: GroundTruth = serde_json::from_str(&crate::io::read_text(path.as_ref())?)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    /// Truth restricted to clips `range`, keeping anomalies that start inside it.
    pub fn slice(&self, range: std::ops::Range<usize>) -> GroundTruth {
        let (a, b) = (range.start as u64, range.end as u64);
        GroundTruth {
            schema: self.schema.clone(),
            n_states: self.n_states,
            state_seq: self.state_seq[range.clone()].to_vec(),
            mixtures: self.mixtures[range].to_vec(),
            anomalies: self.anomalies.iter().filter(|x| (a..b).contains(&x.clip_id)).cloned().collect(),
            config_hash: self.config_hash.clone(),
        }
    }
}

struct TokenSampler {
    activity_words: Vec<WeightedIndex<f64>>,
}

impl TokenSampler {
    fn new(spec: &SceneSpec) -> Result<Self> {
        let activity_words = spec
            .activities
            .iter()
            .map(|a| WeightedIndex::new(&a.weights).map_err(|e| Error::invalid(format!("activity weights: {e}"))))
            .collect::<Result<_>>()?;
        Ok(TokenSampler { activity_words })
    }

    fn tokens(&self, spec: &SceneSpec, mixture: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
        let pick = WeightedIndex::new(mixture).map_err(|e| Error::invalid(format!("mixture: {e}")))?;
        let v = spec.codebook_size() as u32;
        Ok((0..n)
            .map(|_| {
                if spec.noise_rate > 0.0 && rng.random::<f64>() < spec.noise_rate {
                    rng.random_range(0..v)
                } else {
                    let k = pick.sample(rng);
                    spec.activities[k].words[self.activity_words[k].sample(rng)]
                }
            })
            .collect())
    }
}

fn clip_mixture(spec: &SceneSpec, state: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = &spec.states[state];
    let Some(c) = spec.mixture_concentration else {
        return base.clone();
    };
    let support: Vec<usize> = (0..base.len()).filter(|&k| base[k] > 0.0).collect();
    let draw = sample_dirichlet(rng, &support.iter().map(|&k| c * base[k]).collect::<Vec<_>>());
    let mut m = vec![0.0; base.len()];
    for (&k, p) in support.iter().zip(draw) {
        m[k] = p;
    }
    m
}

/// Sample a corpus and its ground truth from the scene.
pub fn generate(spec: &SceneSpec) -> Result<(Corpus, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sampler = TokenSampler::new(spec)?;
    let rows: Vec<WeightedIndex<f64>> = spec
        .transition
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::invalid(format!("transition row: {e}"))))
        .collect::<Result<_>>()?;
    let mut corpus = Corpus::new(spec.grid, spec.clip_length)?;
    let mut state_seq = Vec::with_capacity(spec.clips);
    let mut mixtures = Vec::with_capacity(spec.clips);
    let mut state = rng.random_range(0..spec.n_states());
    for t in 0..spec.clips {
        if t > 0 {
            state = rows[state].sample(&mut rng);
        }
        let mix = clip_mixture(spec, state, &mut rng);
        let words = sampler.tokens(spec, &mix, spec.tokens_per_clip, &mut rng)?;
        let start = t as u64 * spec.clip_length as u64;
        corpus.push(ClipDocument { clip_id: t as u64, frame_start: start, frame_end: start + spec.clip_length as u64, words })?;
        state_seq.push(state);
        mixtures.push(mix);
    }
    let truth = GroundTruth {
        schema: TRUTH_SCHEMA.into(),
        n_states: spec.n_states(),
        state_seq,
        mixtures,
        anomalies: Vec::new(),
        config_hash: None,
    };
    Ok((corpus, truth))
}

/// One planned injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Injection {
    /// Overwrite `cells.len() * frames` tokens with words moving in
    /// `direction` through `cells`; these words must lie outside every
    /// planted support.
    RareMotion { clip_id: u64, cells: Vec<(u32, u32)>, direction: u32, frames: usize },
    /// Add `tokens` tokens of an activity absent from the clip's state.
    ConflictingActivity { clip_id: u64, activity: usize, tokens: usize },
    /// Replace the clip's state with `target` (or the least likely successor
    /// of the previous state) and regenerate its tokens.
    IllegalTransition {
        clip_id: u64,
        #[serde(default)]
        target: Option<usize>,
    },
}

impl Injection {
    pub fn clip_id(&self) -> u64 {
        match self {
            Injection::RareMotion { clip_id, .. }
            | Injection::ConflictingActivity { clip_id, .. }
            | Injection::IllegalTransition { clip_id, .. } => *clip_id,
        }
    }
}

/// Apply `plan` to a generated corpus; `seed` drives the regenerated tokens.
pub fn inject_anomalies(
    spec: &SceneSpec,
    corpus: &Corpus,
    truth: &GroundTruth,
    plan: &[Injection],
    seed: u64,
) -> Result<(Corpus, GroundTruth)> {
    spec.validate()?;
    let mut corpus = corpus.clone();
    let mut truth = truth.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = TokenSampler::new(spec)?;
    let index_of = |corpus: &Corpus, id: u64| -> Result<usize> {
        corpus
            .clips
            .binary_search_by_key(&id, |c| c.clip_id)
            .map_err(|_| Error::invalid(format!("clip {id} not in corpus")))
    };
    for inj in plan {
        let id = inj.clip_id();
        let t = index_of(&corpus, id)?;
        let logged = match inj {
            Injection::RareMotion { cells, direction, frames, .. } => {
                if cells.is_empty() || *frames == 0 {
                    return Err(Error::invalid("rare motion needs cells and frames"));
                }
                let mut alien = Vec::with_capacity(cells.len());
                for &(x, y) in cells {
                    let w = spec.grid.encode(x, y, *direction)?.0;
                    if spec.in_support(w) {
                        return Err(Error::invalid(format!("rare-motion word {w} lies in a planted activity")));
                    }
                    alien.push(w);
                }
                let words = &mut corpus.clips[t].words;
                let n = (alien.len() * frames).min(words.len());
                for (i, slot) in words.iter_mut().take(n).enumerate() {
                    *slot = alien[i % alien.len()];
                }
                InjectedAnomaly {
                    clip_id: id,
                    kind: AnomalyKind::RareMotion,
                    first_clip: id,
                    last_clip: id,
                    cells: cells.clone(),
                    detail: None,
                }
            }
            Injection::ConflictingActivity { activity, tokens, .. } => {
                let k = *activity;
                if k >= spec.n_activities() {
                    return Err(Error::invalid(format!("activity {k} out of range")));
                }
                if truth.mixtures[t][k] > 0.0 {
                    return Err(Error::invalid(format!("activity {k} already active in clip {id}")));
                }
                let mut point = vec![0.0; spec.n_activities()];
                point[k] = 1.0;
                let clean = SceneSpec { noise_rate: 0.0, ..spec.clone() };
                let extra = sampler.tokens(&clean, &point, *tokens, &mut rng)?;
                let mut cells: Vec<(u32, u32)> = extra
                    .iter()
                    .map(|&w| spec.grid.decode(crate::codebook::VisualWord(w)).map(|c| (c.cell_x, c.cell_y)))
                    .collect::<Result<_>>()?;
                cells.sort_unstable();
                cells.dedup();
                corpus.clips[t].words.extend(extra);
                InjectedAnomaly {
                    clip_id: id,
                    kind: AnomalyKind::ConflictingActivity,
                    first_clip: id,
                    last_clip: id,
                    cells,
                    detail: Some(k),
                }
            }
            Injection::IllegalTransition { target, .. } => {
                if t == 0 {
                    return Err(Error::invalid("an illegal transition needs a preceding clip"));
                }
                let prev = truth.state_seq[t - 1];
                let cur = truth.state_seq[t];
                let target = match target {
                    Some(s) if *s >= spec.n_states() => return Err(Error::invalid(format!("state {s} out of range"))),
                    Some(s) if *s == prev => return Err(Error::invalid("target equals the previous state")),
                    Some(s) => *s,
                    None => (0..spec.n_states())
                        .filter(|&s| s != prev && s != cur)
                        .min_by(|&a, &b| spec.transition[prev][a].total_cmp(&spec.transition[prev][b]))
                        .ok_or_else(|| Error::invalid("scene has too few states for an illegal transition"))?,
                };
                let mix = clip_mixture(spec, target, &mut rng);
                corpus.clips[t].words = sampler.tokens(spec, &mix, spec.tokens_per_clip, &mut rng)?;
                truth.state_seq[t] = target;
                truth.mixtures[t] = mix;
                let last = if t + 1 < corpus.len() { corpus.clips[t + 1].clip_id } else { id };
                InjectedAnomaly {
                    clip_id: id,
                    kind: AnomalyKind::IllegalTransition,
                    first_clip: id,
                    last_clip: last,
                    cells: Vec::new(),
                    detail: Some(target),
                }
            }
        };
        truth.anomalies.push(logged);
    }
    Ok((corpus, truth))
}

/// Rare-motion cells for the default scene: a reverse-direction lane
/// across the grid at row `y`.
pub fn reverse_lane_cells(grid: &GridSpec, y: u32, len: u32) -> Vec<(u32, u32)> {
    let len = len.min(grid.n_cols());
    (0..len).map(|x| (x, y.min(grid.n_rows() - 1))).collect()
}

/// A plan of `per_kind` injections of every kind spread over clips
/// `range`, chosen so no two injections touch neighbouring clips.
pub fn default_injection_plan(
    spec: &SceneSpec,
    truth: &GroundTruth,
    range: std::ops::Range<usize>,
    per_kind: usize,
    seed: u64,
) -> Result<Vec<Injection>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = vec![false; truth.state_seq.len()];
    let mut plan = Vec::new();
    let lo = range.start.max(1);
    let hi = range.end.min(truth.state_seq.len().saturating_sub(1));
    if hi <= lo || (hi - lo) < 6 * 3 * per_kind {
        return Err(Error::invalid("clip range too small for the injection plan"));
    }
    let mut pick = |rng: &mut ChaCha8Rng, ok: &dyn Fn(usize) -> bool| -> Result<usize> {
        for _ in 0..10_000 {
            let t = rng.random_range(lo..hi);
            if (t.saturating_sub(2)..=(t + 2).min(taken.len() - 1)).all(|u| !taken[u]) && ok(t) {
                taken[t] = true;
                return Ok(t);
            }
        }
        Err(Error::invalid("could not place injection"))
    };
    let rows = spec.grid.n_rows();
    for i in 0..per_kind {
        let t = pick(&mut rng, &|_| true)?;
        let y = [3, 18, 29, 34][i % 4].min(rows - 1);
        plan.push(Injection::RareMotion {
            clip_id: t as u64,
            cells: reverse_lane_cells(&spec.grid, y, 40),
            direction: 5,
            frames: 2,
        });
    }
    for _ in 0..per_kind {
        let t = pick(&mut rng, &|t| truth.mixtures[t].iter().any(|&p| p == 0.0))?;
        let absent: Vec<usize> = (0..spec.n_activities()).filter(|&k| truth.mixtures[t][k] == 0.0).collect();
        let activity = absent[rng.random_range(0..absent.len())];
        plan.push(Injection::ConflictingActivity { clip_id: t as u64, activity, tokens: spec.tokens_per_clip / 5 });
    }
    for _ in 0..per_kind {
        let t = pick(&mut rng, &|t| {
            let prev = truth.state_seq[t - 1];
            (0..spec.n_states()).any(|s| s != prev && s != truth.state_seq[t] && spec.transition[prev][s] == 0.0)
        })?;
        plan.push(Injection::IllegalTransition { clip_id: t as u64, target: None });
    }
    plan.sort_by_key(|i| i.clip_id());
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SceneSpec {
        let grid = GridSpec::new(64, 32).unwrap();
        SceneSpec {
            grid,
            clip_length: 75,
            activities: vec![
                PlantedActivity { words: vec![3], weights: vec![1.0] },
                PlantedActivity { words: vec![10, 11], weights: vec![0.5, 0.5] },
            ],
            states: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            transition: vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            clips: 20,
            tokens_per_clip: 10,
            noise_rate: 0.0,
            mixture_concentration: None,
            seed: 5,
        }
    }

    #[test]
    fn default_scene_is_valid() {
        let s = SceneSpec::default_desk();
        s.validate().unwrap();
        assert_eq!((s.grid.n_cols(), s.grid.n_rows()), (45, 36));
        assert_eq!(s.n_activities(), 6);
        assert_eq!(s.n_states(), 4);
        let supports: Vec<&Vec<u32>> = s.activities.iter().map(|a| &a.words).collect();
        for i in 0..supports.len() {
            for j in i + 1..supports.len() {
                assert!(supports[i].iter().all(|w| !supports[j].contains(w)), "lanes {i} and {j} overlap");
            }
        }
    }

    #[test]
    fn point_mass_without_noise_repeats_one_word() {
        let mut s = tiny();
        s.states = vec![vec![1.0, 0.0]];
        s.transition = vec![vec![1.0]];
        let (c, t) = generate(&s).unwrap();
        assert!(c.clips.iter().all(|d| d.words.iter().all(|&w| w == 3)));
        assert!(t.state_seq.iter().all(|&x| x == 0));
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let a = generate(&tiny()).unwrap();
        assert_eq!(a, generate(&tiny()).unwrap());
        let b = generate(&SceneSpec { seed: 6, ..tiny() }).unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn empirical_transitions_match_spec() {
        let s = SceneSpec { clips: 10_000, tokens_per_clip: 1, ..tiny() };
        let (_, t) = generate(&s).unwrap();
        let mut counts = [[0.0f64; 2]; 2];
        for w in t.state_seq.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
        for (from, row) in counts.iter().enumerate() {
            let n: f64 = row.iter().sum();
            for to in 0..2 {
                assert!((row[to] / n - s.transition[from][to]).abs() < 0.02);
            }
        }
    }

    #[test]
    fn state_durations_are_geometric() {
        let s = SceneSpec { clips: 20_000, tokens_per_clip: 1, transition: cycle_transition(4, 0.9), ..tiny() };
        let s = SceneSpec { states: vec![vec![1.0, 0.0]; 4], ..s };
        let (_, t) = generate(&s).unwrap();
        let mut runs = Vec::new();
        let mut len = 1;
        for w in t.state_seq.windows(2) {
            if w[0] == w[1] {
                len += 1;
            } else {
                assert_eq!(w[1], (w[0] + 1) % 4);
                runs.push(len as f64);
                len = 1;
            }
        }
        // Geometric on {1, 2, ...} with stop probability 0.1: mean 10, P(1) = 0.1.
        let mean = runs.iter().sum::<f64>() / runs.len() as f64;
        let p1 = runs.iter().filter(|&&r| r == 1.0).count() as f64 / runs.len() as f64;
        assert!((mean - 10.0).abs() < 0.8, "mean run {mean}");
        assert!((p1 - 0.1).abs() < 0.03, "P(run = 1) = {p1}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = tiny();
        s.transition[0] = vec![0.5, 0.4];
        assert!(generate(&s).is_err());
        let mut s = tiny();
        s.activities[0].words[0] = 1 << 20;
        assert!(s.validate().is_err());
        assert!(SceneSpec { noise_rate: 1.0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn injection_behaviour() {
        let s = tiny();
        let (c, t) = generate(&s).unwrap();
        let (c2, t2) = inject_anomalies(&s, &c, &t, &[], 0).unwrap();
        assert_eq!((c2, t2), (c.clone(), t.clone()));
        assert!(inject_anomalies(&s, &c, &t, &[Injection::IllegalTransition { clip_id: 0, target: None }], 0).is_err());
        assert!(inject_anomalies(&s, &c, &t, &[Injection::IllegalTransition { clip_id: 99, target: None }], 0).is_err());

        let rare = Injection::RareMotion { clip_id: 4, cells: vec![(0, 0), (1, 0)], direction: 7, frames: 2 };
        let (c3, t3) = inject_anomalies(&s, &c, &t, &[rare], 0).unwrap();
        let alien: Vec<u32> = vec![s.grid.encode(0, 0, 7).unwrap().0, s.grid.encode(1, 0, 7).unwrap().0];
        assert_eq!(c3.clips[4].words.iter().filter(|w| alien.contains(w)).count(), 4);
        assert_eq!(t3.anomalies[0].kind, AnomalyKind::RareMotion);

        let t_state = t.state_seq[5];
        let absent = if t_state == 0 { 1 } else { 0 };
        let conf = Injection::ConflictingActivity { clip_id: 5, activity: absent, tokens: 6 };
        let (c4, _) = inject_anomalies(&s, &c, &t, &[conf], 0).unwrap();
        assert_eq!(c4.clips[5].words.len(), 16);
        let present = Injection::ConflictingActivity { clip_id: 5, activity: t_state, tokens: 6 };
        assert!(inject_anomalies(&s, &c, &t, &[present], 0).is_err());
    }

    #[test]
    fn default_plan_places_thirty_injections() {
        let spec = SceneSpec { clips: 600, tokens_per_clip: 20, ..SceneSpec::default_desk() };
        let (c, t) = generate(&spec).unwrap();
        let plan = default_injection_plan(&spec, &t, 100..600, 10, 1).unwrap();
        assert_eq!(plan.len(), 30);
        let (_, t2) = inject_anomalies(&spec, &c, &t, &plan, 2).unwrap();
        assert_eq!(t2.anomalies.len(), 30);
        for a in t2.anomalies.iter().filter(|a| a.kind == AnomalyKind::IllegalTransition) {
            let i = a.clip_id as usize;
            assert_eq!(spec.transition[t2.state_seq[i - 1]][t2.state_seq[i]], 0.0);
        }
    }

    #[test]
    fn truth_round_trip() {
        let (_, t) = generate(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.json");
        t.save(&p).unwrap();
        assert_eq!(GroundTruth::load(&p).unwrap(), t);
        let p = dir.path().join("scene.json");
        tiny().save(&p).unwrap();
        assert_eq!(SceneSpec::load(&p).unwrap(), tiny());
    }
}
