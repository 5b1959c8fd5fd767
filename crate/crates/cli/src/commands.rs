//! Stage implementations shared by the subcommands and the pipeline runner.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hdpgp::anomaly::{AnomalyEvent, AnomalyThresholds, EVENTS_SCHEMA};
use hdpgp::codebook::{quantize_flow, read_flo, segment_clips, Corpus, CorpusReader, GridSpec};
use hdpgp::dp::{HdpHyperParams, TypicalSelection};
use hdpgp::fusion::FusionConfig;
use hdpgp::gp::{CgOptions, ConflictRegressors, GpMulticlass, GpTraining, KernelKind, KernelSpec, RegressorTraining};
use hdpgp::hdp::{fit_hdp_with_selection, ActivityModel};
use hdpgp::hdphmm::{fit_hdphmm_with_selection, StateModel};
use hdpgp::io::{load_records, RecordHeader, RecordWriter};
use hdpgp::online::{FusedClassifier, LabelRecord, StreamProcessor, LABELS_SCHEMA};
use hdpgp::representation::{
    build_training_set, check_features, load_features, save_features, FeatureMap, FeatureRecord,
};
use hdpgp::synth::{
    default_injection_plan, evaluate as score, generate, inject_anomalies, match_topics, GroundTruth, SceneSpec,
};

/// Kernel and optimizer settings for a family of GP models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub signal_sigma: f64,
    pub length_scale: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    pub optimize: bool,
    pub max_iter: usize,
    /// Train on at most this many evenly spaced clips.
    #[serde(default)]
    pub max_train: Option<usize>,
}

impl KernelConfig {
    pub fn classifier_default() -> Self {
        KernelConfig {
            kind: KernelKind::Ard,
            signal_sigma: 2.0,
            length_scale: 0.3,
            noise_sigma: 0.0,
            optimize: true,
            max_iter: 30,
            max_train: Some(250),
        }
    }

    pub fn regressor_default() -> Self {
        KernelConfig {
            kind: KernelKind::Ard,
            signal_sigma: 0.1,
            length_scale: 0.3,
            noise_sigma: 0.02,
            optimize: true,
            max_iter: 50,
            max_train: None,
        }
    }

    /// Initial kernel for inputs of dimension `dim`.
    pub fn kernel(&self, dim: usize) -> KernelSpec {
        let k = match self.kind {
            KernelKind::Rbf => KernelSpec::rbf(self.signal_sigma, self.length_scale),
            KernelKind::Ard => KernelSpec::ard(self.signal_sigma, vec![self.length_scale; dim]),
        };
        k.with_noise(self.noise_sigma)
    }

    fn cg(&self) -> CgOptions {
        CgOptions { max_iter: self.max_iter, ..CgOptions::default() }
    }
}

fn subsample<T: Clone>(items: &[T], max: Option<usize>) -> Vec<T> {
    match max {
        Some(m) if m > 0 && items.len() > m => (0..m).map(|i| items[i * items.len() / m].clone()).collect(),
        _ => items.to_vec(),
    }
}

pub fn quantize(flow_dir: &Path, cell: u32, threshold: f64, clip_frames: u32, out: &Path, hash: &str) -> Result<usize> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(flow_dir)
        .with_context(|| format!("reading {}", flow_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "flo"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(hdpgp::Error::InvalidInput(format!("no .flo files in {}", flow_dir.display())));
    }
    let mut grid: Option<GridSpec> = None;
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let field = read_flo(p)?;
        let g = match grid {
            Some(g) => g,
            None => {
                let g = GridSpec::new(field.width(), field.height())?.with_cell_size(cell)?.with_threshold(threshold)?;
                grid = Some(g);
                g
            }
        };
        frames.push(quantize_flow(&field, &g).with_context(|| p.display().to_string())?);
    }
    let mut corpus = segment_clips(&frames, clip_frames, grid.expect("at least one frame"))?;
    corpus.config_hash = Some(hash.to_string());
    corpus.save(out)?;
    Ok(corpus.len())
}

/// Injection request: `per_kind` anomalies of each kind among clips `from..`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectConfig {
    pub per_kind: usize,
    pub from_clip: usize,
    #[serde(default)]
    pub seed: u64,
}

pub fn simulate(spec: &SceneSpec, inject: Option<InjectConfig>, out: &Path, truth_out: &Path, hash: &str) -> Result<usize> {
    let (mut corpus, mut truth) = generate(spec)?;
    if let Some(inj) = inject.filter(|i| i.per_kind > 0) {
        let plan = default_injection_plan(spec, &truth, inj.from_clip..corpus.len(), inj.per_kind, inj.seed)?;
        (corpus, truth) = inject_anomalies(spec, &corpus, &truth, &plan, inj.seed.wrapping_add(1))?;
    }
    corpus.config_hash = Some(hash.to_string());
    truth.config_hash = Some(hash.to_string());
    corpus.save(out)?;
    truth.save(truth_out)?;
    Ok(corpus.len())
}

/// The first `n` clips, or all of them.
pub fn load_corpus(path: &Path, first: Option<usize>) -> Result<Corpus> {
    let c = Corpus::load(path)?;
    Ok(match first {
        Some(n) if n < c.len() => c.slice(0..n),
        _ => c,
    })
}

/// Clips from position `from` onwards.
pub fn load_corpus_tail(path: &Path, from: usize) -> Result<Corpus> {
    let c = Corpus::load(path)?;
    let from = from.min(c.len());
    Ok(c.slice(from..c.len()))
}

pub fn learn_activities(
    corpus: &Corpus,
    hyper: HdpHyperParams,
    selection: TypicalSelection,
    out: &Path,
    hash: &str,
) -> Result<ActivityModel> {
    let model = fit_hdp_with_selection(corpus, hyper, selection)?;
    log::info!("{} activities, {} typical", model.n_activities(), model.typical.len());
    model.save(out, Some(hash))?;
    Ok(model)
}

pub fn learn_states(
    corpus: &Corpus,
    hyper: HdpHyperParams,
    selection: TypicalSelection,
    out: &Path,
    hash: &str,
) -> Result<StateModel> {
    let model = fit_hdphmm_with_selection(corpus, hyper, selection)?;
    log::info!("{} states, {} typical", model.n_states(), model.typical.len());
    model.save(out, Some(hash))?;
    Ok(model)
}

/// Write clip features. With a state model the clips are its training clips
/// and carry labels; otherwise every label is null.
pub fn featurize(
    corpus: &Corpus,
    activities: &ActivityModel,
    states: Option<&StateModel>,
    word_cutoff: f64,
    out: &Path,
    hash: &str,
) -> Result<usize> {
    let records = match states {
        Some(s) => build_training_set(corpus, activities, s, word_cutoff)?.records(),
        None => {
            if corpus.codebook_size() != activities.codebook_size {
                bail!(hdpgp::Error::InvalidInput("corpus and activity model use different codebooks".into()));
            }
            let map = FeatureMap::from_model(activities, word_cutoff)?;
            corpus.clips.iter().map(|c| FeatureRecord::new(&map.feature(c), None)).collect()
        }
    };
    save_features(out, &records, Some(hash))?;
    Ok(records.len())
}

fn labelled(records: &[FeatureRecord]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    check_features(records)?;
    let (x, y): (Vec<_>, Vec<_>) = records.iter().filter_map(|r| r.label.map(|l| (r.c.clone(), l))).unzip();
    if x.is_empty() {
        bail!(hdpgp::Error::InvalidInput("feature file has no labelled clips".into()));
    }
    Ok((x, y))
}

pub fn train_gp(records: &[FeatureRecord], cfg: &KernelConfig, out: &Path, hash: &str) -> Result<GpMulticlass> {
    let (x, y) = labelled(records)?;
    let (x, y) = (subsample(&x, cfg.max_train), subsample(&y, cfg.max_train));
    let training = GpTraining { init: cfg.kernel(x[0].len()), optimize: cfg.optimize, cg: cfg.cg() };
    let gp = GpMulticlass::fit(&x, &y, &training)?;
    gp.save(out, Some(hash))?;
    Ok(gp)
}

pub fn train_regressors(records: &[FeatureRecord], cfg: &KernelConfig, out: &Path, hash: &str) -> Result<ConflictRegressors> {
    let (x, _) = labelled(records)?;
    let x = subsample(&x, cfg.max_train);
    if x[0].len() < 2 {
        bail!(hdpgp::Error::InvalidInput("conflict regressors need at least two activities".into()));
    }
    let training = RegressorTraining { init: cfg.kernel(x[0].len() - 1), optimize: cfg.optimize, cg: cfg.cg() };
    let reg = ConflictRegressors::fit(&x, &training)?;
    reg.save(out, Some(hash))?;
    Ok(reg)
}

fn labels_header(gp: &GpMulticlass, hash: &str) -> RecordHeader {
    RecordHeader {
        schema: LABELS_SCHEMA.into(),
        config_hash: Some(hash.to_string()),
        meta: Some(serde_json::json!({ "classes": gp.classes })),
    }
}

fn events_header(hash: &str) -> RecordHeader {
    RecordHeader { schema: EVENTS_SCHEMA.into(), config_hash: Some(hash.to_string()), meta: None }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn report_rate(what: &str, n: usize, start: Instant) {
    let secs = start.elapsed().as_secs_f64();
    log::info!("{what}: {n} clips in {secs:.3} s ({:.0} clips/s)", n as f64 / secs.max(1e-9));
}

pub fn classify(
    records: &[FeatureRecord],
    gp: GpMulticlass,
    states: &StateModel,
    fusion: FusionConfig,
    out: &Path,
    hash: &str,
) -> Result<usize> {
    check_features(records)?;
    let header = labels_header(&gp, hash);
    let mut classifier = FusedClassifier::new(gp, states.transition.clone(), fusion)?;
    let start = Instant::now();
    let mut w = RecordWriter::new(create(out)?, &header)?;
    for r in records {
        w.write(&classifier.classify(r.clip_id, &r.c)?)?;
    }
    w.finish()?;
    report_rate("classify", records.len(), start);
    Ok(records.len())
}

/// Trained models for detection.
pub struct Models {
    pub activities: ActivityModel,
    pub word_cutoff: f64,
    pub gp: GpMulticlass,
    pub regressors: ConflictRegressors,
    pub states: StateModel,
    pub fusion: FusionConfig,
    pub thresholds: AnomalyThresholds,
}

impl Models {
    pub fn processor(self, grid: GridSpec) -> Result<StreamProcessor> {
        if grid.codebook_size() != self.activities.codebook_size {
            bail!(hdpgp::Error::InvalidInput("corpus and activity model use different codebooks".into()));
        }
        let map = FeatureMap::from_model(&self.activities, self.word_cutoff)?;
        let classifier = FusedClassifier::new(self.gp, self.states.transition, self.fusion)?;
        Ok(StreamProcessor::new(grid, map, classifier, Some(self.regressors), self.thresholds)?)
    }
}

/// Detect anomalies over a whole corpus. When `features` is given its
/// vectors must match the ones recomputed from the corpus.
pub fn detect(
    corpus: &Corpus,
    models: Models,
    features: Option<&[FeatureRecord]>,
    out: &Path,
    hash: &str,
) -> Result<usize> {
    let mut proc = models.processor(corpus.grid)?;
    if let Some(records) = features {
        check_features(records)?;
        if records.len() != corpus.len() {
            bail!(hdpgp::Error::InvalidInput(format!(
                "{} feature records for {} clips",
                records.len(),
                corpus.len()
            )));
        }
        for (r, clip) in records.iter().zip(&corpus.clips) {
            if r.clip_id != clip.clip_id || r.c != proc.features.feature(clip).c {
                bail!(hdpgp::Error::InvalidInput(format!("feature record for clip {} does not match the corpus", clip.clip_id)));
            }
        }
    }
    let start = Instant::now();
    let outcomes = proc.run_batch(&corpus.clips)?;
    report_rate("classify+detect", corpus.len(), start);
    let mut w = RecordWriter::new(create(out)?, &events_header(hash))?;
    let mut n = 0;
    for e in outcomes.iter().flat_map(|o| &o.events) {
        w.write(e)?;
        n += 1;
    }
    w.finish()?;
    Ok(n)
}

/// Classify and detect clip by clip while reading the corpus, skipping the
/// first `skip` clips. Writes the same files as `classify` plus `detect`.
pub fn stream(
    corpus_path: &Path,
    skip: usize,
    models: Models,
    labels_out: &Path,
    events_out: &Path,
    hash_labels: &str,
    hash_events: &str,
) -> Result<usize> {
    let f = File::open(corpus_path).with_context(|| format!("opening {}", corpus_path.display()))?;
    let mut reader = CorpusReader::new(BufReader::new(f), &corpus_path.display().to_string())?;
    let mut proc = models.processor(reader.grid)?;
    for _ in 0..skip {
        if reader.next_clip()?.is_none() {
            break;
        }
    }
    let mut labels = RecordWriter::new(create(labels_out)?, &labels_header(&proc.classifier.gp, hash_labels))?;
    let mut events = RecordWriter::new(create(events_out)?, &events_header(hash_events))?;
    let start = Instant::now();
    let n = proc.run_stream(&mut reader, |o| {
        labels.write(&o.label)?;
        o.events.iter().try_for_each(|e| events.write(e))
    })?;
    labels.finish()?;
    events.finish()?;
    report_rate("stream", n, start);
    Ok(n)
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    Ok(load_records(path, LABELS_SCHEMA)?.1)
}

pub fn load_events(path: &Path) -> Result<Vec<AnomalyEvent>> {
    Ok(load_records(path, EVENTS_SCHEMA)?.1)
}

/// Score labels and events against ground truth indexed by clip id.
pub fn evaluate(
    labels: &[LabelRecord],
    truth: &GroundTruth,
    events: &[AnomalyEvent],
    topics: Option<(&ActivityModel, &SceneSpec)>,
    out: &Path,
    hash: &str,
) -> Result<hdpgp::synth::EvalReport> {
    let ids: Vec<u64> = labels.iter().map(|l| l.clip_id).collect();
    let mut sub = truth.clone();
    sub.state_seq.clear();
    sub.mixtures.clear();
    for &id in &ids {
        let i = usize::try_from(id).ok().filter(|&i| i < truth.state_seq.len()).ok_or_else(|| {
            hdpgp::Error::InvalidInput(format!("clip {id} has no ground truth"))
        })?;
        sub.state_seq.push(truth.state_seq[i]);
        sub.mixtures.push(truth.mixtures[i].clone());
    }
    let present: std::collections::HashSet<u64> = ids.iter().copied().collect();
    sub.anomalies.retain(|a| present.contains(&a.clip_id));
    let pred: Vec<usize> = labels.iter().map(|l| l.label).collect();
    let mut report = score(&pred, &ids, &sub, events)?;
    if let Some((model, spec)) = topics {
        report.topic_matching = match_topics(model, &spec.planted_distributions());
    }
    report.config_hash = Some(hash.to_string());
    hdpgp::io::write_json(out, &report)?;
    Ok(report)
}

/// Load a feature file.
pub fn features(path: &Path) -> Result<Vec<FeatureRecord>> {
    Ok(load_features(path)?)
}
