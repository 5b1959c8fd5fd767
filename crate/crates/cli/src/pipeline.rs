//! Config-driven pipeline with per-stage skipping.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use hdpgp::anomaly::AnomalyThresholds;
use hdpgp::dp::{HdpHyperParams, TypicalSelection};
use hdpgp::fusion::FusionConfig;
use hdpgp::gp::{ConflictRegressors, GpMulticlass};
use hdpgp::hdp::ActivityModel;
use hdpgp::hdphmm::StateModel;
use hdpgp::io::config_hash;
use hdpgp::representation::DEFAULT_WORD_CUTOFF;
use hdpgp::synth::{GroundTruth, SceneSpec};

use crate::commands::{self, InjectConfig, KernelConfig, Models};
use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Batch,
    Stream,
}

/// Where the clips come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `"default"` for the built-in scene or a scene file to simulate.
    #[serde(default)]
    pub scene: Option<String>,
    /// Overrides for the simulated scene.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub clips: Option<usize>,
    /// Existing corpus and optional ground truth, used when no scene is given.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    /// Clips before this position train the models; the rest are tested.
    pub train_clips: usize,
    #[serde(default)]
    pub inject_per_kind: usize,
    #[serde(default)]
    pub inject_seed: u64,
}

fn default_work_dir() -> PathBuf {
    PathBuf::from(".")
}

fn default_word_cutoff() -> f64 {
    DEFAULT_WORD_CUTOFF
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
    #[serde(default)]
    pub mode: Mode,
    pub data: DataConfig,
    #[serde(default)]
    pub hdp: HdpHyperParams,
    #[serde(default)]
    pub hmm: HdpHyperParams,
    #[serde(default)]
    pub activity_selection: TypicalSelection,
    #[serde(default)]
    pub state_selection: TypicalSelection,
    #[serde(default = "default_word_cutoff")]
    pub word_cutoff: f64,
    #[serde(default = "KernelConfig::classifier_default")]
    pub gp: KernelConfig,
    #[serde(default = "KernelConfig::regressor_default")]
    pub gpr: KernelConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub thresholds: AnomalyThresholds,
}

impl PipelineConfig {
    /// Parse config text, JSON when `json` is set and TOML otherwise. Paths
    /// are left as written.
    pub fn parse(text: &str, json: bool) -> std::result::Result<Self, String> {
        if json {
            serde_json::from_str(text).map_err(|e| e.to_string())
        } else {
            toml::from_str(text).map_err(|e| e.to_string())
        }
    }

    /// Parse a TOML or JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let json = path.extension().is_some_and(|e| e == "json");
        let mut cfg = Self::parse(&text, json).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.work_dir = base.join(&cfg.work_dir);
        cfg.data.corpus = cfg.data.corpus.map(|p| base.join(p));
        cfg.data.truth = cfg.data.truth.map(|p| base.join(p));
        cfg.data.scene = cfg.data.scene.map(|s| if s == "default" { s } else { base.join(s).display().to_string() });
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| anyhow!(UsageError(m));
        match (&self.data.scene, &self.data.corpus) {
            (Some(_), Some(_)) => return Err(usage("give either data.scene or data.corpus, not both".into())),
            (None, None) => return Err(usage("data.scene or data.corpus is required".into())),
            _ => {}
        }
        if self.data.train_clips == 0 {
            return Err(usage("data.train_clips must be positive".into()));
        }
        if !(self.word_cutoff > 0.0 && self.word_cutoff <= 1.0) {
            return Err(usage(format!("word_cutoff must lie in (0, 1], got {}", self.word_cutoff)));
        }
        self.hdp.validate().map_err(|e| usage(format!("hdp: {e}")))?;
        self.hmm.validate().map_err(|e| usage(format!("hmm: {e}")))?;
        self.fusion.validate().map_err(|e| usage(format!("fusion: {e}")))?;
        self.thresholds.validate().map_err(|e| usage(format!("thresholds: {e}")))?;
        Ok(())
    }

    fn scene(&self) -> Result<Option<SceneSpec>> {
        let Some(name) = &self.data.scene else { return Ok(None) };
        let mut spec = if name == "default" { SceneSpec::default_desk() } else { SceneSpec::load(name)? };
        if let Some(s) = self.data.seed {
            spec.seed = s;
        }
        if let Some(n) = self.data.clips {
            spec.clips = n;
        }
        Ok(Some(spec))
    }
}

/// Artifact locations inside the work directory.
pub struct Paths {
    pub corpus: PathBuf,
    pub truth: Option<PathBuf>,
    pub activities: PathBuf,
    pub states: PathBuf,
    pub train_features: PathBuf,
    pub test_features: PathBuf,
    pub gp: PathBuf,
    pub gpr: PathBuf,
    pub labels: PathBuf,
    pub events: PathBuf,
    pub report: PathBuf,
    stamps: PathBuf,
}

impl Paths {
    fn new(cfg: &PipelineConfig) -> Self {
        let w = |n: &str| cfg.work_dir.join(n);
        let simulated = cfg.data.scene.is_some();
        Paths {
            corpus: if simulated { w("corpus.jsonl") } else { cfg.data.corpus.clone().expect("validated") },
            truth: if simulated { Some(w("truth.json")) } else { cfg.data.truth.clone() },
            activities: w("activities.json"),
            states: w("states.json"),
            train_features: w("train_features.jsonl"),
            test_features: w("test_features.jsonl"),
            gp: w("gp.json"),
            gpr: w("gpr.json"),
            labels: w("labels.jsonl"),
            events: w("anomalies.jsonl"),
            report: w("report.json"),
            stamps: w(".stamps"),
        }
    }
}

pub const STAGES: &[&str] = &[
    "simulate",
    "learn-activities",
    "learn-states",
    "featurize",
    "train-gp",
    "train-regressors",
    "classify",
    "detect",
    "stream",
    "evaluate",
];

/// What happened to each stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

struct Stage {
    name: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    hash: String,
}

fn mtime(p: &Path) -> Option<SystemTime> {
    fs::metadata(p).and_then(|m| m.modified()).ok()
}

impl Stage {
    fn stamp(&self, paths: &Paths) -> PathBuf {
        paths.stamps.join(self.name)
    }

    fn up_to_date(&self, paths: &Paths) -> bool {
        if fs::read_to_string(self.stamp(paths)).ok().as_deref() != Some(self.hash.as_str()) {
            return false;
        }
        let Some(oldest_out) = self.outputs.iter().map(|p| mtime(p)).collect::<Option<Vec<_>>>().and_then(|v| v.into_iter().min())
        else {
            return false;
        };
        self.inputs.iter().all(|p| mtime(p).is_some_and(|t| t <= oldest_out))
    }
}

/// Run the configured stages in dependency order. `only` restricts the run
/// to one stage, which then needs its inputs already on disk.
pub fn run(cfg: &PipelineConfig, force: bool, only: Option<&str>) -> Result<Vec<(&'static str, StageStatus)>> {
    cfg.validate()?;
    if let Some(o) = only {
        if !STAGES.contains(&o) {
            return Err(anyhow!(UsageError(format!("unknown stage {o:?}; stages are {}", STAGES.join(", ")))));
        }
    }
    fs::create_dir_all(&cfg.work_dir).with_context(|| format!("creating {}", cfg.work_dir.display()))?;
    let paths = Paths::new(cfg);
    fs::create_dir_all(&paths.stamps)?;
    let scene = cfg.scene()?;
    let train = cfg.data.train_clips;
    let h = |v: serde_json::Value| config_hash(&v);

    let classify_hash = classify_hash(cfg);
    let detect_hash = detect_hash(cfg);
    let mut stages: Vec<Stage> = Vec::new();
    if let Some(spec) = &scene {
        let mut inputs = Vec::new();
        if let Some(name) = cfg.data.scene.as_ref().filter(|s| *s != "default") {
            inputs.push(PathBuf::from(name));
        }
        stages.push(Stage {
            name: "simulate",
            inputs,
            outputs: vec![paths.corpus.clone(), paths.truth.clone().expect("simulated truth")],
            hash: h(serde_json::json!({
                "stage": "simulate", "spec": spec, "inject": cfg.data.inject_per_kind,
                "inject_seed": cfg.data.inject_seed, "train": train
            })),
        });
    }
    stages.push(Stage {
        name: "learn-activities",
        inputs: vec![paths.corpus.clone()],
        outputs: vec![paths.activities.clone()],
        hash: h(serde_json::json!({"stage": "learn-activities", "hyper": cfg.hdp, "selection": cfg.activity_selection, "train": train})),
    });
    stages.push(Stage {
        name: "learn-states",
        inputs: vec![paths.corpus.clone()],
        outputs: vec![paths.states.clone()],
        hash: h(serde_json::json!({"stage": "learn-states", "hyper": cfg.hmm, "selection": cfg.state_selection, "train": train})),
    });
    stages.push(Stage {
        name: "featurize",
        inputs: vec![paths.corpus.clone(), paths.activities.clone(), paths.states.clone()],
        outputs: vec![paths.train_features.clone(), paths.test_features.clone()],
        hash: h(serde_json::json!({"stage": "featurize", "word_cutoff": cfg.word_cutoff, "train": train})),
    });
    stages.push(Stage {
        name: "train-gp",
        inputs: vec![paths.train_features.clone()],
        outputs: vec![paths.gp.clone()],
        hash: h(serde_json::json!({"stage": "train-gp", "gp": cfg.gp})),
    });
    stages.push(Stage {
        name: "train-regressors",
        inputs: vec![paths.train_features.clone()],
        outputs: vec![paths.gpr.clone()],
        hash: h(serde_json::json!({"stage": "train-regressors", "gpr": cfg.gpr})),
    });
    let model_inputs = vec![paths.activities.clone(), paths.gp.clone(), paths.gpr.clone(), paths.states.clone()];
    match cfg.mode {
        Mode::Batch => {
            stages.push(Stage {
                name: "classify",
                inputs: vec![paths.test_features.clone(), paths.gp.clone(), paths.states.clone()],
                outputs: vec![paths.labels.clone()],
                hash: classify_hash.clone(),
            });
            let mut inputs = vec![paths.corpus.clone(), paths.test_features.clone()];
            inputs.extend(model_inputs);
            stages.push(Stage { name: "detect", inputs, outputs: vec![paths.events.clone()], hash: detect_hash.clone() });
        }
        Mode::Stream => {
            let mut inputs = vec![paths.corpus.clone()];
            inputs.extend(model_inputs);
            stages.push(Stage {
                name: "stream",
                inputs,
                outputs: vec![paths.labels.clone(), paths.events.clone()],
                hash: h(serde_json::json!({"stage": "stream", "classify": classify_hash, "detect": detect_hash})),
            });
        }
    }
    if let Some(truth) = &paths.truth {
        stages.push(Stage {
            name: "evaluate",
            inputs: vec![paths.labels.clone(), paths.events.clone(), truth.clone(), paths.activities.clone()],
            outputs: vec![paths.report.clone()],
            hash: h(serde_json::json!({"stage": "evaluate", "scene": scene})),
        });
    }

    let mut statuses = Vec::new();
    for stage in &stages {
        if only.is_some_and(|o| o != stage.name) {
            continue;
        }
        if !force && stage.up_to_date(&paths) {
            log::info!("{}: up to date, skipped", stage.name);
            statuses.push((stage.name, StageStatus::Skipped));
            continue;
        }
        if let Some(missing) = stage.inputs.iter().find(|p| !p.exists()) {
            return Err(anyhow!(hdpgp::Error::InvalidInput(format!(
                "stage {}: missing input {}",
                stage.name,
                missing.display()
            ))));
        }
        let _ = fs::remove_file(stage.stamp(&paths));
        let start = Instant::now();
        if let Err(e) = run_stage(stage, cfg, &paths, scene.as_ref()) {
            for out in stage.outputs.iter().filter(|p| p.exists()) {
                let mut partial = out.clone().into_os_string();
                partial.push(".partial");
                let _ = fs::rename(out, &partial);
            }
            return Err(e.context(format!("stage {} failed; its outputs were renamed *.partial", stage.name)));
        }
        fs::write(stage.stamp(&paths), &stage.hash)?;
        log::info!("{}: done in {:.2} s", stage.name, start.elapsed().as_secs_f64());
        statuses.push((stage.name, StageStatus::Ran));
    }
    Ok(statuses)
}

/// Shared by the batch and stream stages so both write identical files.
fn classify_hash(cfg: &PipelineConfig) -> String {
    config_hash(&serde_json::json!({"stage": "classify", "fusion": cfg.fusion}))
}

fn detect_hash(cfg: &PipelineConfig) -> String {
    config_hash(&serde_json::json!({
        "stage": "detect",
        "fusion": cfg.fusion,
        "thresholds": cfg.thresholds,
        "word_cutoff": cfg.word_cutoff,
        "train": cfg.data.train_clips
    }))
}

fn models(cfg: &PipelineConfig, paths: &Paths) -> Result<Models> {
    Ok(Models {
        activities: ActivityModel::load(&paths.activities)?,
        word_cutoff: cfg.word_cutoff,
        gp: GpMulticlass::load(&paths.gp)?,
        regressors: ConflictRegressors::load(&paths.gpr)?,
        states: StateModel::load(&paths.states)?,
        fusion: cfg.fusion,
        thresholds: cfg.thresholds,
    })
}

fn run_stage(stage: &Stage, cfg: &PipelineConfig, paths: &Paths, scene: Option<&SceneSpec>) -> Result<()> {
    let train = cfg.data.train_clips;
    let hash = stage.hash.as_str();
    match stage.name {
        "simulate" => {
            let inject = InjectConfig { per_kind: cfg.data.inject_per_kind, from_clip: train, seed: cfg.data.inject_seed };
            let spec = scene.expect("simulate only runs with a scene");
            commands::simulate(spec, Some(inject), &paths.corpus, paths.truth.as_ref().expect("truth path"), hash)?;
        }
        "learn-activities" => {
            let corpus = commands::load_corpus(&paths.corpus, Some(train))?;
            commands::learn_activities(&corpus, cfg.hdp, cfg.activity_selection, &paths.activities, hash)?;
        }
        "learn-states" => {
            let corpus = commands::load_corpus(&paths.corpus, Some(train))?;
            commands::learn_states(&corpus, cfg.hmm, cfg.state_selection, &paths.states, hash)?;
        }
        "featurize" => {
            let all = commands::load_corpus(&paths.corpus, None)?;
            if all.len() <= train {
                return Err(anyhow!(hdpgp::Error::InvalidInput(format!(
                    "corpus has {} clips, none left for testing after {train} training clips",
                    all.len()
                ))));
            }
            let activities = ActivityModel::load(&paths.activities)?;
            let states = StateModel::load(&paths.states)?;
            let n = commands::featurize(&all.slice(0..train), &activities, Some(&states), cfg.word_cutoff, &paths.train_features, hash)?;
            log::info!("{n} labelled training clips");
            commands::featurize(&all.slice(train..all.len()), &activities, None, cfg.word_cutoff, &paths.test_features, hash)?;
        }
        "train-gp" => {
            commands::train_gp(&commands::features(&paths.train_features)?, &cfg.gp, &paths.gp, hash)?;
        }
        "train-regressors" => {
            commands::train_regressors(&commands::features(&paths.train_features)?, &cfg.gpr, &paths.gpr, hash)?;
        }
        "classify" => {
            let gp = GpMulticlass::load(&paths.gp)?;
            let states = StateModel::load(&paths.states)?;
            commands::classify(&commands::features(&paths.test_features)?, gp, &states, cfg.fusion, &paths.labels, hash)?;
        }
        "detect" => {
            let corpus = commands::load_corpus_tail(&paths.corpus, train)?;
            let records = commands::features(&paths.test_features)?;
            commands::detect(&corpus, models(cfg, paths)?, Some(&records), &paths.events, hash)?;
        }
        "stream" => {
            let (ch, dh) = (classify_hash(cfg), detect_hash(cfg));
            commands::stream(&paths.corpus, train, models(cfg, paths)?, &paths.labels, &paths.events, &ch, &dh)?;
        }
        "evaluate" => {
            let truth = GroundTruth::load(paths.truth.as_ref().expect("evaluate needs truth"))?;
            let labels = commands::load_labels(&paths.labels)?;
            let events = commands::load_events(&paths.events)?;
            let activities = ActivityModel::load(&paths.activities)?;
            let report =
                commands::evaluate(&labels, &truth, &events, scene.map(|s| (&activities, s)), &paths.report, hash)?;
            log::info!(
                "accuracy {:.4}, TPR {}, FPR {:.4}",
                report.accuracy,
                report.tpr.map_or("n/a".to_string(), |t| format!("{t:.3}")),
                report.fpr
            );
        }
        other => unreachable!("unknown stage {other}"),
    }
    Ok(())
}
