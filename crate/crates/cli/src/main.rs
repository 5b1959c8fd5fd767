//! `hdpgp` command-line pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hdpgp::anomaly::AnomalyThresholds;
use hdpgp::dp::{HdpHyperParams, TypicalRule, TypicalSelection};
use hdpgp::fusion::FusionConfig;
use hdpgp::gp::{ConflictRegressors, GpMulticlass, KernelKind};
use hdpgp::hdp::ActivityModel;
use hdpgp::hdphmm::StateModel;
use hdpgp::io::config_hash;
use hdpgp::synth::{GroundTruth, SceneSpec};

use hdpgp_cli::commands::{self, InjectConfig, KernelConfig, Models};
use hdpgp_cli::pipeline::{self, Mode, PipelineConfig};
use hdpgp_cli::{exit_code, UsageError};


#[derive(Parser)]
#[command(name = "hdpgp", version, about = "Learn activities and states from motion-word clips, classify and flag anomalies")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a directory of .flo optical-flow frames into a clip corpus.
    Quantize(QuantizeArgs),
    /// Generate a synthetic corpus and its ground truth.
    Simulate(SimulateArgs),
    /// Learn atomic activities with the HDP topic model.
    LearnActivities(LearnArgs),
    /// Learn scene states with the HDP-HMM.
    LearnStates(LearnArgs),
    /// Compute clip feature vectors against the typical activities.
    Featurize(FeaturizeArgs),
    /// Train the one-vs-all GP state classifier.
    TrainGp(TrainArgs),
    /// Train the per-activity GP regressors used for conflict detection.
    TrainRegressors(TrainArgs),
    /// Label clips by fusing classifier output with state transitions.
    Classify(ClassifyArgs),
    /// Detect rare motions, conflicting activities and illegal transitions.
    Detect(DetectArgs),
    /// Score labels and events against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    flow_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    cell: u32,
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
    #[arg(long, default_value_t = 75)]
    clip_frames: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene file; the built-in desk scene when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clips: Option<usize>,
    /// Inject this many anomalies of each kind.
    #[arg(long, default_value_t = 0)]
    inject_per_kind: usize,
    /// First clip eligible for injection.
    #[arg(long, default_value_t = 0)]
    inject_from: usize,
    #[arg(long, default_value_t = 0)]
    inject_seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Covering,
    AtMost,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Learn from the first N clips only.
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.02)]
    d0: f64,
    #[arg(long, default_value_t = 1000)]
    sweeps: usize,
    #[arg(long, default_value_t = 500)]
    burnin: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 20)]
    init_components: usize,
    /// Cumulative-ratio cutoff for typical components.
    #[arg(long, default_value_t = 0.99)]
    cutoff: f64,
    #[arg(long, value_enum, default_value_t = RuleArg::Covering)]
    rule: RuleArg,
    #[arg(long)]
    out: PathBuf,
}

impl LearnArgs {
    fn hyper(&self) -> HdpHyperParams {
        HdpHyperParams {
            gamma: self.gamma,
            alpha: self.alpha,
            d0: self.d0,
            n_sweeps: self.sweeps,
            n_burnin: self.burnin,
            seed: self.seed,
            init_components: self.init_components,
            n_chains: self.chains,
        }
    }

    fn selection(&self) -> TypicalSelection {
        let rule = match self.rule {
            RuleArg::Covering => TypicalRule::Covering,
            RuleArg::AtMost => TypicalRule::AtMost,
        };
        TypicalSelection::new(self.cutoff, rule)
    }
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    activities: PathBuf,
    /// State model learned on the same clips; gives each clip its label.
    #[arg(long)]
    states: Option<PathBuf>,
    /// Skip this many leading clips.
    #[arg(long, default_value_t = 0)]
    from: usize,
    /// Use at most this many clips.
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long, default_value_t = hdpgp::representation::DEFAULT_WORD_CUTOFF)]
    word_cutoff: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum)]
    kernel: Option<KernelArg>,
    /// Optimize kernel hyperparameters by conjugate gradients.
    #[arg(long)]
    optimize: bool,
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    length_scale: Option<f64>,
    /// Observation noise (regressors only).
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Train on at most this many evenly spaced clips; 0 uses all.
    #[arg(long)]
    max_train: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Rbf,
    Ard,
}

impl TrainArgs {
    fn config(&self, mut base: KernelConfig) -> KernelConfig {
        if let Some(k) = self.kernel {
            base.kind = match k {
                KernelArg::Rbf => KernelKind::Rbf,
                KernelArg::Ard => KernelKind::Ard,
            };
        }
        base.optimize = self.optimize;
        base.signal_sigma = self.signal.unwrap_or(base.signal_sigma);
        base.length_scale = self.length_scale.unwrap_or(base.length_scale);
        base.noise_sigma = self.noise.unwrap_or(base.noise_sigma);
        base.max_iter = self.max_iter.unwrap_or(base.max_iter);
        if let Some(m) = self.max_train {
            base.max_train = (m > 0).then_some(m);
        }
        base
    }
}

#[derive(Args)]
struct FusionArgs {
    /// Weight of the transition energy.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 1e-6)]
    prob_floor: f64,
}

impl FusionArgs {
    fn config(&self) -> FusionConfig {
        FusionConfig { beta_weight: self.beta, prob_floor: self.prob_floor }
    }
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    gp: PathBuf,
    #[arg(long)]
    states: PathBuf,
    #[command(flatten)]
    fusion: FusionArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Skip this many leading clips.
    #[arg(long, default_value_t = 0)]
    from: usize,
    #[arg(long)]
    activities: PathBuf,
    #[arg(long, default_value_t = hdpgp::representation::DEFAULT_WORD_CUTOFF)]
    word_cutoff: f64,
    /// Feature file to check against the corpus.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    gp: PathBuf,
    #[arg(long)]
    gpr: PathBuf,
    #[arg(long)]
    states: PathBuf,
    #[command(flatten)]
    fusion: FusionArgs,
    #[arg(long, default_value_t = 50)]
    th_rare: usize,
    #[arg(long, default_value_t = 0.05)]
    th_trans: f64,
    /// Read the corpus clip by clip and also write labels here.
    #[arg(long)]
    stream_labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    events: PathBuf,
    /// Activity model and scene for the topic-matching table.
    #[arg(long, requires = "spec")]
    activities: Option<PathBuf>,
    /// Scene file, or "default" for the built-in scene.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Rerun stages even when their outputs are up to date.
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Run a single stage.
    #[arg(long)]
    only: Option<String>,
}

fn hash_of(v: serde_json::Value) -> String {
    config_hash(&v)
}

fn load_scene(spec: Option<&str>) -> Result<SceneSpec> {
    Ok(match spec {
        None | Some("default") => SceneSpec::default_desk(),
        Some(p) => SceneSpec::load(p)?,
    })
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Quantize(a) => {
            let hash = hash_of(serde_json::json!({"cell": a.cell, "threshold": a.threshold, "clip_frames": a.clip_frames}));
            let n = commands::quantize(&a.flow_dir, a.cell, a.threshold, a.clip_frames, &a.out, &hash)?;
            log::info!("{n} clips");
        }
        Command::Simulate(a) => {
            let mut spec = load_scene(a.spec.as_ref().and_then(|p| p.to_str()))?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            if let Some(n) = a.clips {
                spec.clips = n;
            }
            let inject = InjectConfig { per_kind: a.inject_per_kind, from_clip: a.inject_from, seed: a.inject_seed };
            let hash = hash_of(serde_json::json!({"spec": spec, "inject": inject}));
            commands::simulate(&spec, Some(inject), &a.out, &a.truth, &hash)?;
        }
        Command::LearnActivities(a) => {
            let corpus = commands::load_corpus(&a.corpus, a.clips)?;
            let hash = hash_of(serde_json::json!({"hyper": a.hyper(), "selection": a.selection(), "clips": a.clips}));
            commands::learn_activities(&corpus, a.hyper(), a.selection(), &a.out, &hash)?;
        }
        Command::LearnStates(a) => {
            let corpus = commands::load_corpus(&a.corpus, a.clips)?;
            let hash = hash_of(serde_json::json!({"hyper": a.hyper(), "selection": a.selection(), "clips": a.clips}));
            commands::learn_states(&corpus, a.hyper(), a.selection(), &a.out, &hash)?;
        }
        Command::Featurize(a) => {
            let all = commands::load_corpus(&a.corpus, None)?;
            let from = a.from.min(all.len());
            let to = a.clips.map_or(all.len(), |n| (from + n).min(all.len()));
            let corpus = all.slice(from..to);
            let activities = ActivityModel::load(&a.activities)?;
            let states = a.states.as_ref().map(StateModel::load).transpose()?;
            let hash = hash_of(serde_json::json!({"word_cutoff": a.word_cutoff, "from": a.from, "clips": a.clips}));
            let n = commands::featurize(&corpus, &activities, states.as_ref(), a.word_cutoff, &a.out, &hash)?;
            log::info!("{n} feature records");
        }
        Command::TrainGp(a) => {
            let cfg = a.config(KernelConfig::classifier_default());
            let hash = hash_of(serde_json::json!({"gp": cfg}));
            commands::train_gp(&commands::features(&a.features)?, &cfg, &a.out, &hash)?;
        }
        Command::TrainRegressors(a) => {
            let cfg = a.config(KernelConfig::regressor_default());
            let hash = hash_of(serde_json::json!({"gpr": cfg}));
            commands::train_regressors(&commands::features(&a.features)?, &cfg, &a.out, &hash)?;
        }
        Command::Classify(a) => {
            let fusion = a.fusion.config();
            fusion.validate().map_err(|e| UsageError(e.to_string()))?;
            let hash = hash_of(serde_json::json!({"stage": "classify", "fusion": fusion}));
            let gp = GpMulticlass::load(&a.gp)?;
            let states = StateModel::load(&a.states)?;
            commands::classify(&commands::features(&a.features)?, gp, &states, fusion, &a.out, &hash)?;
        }
        Command::Detect(a) => {
            let fusion = a.fusion.config();
            let thresholds = AnomalyThresholds { th_rare: a.th_rare, th_trans: a.th_trans, ..Default::default() };
            fusion.validate().map_err(|e| UsageError(e.to_string()))?;
            thresholds.validate().map_err(|e| UsageError(e.to_string()))?;
            let models = Models {
                activities: ActivityModel::load(&a.activities)?,
                word_cutoff: a.word_cutoff,
                gp: GpMulticlass::load(&a.gp)?,
                regressors: ConflictRegressors::load(&a.gpr)?,
                states: StateModel::load(&a.states)?,
                fusion,
                thresholds,
            };
            let hash = hash_of(serde_json::json!({
                "stage": "detect", "fusion": fusion, "thresholds": thresholds, "word_cutoff": a.word_cutoff, "train": a.from
            }));
            match &a.stream_labels {
                Some(labels) => {
                    let classify_hash = hash_of(serde_json::json!({"stage": "classify", "fusion": fusion}));
                    commands::stream(&a.corpus, a.from, models, labels, &a.out, &classify_hash, &hash)?;
                }
                None => {
                    let corpus = commands::load_corpus_tail(&a.corpus, a.from)?;
                    let records = a.features.as_ref().map(|p| commands::features(p)).transpose()?;
                    let n = commands::detect(&corpus, models, records.as_deref(), &a.out, &hash)?;
                    log::info!("{n} events");
                }
            }
        }
        Command::Evaluate(a) => {
            let truth = GroundTruth::load(&a.truth)?;
            let labels = commands::load_labels(&a.pred)?;
            let events = commands::load_events(&a.events)?;
            let scene = a.spec.as_deref().map(|s| load_scene(Some(s))).transpose()?;
            let activities = a.activities.as_ref().map(ActivityModel::load).transpose()?;
            let topics = activities.as_ref().zip(scene.as_ref());
            let hash = hash_of(serde_json::json!({"stage": "evaluate", "scene": scene}));
            let r = commands::evaluate(&labels, &truth, &events, topics, &a.report, &hash)?;
            println!("accuracy {:.4}  average {:.4}  fpr {:.4}", r.accuracy, r.average_accuracy, r.fpr);
            if let Some(tpr) = r.tpr {
                println!("tpr {tpr:.4} ({} of {})", r.n_detected, r.n_injected);
            }
        }
        Command::Run(a) => {
            let mut cfg = PipelineConfig::load(&a.config)?;
            if let Some(m) = a.mode {
                cfg.mode = m;
            }
            if let Some(w) = a.work_dir {
                cfg.work_dir = w;
            }
            let statuses = pipeline::run(&cfg, a.force, a.only.as_deref())
                .with_context(|| format!("pipeline {}", a.config.display()))?;
            for (name, status) in statuses {
                println!("{name}: {}", if status == pipeline::StageStatus::Ran { "ran" } else { "skipped" });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
