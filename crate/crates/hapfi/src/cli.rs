//! The `hapfi` command line. Each command is a thin wrapper over the
//! corresponding `hapfi-core` operation.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hapfi_core::dataset::{generate_corpus, Corpus, Episode, ModalityMask, Split};
use hapfi_core::heads::SubGoal;
use hapfi_core::simulator::{
    default_step_limit, run_agent, FailureInjector, ModelPolicy, Policy, RecoveryOracle, ScheduledFailure,
    ScriptedPolicy,
};
use hapfi_core::trainer::{ablation_grid, evaluate_splits, prepare_episodes, Control, MaskedPlanner, Predictor, Trainer};
use hapfi_core::world::world_vocabularies;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{ConfigFile, RunConfig, CONFIG_ENV};
use crate::error::{HapfiError, Result};
use crate::formats::{self, CorpusFiles};
use crate::report;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";

#[derive(Debug, Parser)]
#[command(name = "hapfi", version, about = "History-aware multimodal sub-goal planner")]
pub struct Cli {
    /// Config file (TOML); flags override its values.
    #[arg(long, global = true, env = CONFIG_ENV, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
    /// Train a planner, checkpointing every epoch.
    Train(TrainArgs),
    /// Teacher-forced evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate one model per modality row.
    Ablate(AblateArgs),
    /// Roll out a policy in the grid world, optionally injecting failures.
    Simulate(SimulateArgs),
    /// Print a checkpoint header.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub unseen_scenes: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub valid_seen: Option<usize>,
    #[arg(long)]
    pub valid_unseen: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub fusion_stages: Option<usize>,
    #[arg(long)]
    pub history_window: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

impl ModelFlags {
    fn any(&self) -> bool {
        self.width.is_some()
            || self.heads.is_some()
            || self.fusion_stages.is_some()
            || self.history_window.is_some()
            || self.batch_size.is_some()
            || self.learning_rate.is_some()
    }

    fn apply(&self, file: &mut ConfigFile) {
        let m = &mut file.model;
        m.width = self.width.or(m.width);
        m.heads = self.heads.or(m.heads);
        m.fusion_stages = self.fusion_stages.or(m.fusion_stages);
        m.history_window = self.history_window.or(m.history_window);
        file.train.batch_size = self.batch_size.or(file.train.batch_size);
        file.train.learning_rate = self.learning_rate.or(file.train.learning_rate);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory written by gen-data.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Total epochs, counting those already in a resumed checkpoint.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Modality row: full, no_vision, no_history or no_bbox.
    #[arg(long)]
    pub mask: Option<String>,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Continue from a checkpoint; its configuration is kept.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Oracle {
    /// Predicts the ground truth.
    Stub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    #[value(name = "valid_seen")]
    ValidSeen,
    #[value(name = "valid_unseen")]
    ValidUnseen,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::ValidSeen => Split::ValidSeen,
            SplitArg::ValidUnseen => Split::ValidUnseen,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "FILE", required_unless_present = "oracle", conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub oracle: Option<Oracle>,
    /// Modality row; defaults to the one the checkpoint was trained with.
    #[arg(long)]
    pub mask: Option<String>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [SplitArg::Train, SplitArg::ValidSeen, SplitArg::ValidUnseen])]
    pub splits: Vec<SplitArg>,
    #[arg(long)]
    pub label: Option<String>,
    /// Also write eval.csv and run.toml here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Modality rows to train, in output order.
    #[arg(long, value_delimiter = ',', default_values_t = ModalityMask::ROWS.map(String::from))]
    pub rows: Vec<String>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    /// Replays the ground-truth plan.
    Expert,
    /// Ground-truth plan with scripted re-planning after failures.
    Recovery,
    /// A trained checkpoint.
    Model,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Episode id whose scene, start and task are used.
    #[arg(long, default_value_t = 0)]
    pub episode: u32,
    #[arg(long, value_enum, default_value_t = PolicyArg::Expert)]
    pub policy: PolicyArg,
    #[arg(long, value_name = "FILE", required_if_eq("policy", "model"))]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<String>,
    /// Failure to inject, as kind@step (navigation_error@2). Repeatable.
    #[arg(long, value_name = "KIND@STEP")]
    pub inject: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub step_limit: Option<usize>,
    /// Write trajectory.jsonl and run.toml here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
    /// List every tensor.
    #[arg(long)]
    pub tensors: bool,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let file = ConfigFile::locate(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(file, a),
        Command::Train(a) => train(file, a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(file, a),
        Command::Simulate(a) => simulate(a),
        Command::InspectCheckpoint(a) => inspect(a),
    }
}

fn load_corpus(dir: &Path) -> Result<CorpusFiles> {
    formats::read_corpus(dir, &world_vocabularies())
}

fn gen_data(mut file: ConfigFile, a: GenDataArgs) -> Result<()> {
    let c = &mut file.corpus;
    c.scenes = a.scenes.or(c.scenes);
    c.unseen_scenes = a.unseen_scenes.or(c.unseen_scenes);
    c.train_episodes = a.train.or(c.train_episodes);
    c.valid_seen_episodes = a.valid_seen.or(c.valid_seen_episodes);
    c.valid_unseen_episodes = a.valid_unseen.or(c.valid_unseen_episodes);
    let config = file.corpus();
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let corpus = generate_corpus(&config, seed)?;
    let tokens = hapfi_core::dataset::corpus_token_vocab();
    formats::write_corpus(&a.out, &corpus, &tokens, &world_vocabularies())?;
    RunConfig {
        corpus: Some(config),
        ..RunConfig::new("gen-data", seed)
    }
    .write(&a.out)?;
    let count = |s| corpus.split(s).count();
    println!(
        "wrote {} scenes and {} episodes (train {}, valid_seen {}, valid_unseen {}) to {}",
        corpus.scenes.len(),
        corpus.episodes.len(),
        count(Split::Train),
        count(Split::ValidSeen),
        count(Split::ValidUnseen),
        a.out.display()
    );
    Ok(())
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| HapfiError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| HapfiError::io(path, e))
}

fn train(mut file: ConfigFile, a: TrainArgs) -> Result<()> {
    let data = load_corpus(&a.data)?;
    let image_size = data.corpus.config.image_size();
    let loss_path = a.out.join(LOSS_FILE);
    fs::create_dir_all(&a.out).map_err(|e| HapfiError::io(&a.out, e))?;

    let mut trainer = match &a.resume {
        Some(path) => {
            if a.model.any() || a.mask.is_some() || a.seed.is_some() {
                return Err(HapfiError::Usage(
                    "--resume keeps the checkpoint's configuration; only --epochs may change".into(),
                ));
            }
            let mut t = checkpoint::load(path)?.into_trainer()?;
            if t.model.tokens != data.tokens {
                return Err(HapfiError::Data("checkpoint vocabulary differs from the corpus".into()));
            }
            if let Some(e) = a.epochs {
                t.config.epochs = e;
            }
            t
        }
        None => {
            a.model.apply(&mut file);
            file.seed = a.seed.or(file.seed);
            file.train.epochs = a.epochs.or(file.train.epochs);
            file.train.mask = a.mask.clone().or(file.train.mask);
            let config = file.train(image_size)?;
            let _ = fs::remove_file(&loss_path);
            Trainer::from_scratch((world_vocabularies(), data.tokens.clone()), config)?
        }
    };
    if trainer.model.config.image_size != image_size {
        return Err(HapfiError::Data(format!(
            "checkpoint expects {}px frames, corpus has {image_size}px",
            trainer.model.config.image_size
        )));
    }
    if !loss_path.exists() {
        append(&loss_path, &report::loss_csv(&[], true))?;
    }

    let prepared = prepare_episodes(&trainer.model, data.corpus.split(Split::Train))?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let target = trainer.config.epochs;
    while trainer.epochs_done < target {
        trainer.config.epochs = trainer.epochs_done + 1;
        let points = trainer.train(&prepared, |s, _, _| {
            eprintln!("epoch {} mean_loss {:.6} steps {}", s.epoch, s.mean_loss, s.steps);
            Control::Continue
        });
        trainer.config.epochs = target;
        let points = points?;
        append(&loss_path, &report::loss_csv(&points, false))?;
        checkpoint::save(&ckpt_path, &Checkpoint::from_trainer(&trainer))?;
    }
    if !ckpt_path.exists() || a.resume.is_none() && target == 0 {
        checkpoint::save(&ckpt_path, &Checkpoint::from_trainer(&trainer))?;
    }
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.resume.clone());
    RunConfig {
        inputs,
        train: Some(trainer.config.clone()),
        ..RunConfig::new("train", trainer.config.seed)
    }
    .write(&a.out)?;
    println!(
        "trained {} epochs ({} optimizer steps); checkpoint {}",
        trainer.epochs_done,
        trainer.optimizer.step,
        ckpt_path.display()
    );
    Ok(())
}

/// Predicts the ground truth; used to check the metric plumbing.
struct GroundTruth;

impl Predictor for GroundTruth {
    fn predict(&self, e: &Episode) -> hapfi_core::Result<Vec<SubGoal>> {
        Ok(e.subgoals())
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = load_corpus(&a.data)?;
    let splits: Vec<Split> = a.splits.iter().map(|&s| s.into()).collect();
    let mut run = RunConfig::new("eval", 0).with("splits", splits.iter().map(|s| s.name()).collect::<Vec<_>>());
    run.inputs.push(a.data.clone());
    let report = match &a.checkpoint {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            let mask = match &a.mask {
                Some(m) => ModalityMask::named(m)?,
                None => ckpt.config.mask,
            };
            let label = a.label.clone().unwrap_or_else(|| mask_label(&mask));
            run.seed = ckpt.config.seed;
            run.inputs.push(path.clone());
            run.train = Some(ckpt.config.clone());
            let model = ckpt.into_model()?;
            if model.tokens != data.tokens {
                return Err(HapfiError::Data("checkpoint vocabulary differs from the corpus".into()));
            }
            evaluate_splits(&MaskedPlanner { model: &model, mask }, &data.corpus, &splits, &label, mask)?
        }
        None => {
            run = run.with("oracle", "stub");
            let label = a.label.clone().unwrap_or_else(|| "oracle".into());
            evaluate_splits(&GroundTruth, &data.corpus, &splits, &label, ModalityMask::full())?
        }
    };
    let csv = report::eval_csv(&[report]);
    if let Some(dir) = &a.out {
        run.write(dir)?;
        let path = dir.join(EVAL_FILE);
        fs::write(&path, &csv).map_err(|e| HapfiError::io(path, e))?;
    }
    print!("{}", if a.pretty { report::pretty(&csv) } else { csv });
    Ok(())
}

fn mask_label(mask: &ModalityMask) -> String {
    ModalityMask::ROWS
        .iter()
        .find(|n| ModalityMask::named(n).ok().as_ref() == Some(mask))
        .map_or_else(|| "custom".to_string(), |n| n.to_string())
}

fn ablate(mut file: ConfigFile, a: AblateArgs) -> Result<()> {
    let data = load_corpus(&a.data)?;
    a.model.apply(&mut file);
    file.seed = a.seed.or(file.seed);
    file.train.epochs = a.epochs.or(file.train.epochs);
    let base = file.train(data.corpus.config.image_size())?;
    let rows = a
        .rows
        .iter()
        .map(|n| Ok((n.clone(), ModalityMask::named(n)?)))
        .collect::<Result<Vec<_>>>()?;
    let splits = [Split::ValidSeen, Split::ValidUnseen];
    let vocab = (world_vocabularies(), data.tokens.clone());
    let reports = ablation_grid(&data.corpus, &base, &rows, &vocab, |label, s| {
        eprintln!("{label} epoch {} mean_loss {:.6}", s.epoch, s.mean_loss);
    })?;
    let csv = report::ablation_csv(&reports, &splits);
    RunConfig {
        inputs: vec![a.data.clone()],
        train: Some(base.clone()),
        ..RunConfig::new("ablate", base.seed).with("rows", a.rows.clone())
    }
    .write(&a.out)?;
    let path = a.out.join(ABLATION_FILE);
    fs::write(&path, &csv).map_err(|e| HapfiError::io(path, e))?;
    print!("{}", if a.pretty { report::pretty(&csv) } else { csv });
    Ok(())
}

fn find_episode(corpus: &Corpus, id: u32) -> Result<&Episode> {
    corpus
        .episodes
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| HapfiError::Data(format!("no episode with id {id}")))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let data = load_corpus(&a.data)?;
    let ep = find_episode(&data.corpus, a.episode)?;
    let scene = data
        .corpus
        .scene(ep.scene_id)
        .ok_or_else(|| HapfiError::Data(format!("episode {} names unknown scene {}", ep.id, ep.scene_id)))?;
    let schedule = a
        .inject
        .iter()
        .map(|s| ScheduledFailure::parse(s).map_err(|e| HapfiError::Usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut injector = FailureInjector::new(schedule, a.seed);
    let step_limit = a.step_limit.unwrap_or_else(|| default_step_limit(&ep.task));
    let start = ep.initial_state(scene);

    let model = match &a.checkpoint {
        Some(p) if a.policy == PolicyArg::Model => Some(checkpoint::load(p)?),
        _ => None,
    };
    let mask = match (&a.mask, &model) {
        (Some(m), _) => ModalityMask::named(m)?,
        (None, Some(c)) => c.config.mask,
        (None, None) => ModalityMask::full(),
    };
    let planner = model.map(Checkpoint::into_model).transpose()?;
    let mut policy: Box<dyn Policy + '_> = match a.policy {
        PolicyArg::Expert => Box::new(ScriptedPolicy::new(ep.subgoals())),
        PolicyArg::Recovery => Box::new(RecoveryOracle::new(ep.subgoals())),
        PolicyArg::Model => Box::new(ModelPolicy::new(
            planner.as_ref().expect("clap requires --checkpoint"),
            mask,
        )),
    };
    let traj = run_agent(policy.as_mut(), &start, &ep.instruction, &ep.task, &mut injector, step_limit, a.seed)?;
    if let Some(dir) = &a.out {
        let mut run = RunConfig::new("simulate", a.seed)
            .with("episode", ep.id as i64)
            .with("policy", format!("{:?}", a.policy).to_lowercase())
            .with("inject", a.inject.clone())
            .with("step_limit", step_limit as i64);
        run.inputs.push(a.data.clone());
        run.inputs.extend(a.checkpoint.clone());
        run.write(dir)?;
        formats::write_trajectories(&dir.join(TRAJECTORY_FILE), &[traj.clone()], &world_vocabularies())?;
    }
    println!("{}", traj.summary());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.path).map_err(|e| HapfiError::io(&a.path, e))?;
    let header = checkpoint::read_header(&a.path, &bytes)?;
    for (k, v) in &header.entries {
        if k.starts_with("tensor.") && k != "tensor.count" {
            continue;
        }
        let v = if k.starts_with("vocab.") {
            format!("{} entries", v.split(' ').count())
        } else {
            v.clone()
        };
        println!("{k}={v}");
    }
    let params: Vec<_> = header.tensors().filter(|(n, ..)| !n.starts_with("adam.")).collect();
    println!("parameters={}", params.iter().map(|(_, _, _, len)| len).sum::<usize>());
    if a.tensors {
        for (name, shape, offset, len) in header.tensors() {
            println!("{name} {shape:?} offset={offset} len={len}");
        }
    }
    Ok(())
}
