//! Command-line driver: synthetic data generation, training, evaluation and
//! selection inspection.
//!
//! A checkpoint is a directory holding `params.bin`, `optimizer.bin`,
//! `trainer.json`, `vocab.txt`, `model.cfg`, the effective run config
//! (`config.txt`), the task split (`splits.json`) and the per-step loss log
//! (`loss_log.jsonl`).

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::compute::{Graph, ParamStore, Tensor};
use crate::config::{fmt_f64, parse_kv, parse_value, ConfigError, KvConfig};
use crate::corpus::{
    generate_synthetic_tasks, load_superni_task, load_task_dir, split_dataset, write_superni_task, CorpusError,
    SyntheticSpec, TaskRecord, KIND_MANIFEST, N_CAND,
};
use crate::metrics::{evaluate, instance_mask, render_bar_svg, render_line_svg, EvalError, EvalOptions, SelectMode};
use crate::model::{ModelConfig, ModelError, PickRankModel};
use crate::objectives::ObjectiveMode;
use crate::selector::SelectorError;
use crate::text::{build_vocab, TextError, Vocab};
use crate::trainer::{load_params, prepare_task, train, PreparedTask, TrainConfig, TrainError, TrainHooks, TrainState, PARAMS_FILE, STATE_FILE};
use crate::variants::{build_delete, build_repeat, InstructionVariant};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MODEL_FILE: &str = "model.cfg";
pub const CONFIG_FILE: &str = "config.txt";
pub const SPLITS_FILE: &str = "splits.json";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PLANTED_FILE: &str = "planted_rules.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error("no checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    /// 2 for configuration, schema and missing-input errors, 3 for
    /// non-finite losses, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Corpus(_) | Self::Text(_) | Self::MissingCheckpoint(_) | Self::Usage(_) => 2,
            Self::Model(ModelError::Config(_)) => 2,
            Self::Train(TrainError::NonFinite { .. }) => 3,
            Self::Train(TrainError::Config(_) | TrainError::Checkpoint { .. } | TrainError::NoData) => 2,
            _ => 1,
        }
    }
}

type Res<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn read_text(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Parser)]
#[command(name = "pickrank", version, about = "Critical-sentence selection and ranking for instruction following")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-rule synthetic benchmark as task files.
    SynthGen(SynthArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Score a checkpoint on held-out tasks.
    Eval(EvalArgs),
    /// Print the selector's choices for one task as JSON lines.
    InspectSelection(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Key-value spec file; every key is optional.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Spec overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of task files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub objective: Option<ObjectiveMode>,
    /// Config overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Stop (and checkpoint) after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Continue from the checkpoint already in `--out`, using its config.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Dev,
    Test,
    /// Every task in `--data`.
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory (or any file inside it).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub select: Option<SelectMode>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
    /// Also write a per-task CSV table.
    #[arg(long)]
    pub csv: bool,
    /// Also render metric and loss curves to SVG.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A single task file.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub select: Option<SelectMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Inspect at most this many instances.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write to a file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything a run needs: model shape, optimizer, objective, data handling
/// and evaluation options. `vocab_size` is derived from the training data and
/// cannot be set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub min_count: usize,
    pub n_cand: usize,
    pub eval_select: SelectMode,
    pub eval_seed: u64,
    pub eval_workers: usize,
    pub max_decode_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_fraction: 0.8,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            split_seed: 0,
            min_count: 1,
            n_cand: N_CAND,
            eval_select: SelectMode::Sampled,
            eval_seed: 0,
            eval_workers: 1,
            max_decode_len: 64,
        }
    }
}

impl RunConfig {
    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.train_fraction, self.dev_fraction, self.test_fraction)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            select: self.eval_select,
            seed: self.eval_seed,
            k: self.train.k,
            tau: self.train.tau,
            workers: self.eval_workers,
            max_decode_len: self.max_decode_len,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate()?;
        self.train.objective.validate()?;
        if self.n_cand == 0 || self.eval_workers == 0 || self.max_decode_len == 0 {
            return Err(ConfigError::Invalid("n_cand, eval_workers and max_decode_len must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Res<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_kv(&read_text(path)?)?)?;
        Ok(cfg)
    }
}

impl KvConfig for RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "train_fraction" => self.train_fraction = parse_value(key, value)?,
            "dev_fraction" => self.dev_fraction = parse_value(key, value)?,
            "test_fraction" => self.test_fraction = parse_value(key, value)?,
            "split_seed" => self.split_seed = parse_value(key, value)?,
            "min_count" => self.min_count = parse_value(key, value)?,
            "n_cand" => self.n_cand = parse_value(key, value)?,
            "eval_select" => self.eval_select = parse_value(key, value)?,
            "eval_seed" => self.eval_seed = parse_value(key, value)?,
            "eval_workers" => self.eval_workers = parse_value(key, value)?,
            "max_decode_len" => self.max_decode_len = parse_value(key, value)?,
            "vocab_size" => {
                return Err(ConfigError::Invalid("vocab_size is derived from the training data".into()));
            }
            _ => return Ok(self.model.set(key, value)? || self.train.set(key, value)?),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let select = match self.eval_select {
            SelectMode::Sampled => "sampled",
            SelectMode::Argmax => "argmax",
        };
        let mut e: Vec<(String, String)> = vec![
            ("train_fraction".into(), fmt_f64(self.train_fraction)),
            ("dev_fraction".into(), fmt_f64(self.dev_fraction)),
            ("test_fraction".into(), fmt_f64(self.test_fraction)),
            ("split_seed".into(), self.split_seed.to_string()),
            ("min_count".into(), self.min_count.to_string()),
            ("n_cand".into(), self.n_cand.to_string()),
            ("eval_select".into(), select.into()),
            ("eval_seed".into(), self.eval_seed.to_string()),
            ("eval_workers".into(), self.eval_workers.to_string()),
            ("max_decode_len".into(), self.max_decode_len.to_string()),
        ];
        e.extend(self.model.entries().into_iter().filter(|(k, _)| k != "vocab_size"));
        e.extend(self.train.entries());
        e
    }
}

impl KvConfig for SyntheticSpec {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "num_tasks" => self.num_tasks = parse_value(key, value)?,
            "sentences_per_definition" => self.sentences_per_definition = parse_value(key, value)?,
            "distractor_pool_size" => self.distractor_pool_size = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "instances_per_task" => self.instances_per_task = parse_value(key, value)?,
            "input_len" => self.input_len = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("num_tasks", self.num_tasks as u64),
            ("sentences_per_definition", self.sentences_per_definition as u64),
            ("distractor_pool_size", self.distractor_pool_size as u64),
            ("vocab_size", self.vocab_size as u64),
            ("instances_per_task", self.instances_per_task as u64),
            ("input_len", self.input_len as u64),
            ("seed", self.seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }
}

/// Parses `KEY=VALUE` overrides.
pub fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    items
        .iter()
        .map(|s| match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
            _ => Err(ConfigError::Syntax { line: 0, text: s.clone() }),
        })
        .collect()
}

/// Task ids of each split, as recorded at training time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

/// A trained model ready for evaluation.
pub struct Checkpoint {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub model: PickRankModel,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub splits: SplitIds,
}

impl Checkpoint {
    pub fn prepare(&self, task: &TaskRecord) -> PreparedTask {
        let c = &self.config;
        prepare_task(task, &self.vocab, c.n_cand, c.train.seed, c.model.max_tgt_len, usize::MAX)
    }
}

pub fn load_checkpoint(path: &Path) -> Res<Checkpoint> {
    let dir = if path.is_file() { path.parent().unwrap_or(Path::new(".")) } else { path };
    if !dir.join(PARAMS_FILE).is_file() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let mut model_cfg = ModelConfig::default();
    model_cfg.apply(&parse_kv(&read_text(&dir.join(MODEL_FILE))?)?)?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab = Vocab::read_from(BufReader::new(File::open(&vocab_path).map_err(io_err(&vocab_path))?))?;
    if vocab.len() != model_cfg.vocab_size {
        return Err(ConfigError::Invalid(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model_cfg.vocab_size
        ))
        .into());
    }
    let splits_path = dir.join(SPLITS_FILE);
    let splits = serde_json::from_str(&read_text(&splits_path)?)
        .map_err(|e| CorpusError::Schema { path: splits_path.display().to_string(), msg: e.to_string() })?;
    let store = load_params(&dir.join(PARAMS_FILE))?;
    let model = PickRankModel::attach(model_cfg, config.n_cand, &store)?;
    Ok(Checkpoint { dir: dir.to_path_buf(), config, model, store, vocab, splits })
}

pub fn run(cli: Cli) -> Res<()> {
    match cli.command {
        Command::SynthGen(a) => synth_gen(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::InspectSelection(a) => {
            let stdout = io::stdout();
            match &a.out {
                Some(p) => {
                    let mut w = BufWriter::new(File::create(p).map_err(io_err(p))?);
                    inspect_selection(&a, &mut w)?;
                    w.flush().map_err(io_err(p))
                }
                None => inspect_selection(&a, &mut stdout.lock()),
            }
        }
    }
}

pub fn synth_gen(a: &SynthArgs) -> Res<()> {
    let mut spec = SyntheticSpec::default();
    if let Some(p) = &a.spec {
        spec.apply(&parse_kv(&read_text(p)?)?)?;
    }
    spec.apply(&parse_overrides(&a.set)?)?;
    let tasks = generate_synthetic_tasks(&spec)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut planted = String::new();
    let mut kinds = String::new();
    for t in &tasks {
        let r = &t.record;
        let extra = [("planted_rule_index", json!(t.planted_rule_index)), ("planted_rule", json!(t.rule.sentence()))];
        write_superni_task(r, &extra, &a.out.join(format!("{}.json", r.task_id)))?;
        let line = json!({ "task_id": r.task_id, "planted_rule_index": t.planted_rule_index, "planted_rule": t.rule.sentence() });
        planted.push_str(&format!("{line}\n"));
        kinds.push_str(&format!("{} {}\n", r.task_id, r.kind));
    }
    write_text(&a.out.join(PLANTED_FILE), &planted)?;
    write_text(&a.out.join(KIND_MANIFEST), &kinds)?;
    write_text(&a.out.join("spec.txt"), &spec.to_kv_string())?;
    log::info!("wrote {} synthetic tasks to {}", tasks.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Res<RunConfig> {
    let mut cfg = if a.resume {
        if a.config.is_some() {
            return Err(CliError::Usage("--resume reuses the checkpoint's config; drop --config".into()));
        }
        RunConfig::load(&a.out.join(CONFIG_FILE))?
    } else {
        match &a.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        }
    };
    if let Some(m) = a.objective {
        cfg.train.objective.mode = m;
    }
    cfg.apply(&parse_overrides(&a.set)?)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_cmd(a: &TrainArgs) -> Res<()> {
    let mut cfg = train_config(a)?;
    let tasks = load_task_dir(&a.data)?;
    let splits = split_dataset(&tasks, cfg.fractions(), cfg.split_seed)?;
    let ids = |ts: &[TaskRecord]| ts.iter().map(|t| t.task_id.clone()).collect::<Vec<_>>();
    let split_ids = SplitIds { train: ids(&splits.train), dev: ids(&splits.dev), test: ids(&splits.test) };
    let out = &a.out;

    let (vocab, mut state) = if a.resume {
        if !out.join(STATE_FILE).is_file() {
            return Err(CliError::MissingCheckpoint(out.clone()));
        }
        let ck = load_checkpoint(out)?;
        if ck.splits != split_ids {
            return Err(CliError::Usage("task split differs from the checkpoint's; was --data changed?".into()));
        }
        let (state, seed) = TrainState::load(out)?;
        if seed != cfg.train.seed {
            return Err(CliError::Usage(format!("checkpoint was trained with seed {seed}")));
        }
        cfg.model = ck.model.config.clone();
        (ck.vocab, state)
    } else {
        let vocab = build_vocab(&splits.train, cfg.min_count)?;
        cfg.model.vocab_size = vocab.len();
        cfg.model.validate()?;
        (vocab, TrainState::new(ParamStore::new()))
    };

    let model = if a.resume {
        PickRankModel::attach(cfg.model.clone(), cfg.n_cand, &state.store)?
    } else {
        fs::create_dir_all(out).map_err(io_err(out))?;
        write_text(&out.join(CONFIG_FILE), &cfg.to_kv_string())?;
        write_text(&out.join(MODEL_FILE), &cfg.model.to_kv_string())?;
        let vocab_path = out.join(VOCAB_FILE);
        let mut w = BufWriter::new(File::create(&vocab_path).map_err(io_err(&vocab_path))?);
        vocab.write_to(&mut w)?;
        w.flush().map_err(io_err(&vocab_path))?;
        let splits_json = serde_json::to_string_pretty(&split_ids).expect("split ids serialize");
        write_text(&out.join(SPLITS_FILE), &format!("{splits_json}\n"))?;
        let mut store = ParamStore::new();
        let model = PickRankModel::new(cfg.model.clone(), cfg.n_cand, &mut store, cfg.train.seed)?;
        state = TrainState::new(store);
        model
    };

    let t = &cfg.train;
    let data: Vec<PreparedTask> = splits
        .train
        .iter()
        .map(|task| prepare_task(task, &vocab, cfg.n_cand, t.seed, cfg.model.max_tgt_len, t.max_instances_per_task))
        .collect();

    let log_path = out.join(LOSS_LOG_FILE);
    if a.resume {
        truncate_log(&log_path, state.step)?;
    }
    let file = OpenOptions::new().create(true).append(a.resume).write(true).truncate(!a.resume).open(&log_path).map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    let seed = t.seed;
    let mut checkpoint = |s: &TrainState| s.save(out, seed);
    log::info!("training on {} tasks ({} instances)", data.len(), data.iter().map(|d| d.instances.len()).sum::<usize>());
    let result = train(&model, &mut state, &data, t, TrainHooks { max_steps: a.max_steps, log: &mut log, checkpoint: &mut checkpoint });
    log.flush().map_err(io_err(&log_path))?;
    result?;
    log::info!("finished at step {} (epoch {})", state.step, state.epoch);
    Ok(())
}

/// Keeps the first `steps` lines of a loss log so a resumed run appends
/// exactly where its checkpoint left off.
fn truncate_log(path: &Path, steps: usize) -> Res<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(io_err(path))?;
    let lines: Vec<String> = BufReader::new(f).lines().take(steps).collect::<Result<_, _>>().map_err(io_err(path))?;
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn eval_cmd(a: &EvalArgs) -> Res<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut opts = ck.config.eval_options();
    if let Some(s) = a.select {
        opts.select = s;
    }
    if let Some(w) = a.workers {
        opts.workers = w.max(1);
    }
    if let Some(s) = a.seed {
        opts.seed = s;
    }
    let tasks = load_task_dir(&a.data)?;
    let wanted: Option<&[String]> = match a.split {
        SplitChoice::Train => Some(&ck.splits.train),
        SplitChoice::Dev => Some(&ck.splits.dev),
        SplitChoice::Test => Some(&ck.splits.test),
        SplitChoice::All => None,
    };
    let chosen: Vec<&TaskRecord> = tasks.iter().filter(|t| wanted.is_none_or(|w| w.contains(&t.task_id))).collect();
    if chosen.is_empty() {
        return Err(CliError::Usage(format!("no {:?} tasks of the checkpoint were found in {}", a.split, a.data.display())));
    }
    let prepared: Vec<PreparedTask> = chosen.iter().map(|t| ck.prepare(t)).collect();
    let report = evaluate(&ck.model, &ck.store, &ck.vocab, &prepared, &opts)?;

    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    write_text(&a.out.join(REPORT_FILE), &report.to_json())?;
    if a.csv {
        write_text(&a.out.join("report.csv"), &report.to_csv())?;
    }
    if a.plot {
        let bars: Vec<(String, f64)> = report.per_task.iter().map(|(id, s)| (id.clone(), s.value)).collect();
        write_text(&a.out.join("per_task.svg"), &render_bar_svg("Per-task score", &bars))?;
        let log_path = ck.dir.join(LOSS_LOG_FILE);
        if log_path.is_file() {
            let series = loss_curves(&read_text(&log_path)?);
            write_text(&a.out.join("loss.svg"), &render_line_svg("Training loss", &series))?;
        }
    }
    let agg = &report.aggregate;
    log::info!(
        "{} tasks: exact_match {:?}, rouge_l {:?}, rouge_l_overall {:.2}",
        report.per_task.len(),
        agg.exact_match,
        agg.rouge_l,
        agg.rouge_l_overall
    );
    Ok(())
}

/// nll and total loss averaged over at most 200 buckets of steps.
fn loss_curves(log: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    let rows: Vec<Value> = log.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
    let bucket = rows.len().div_ceil(200).max(1);
    ["nll", "total"]
        .iter()
        .map(|key| {
            let pts = rows
                .chunks(bucket)
                .map(|c| {
                    let step = c.last().and_then(|r| r["step"].as_f64()).unwrap_or(0.0);
                    let mean = c.iter().filter_map(|r| r[*key].as_f64()).sum::<f64>() / c.len() as f64;
                    (step, mean)
                })
                .collect();
            (key.to_string(), pts)
        })
        .collect()
}

fn render_variant(g: &Graph, v: &InstructionVariant, vocab: &Vocab) -> Vec<Value> {
    v.tokens
        .iter()
        .zip(g.value(v.gate))
        .map(|(&id, &m)| json!({ "token": vocab.token(id).unwrap_or("[?]"), "mask": m }))
        .collect()
}

pub fn inspect_selection(a: &InspectArgs, out: &mut dyn Write) -> Res<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let task = load_superni_task(&a.task)?;
    let p = ck.prepare(&task);
    let mut opts = ck.config.eval_options();
    if let Some(s) = a.select {
        opts.select = s;
    }
    if let Some(s) = a.seed {
        opts.seed = s;
    }
    let candidates: Vec<Value> = (0..p.cands.n_slots())
        .map(|slot| match p.cands.candidate_indices.get(slot) {
            Some(&i) => json!({ "slot": slot, "sentence_index": i, "text": task.definition_sentences[i] }),
            None => json!({ "slot": slot, "sentence_index": null, "text": null }),
        })
        .collect();
    let max_len = ck.model.config.max_src_len;
    let n = a.limit.map_or(p.instances.len(), |l| l.min(p.instances.len()));
    for i in 0..n {
        let m = instance_mask(&ck.model, &ck.store, &p, i, &opts)?;
        let mut g = Graph::inference(&ck.store);
        let gate = g.constant(Tensor::vector(m.hard.clone()));
        let input = &p.instances[i].input;
        let repeat = build_repeat(&mut g, &p.definition, &p.cands, gate, input, max_len).map_err(ModelError::from)?;
        let delete = build_delete(&mut g, &p.definition, &p.cands, gate, input, max_len).map_err(ModelError::from)?;
        let line = json!({
            "task_id": p.task_id,
            "instance": i,
            "input": task.instances[i].input_text,
            "candidates": candidates,
            "logits": m.logits,
            "probs": m.probs,
            "soft": m.soft,
            "hard": m.hard,
            "repeat": render_variant(&g, &repeat, &ck.vocab),
            "delete": render_variant(&g, &delete, &ck.vocab),
        });
        writeln!(out, "{line}").map_err(io_err(&a.task))?;
    }
    Ok(())
}
