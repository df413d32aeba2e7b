//! Training loop: Adam with one learning rate per parameter group, seeded
//! per-epoch shuffling, JSON-lines telemetry and resumable checkpoints.
//!
//! All randomness is derived from the configured seed and the global step
//! number, so a run resumed from a checkpoint follows the same trajectory as
//! an uninterrupted one.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{grad_check, ComputeError, GradCheckConfig, GradCheckReport, Grads, Graph, ParamGroup, ParamStore, Tensor};
use crate::config::{fmt_f64, parse_value, ConfigError, KvConfig};
use crate::corpus::{sample_candidates, CandidateSet, TaskKind, TaskRecord};
use crate::model::PickRankModel;
use crate::objectives::{step_loss, Example, LossBreakdown, ObjectiveConfig, ObjectiveError};
use crate::selector::{draw_gumbel, Noise, SelectMode, DEFAULT_K, DEFAULT_TAU};
use crate::seed;
use crate::text::{TokenSeq, Vocab, EOS};

pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "trainer.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite values at step {step}: {dump}")]
    NonFinite { step: usize, dump: String },
    #[error("gradient check failed before training: {0:?}")]
    GradCheck(GradCheckReport),
    #[error("no training instances")]
    NoData,
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

type Res<T> = Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_seq2seq: f64,
    pub lr_pointer: f64,
    pub lr_selector_encoder: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub grad_clip_norm: Option<f64>,
    pub max_instances_per_task: usize,
    /// Gumbel samples unioned per mask.
    pub k: usize,
    pub tau: f64,
    /// Elements per parameter checked by the pre-training gradient check;
    /// 0 disables it.
    pub gradcheck_elements: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_seq2seq: 5e-5,
            lr_pointer: 3e-4,
            lr_selector_encoder: 5e-6,
            epochs: 2,
            batch_size: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            objective: ObjectiveConfig::default(),
            grad_clip_norm: None,
            max_instances_per_task: 100,
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            gradcheck_elements: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let lrs = [self.lr_seq2seq, self.lr_pointer, self.lr_selector_encoder];
        if lrs.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size != 1 {
            return bad("only batch_size = 1 is supported");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip_norm must be positive");
        }
        if self.k == 0 || !(self.tau > 0.0) || self.max_instances_per_task == 0 {
            return bad("k, tau and max_instances_per_task must be positive");
        }
        self.objective.validate()
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Seq2Seq => self.lr_seq2seq,
            ParamGroup::SelectorPointer => self.lr_pointer,
            ParamGroup::SelectorEncoder => self.lr_selector_encoder,
        }
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "lr_seq2seq" => self.lr_seq2seq = parse_value(key, value)?,
            "lr_pointer" => self.lr_pointer = parse_value(key, value)?,
            "lr_selector_encoder" => self.lr_selector_encoder = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "grad_clip_norm" => {
                self.grad_clip_norm = match value {
                    "none" | "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "max_instances_per_task" => self.max_instances_per_task = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "gradcheck_elements" => self.gradcheck_elements = parse_value(key, value)?,
            _ => return self.objective.set(key, value),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = vec![
            ("lr_seq2seq".into(), fmt_f64(self.lr_seq2seq)),
            ("lr_pointer".into(), fmt_f64(self.lr_pointer)),
            ("lr_selector_encoder".into(), fmt_f64(self.lr_selector_encoder)),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("adam_beta1".into(), fmt_f64(self.adam_beta1)),
            ("adam_beta2".into(), fmt_f64(self.adam_beta2)),
            ("adam_eps".into(), fmt_f64(self.adam_eps)),
            ("seed".into(), self.seed.to_string()),
            ("grad_clip_norm".into(), self.grad_clip_norm.map_or("none".into(), fmt_f64)),
            ("max_instances_per_task".into(), self.max_instances_per_task.to_string()),
            ("k".into(), self.k.to_string()),
            ("tau".into(), fmt_f64(self.tau)),
            ("gradcheck_elements".into(), self.gradcheck_elements.to_string()),
        ];
        e.extend(self.objective.entries());
        e
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInstance {
    pub input: Vec<u32>,
    /// First reference, truncated to fit, ending in EOS.
    pub gold: Vec<u32>,
    pub references: Vec<String>,
}

/// A task in token form with its fixed candidate window.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTask {
    pub task_id: String,
    pub kind: TaskKind,
    pub definition: TokenSeq,
    pub cands: CandidateSet,
    pub instances: Vec<PreparedInstance>,
}

pub fn prepare_task(task: &TaskRecord, vocab: &Vocab, n_cand: usize, seed: u64, max_tgt_len: usize, cap: usize) -> PreparedTask {
    let definition = vocab.encode_sentences(&task.definition_sentences);
    let cands = sample_candidates(task, n_cand, seed);
    let instances = task
        .instances
        .iter()
        .take(cap)
        .map(|inst| {
            let mut gold = inst.gold_outputs.first().map(|g| vocab.encode(g).ids).unwrap_or_default();
            gold.truncate(max_tgt_len.saturating_sub(1));
            gold.push(EOS);
            PreparedInstance { input: vocab.encode(&inst.input_text).ids, gold, references: inst.gold_outputs.clone() }
        })
        .collect();
    PreparedTask { task_id: task.task_id.clone(), kind: task.kind, definition, cands, instances }
}

impl PreparedTask {
    pub fn example(&self, i: usize) -> Example<'_> {
        let inst = &self.instances[i];
        Example { definition: &self.definition, cands: &self.cands, input: &inst.input, gold: &inst.gold }
    }
}

/// First and second Adam moments plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn write_to(&self, store: &ParamStore, path: &Path) -> Res<()> {
        let mut out = ParamStore::new();
        for (prefix, moments) in [("m", &self.m), ("v", &self.v)] {
            for ((_, p), data) in store.iter().zip(moments) {
                out.add(format!("{prefix}/{}", p.name), p.group, Tensor::new(p.value.shape().to_vec(), data.clone())?)?;
            }
        }
        let f = File::create(path).map_err(|source| TrainError::Io { path: path.into(), source })?;
        let mut w = BufWriter::new(f);
        out.write_to(&mut w)?;
        w.flush().map_err(|source| TrainError::Io { path: path.into(), source })
    }

    fn read_from(store: &ParamStore, path: &Path, t: u64) -> Res<Self> {
        let f = File::open(path).map_err(|source| TrainError::Io { path: path.into(), source })?;
        let saved = ParamStore::read_from(BufReader::new(f))?;
        let mut state = Self::new(store);
        for (prefix, moments) in [("m", &mut state.m), ("v", &mut state.v)] {
            for ((_, p), slot) in store.iter().zip(moments.iter_mut()) {
                let id = saved.id(&format!("{prefix}/{}", p.name)).ok_or_else(|| TrainError::Checkpoint {
                    path: path.into(),
                    msg: format!("missing moment {prefix}/{}", p.name),
                })?;
                if saved.value(id).shape() != p.value.shape() {
                    return Err(TrainError::Checkpoint { path: path.into(), msg: format!("moment shape mismatch for {}", p.name) });
                }
                *slot = saved.value(id).data().to_vec();
            }
        }
        state.t = t;
        Ok(state)
    }
}

/// One bias-corrected Adam update, with each group's learning rate.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, state: &mut AdamState, cfg: &TrainConfig) -> Res<()> {
    if state.m.len() != store.len() {
        return Err(ComputeError::Shape { op: "adam_step", lhs: vec![state.m.len()], rhs: vec![store.len()] }.into());
    }
    state.t += 1;
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let lr = cfg.lr(store.get(id).group);
        let g = grads.get(id);
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let w = store.value_mut(id).data_mut();
        if g.len() != w.len() || m.len() != w.len() {
            return Err(ComputeError::Shape { op: "adam_step", lhs: vec![g.len()], rhs: vec![w.len()] }.into());
        }
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub store: ParamStore,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: usize,
    pub epoch: usize,
    /// Position within the current epoch's order.
    pub pos: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    step: usize,
    epoch: usize,
    pos: usize,
    adam_t: u64,
    seed: u64,
}

impl TrainState {
    pub fn new(store: ParamStore) -> Self {
        let adam = AdamState::new(&store);
        Self { store, adam, step: 0, epoch: 0, pos: 0 }
    }

    /// Writes parameters, optimizer moments and counters into `dir`.
    pub fn save(&self, dir: &Path, seed: u64) -> Res<()> {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.into(), source })?;
        save_params(&self.store, &dir.join(PARAMS_FILE))?;
        self.adam.write_to(&self.store, &dir.join(OPTIMIZER_FILE))?;
        let s = StateFile { step: self.step, epoch: self.epoch, pos: self.pos, adam_t: self.adam.t, seed };
        let path = dir.join(STATE_FILE);
        let text = serde_json::to_string_pretty(&s).expect("plain struct serializes") + "\n";
        fs::write(&path, text).map_err(|source| TrainError::Io { path, source })
    }

    /// Reads a state written by [`TrainState::save`]; returns it with the seed it was trained with.
    pub fn load(dir: &Path) -> Res<(Self, u64)> {
        let store = load_params(&dir.join(PARAMS_FILE))?;
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|source| TrainError::Io { path: path.clone(), source })?;
        let s: StateFile =
            serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint { path: path.clone(), msg: e.to_string() })?;
        let adam = AdamState::read_from(&store, &dir.join(OPTIMIZER_FILE), s.adam_t)?;
        Ok((Self { store, adam, step: s.step, epoch: s.epoch, pos: s.pos }, s.seed))
    }
}

pub fn save_params(store: &ParamStore, path: &Path) -> Res<()> {
    let f = File::create(path).map_err(|source| TrainError::Io { path: path.into(), source })?;
    let mut w = BufWriter::new(f);
    store.write_to(&mut w)?;
    w.flush().map_err(|source| TrainError::Io { path: path.into(), source })
}

pub fn load_params(path: &Path) -> Res<ParamStore> {
    let f = File::open(path).map_err(|source| TrainError::Io { path: path.into(), source })?;
    Ok(ParamStore::read_from(BufReader::new(f))?)
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// The visiting order of `(task, instance)` pairs in `epoch`.
pub fn epoch_order(data: &[PreparedTask], seed: u64, epoch: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> =
        data.iter().enumerate().flat_map(|(t, task)| (0..task.instances.len()).map(move |i| (t, i))).collect();
    order.shuffle(&mut seed::rng(seed::mix(seed, "epoch"), epoch as u64));
    order
}

/// Gumbel stream for one optimizer step.
pub fn step_rng(seed: u64, step: usize) -> rand_chacha::ChaCha8Rng {
    seed::rng(seed::mix(seed, "gumbel"), step as u64)
}

/// Smoke-check error that aborts training. Elements whose gradient is near
/// the finite-difference roundoff floor (~1e-11 absolute at eps 1e-5) can
/// exceed the 1e-4 tolerance with a correct backward, so those only warn;
/// a wrong backward shows up as O(1) error.
const GRADCHECK_ABORT: f64 = 1e-2;

/// Checks backward against finite differences on the first example, with
/// frozen Gumbel noise and a random subset of elements per parameter.
pub fn smoke_grad_check(model: &PickRankModel, store: &mut ParamStore, data: &[PreparedTask], cfg: &TrainConfig) -> Res<GradCheckReport> {
    let task = data.iter().find(|t| !t.instances.is_empty()).ok_or(TrainError::NoData)?;
    let noise = draw_gumbel(&mut seed::rng(seed::mix(cfg.seed, "gradcheck"), 0), cfg.k * model.n_cand);
    let ids: Vec<_> = store.ids().collect();
    let gc = GradCheckConfig { max_per_param: Some(cfg.gradcheck_elements), seed: cfg.seed, ..Default::default() };
    let report = grad_check(store, &ids, gc, |g: &mut Graph| -> Result<_, TrainError> {
        let out = step_loss(model, g, task.example(0), &cfg.objective, cfg.k, cfg.tau, SelectMode::Gumbel(Noise::Frozen(&noise)))?;
        Ok(out.loss)
    })?;
    Ok(report)
}

pub struct TrainHooks<'a> {
    /// Stop after this many total steps (counting steps before a resume).
    pub max_steps: Option<usize>,
    pub log: &'a mut dyn Write,
    /// Called at every epoch end and when `max_steps` is reached.
    pub checkpoint: &'a mut dyn FnMut(&TrainState) -> Res<()>,
}

/// Runs (or resumes) training until `cfg.epochs` or `hooks.max_steps`.
pub fn train(model: &PickRankModel, state: &mut TrainState, data: &[PreparedTask], cfg: &TrainConfig, hooks: TrainHooks<'_>) -> Res<()> {
    cfg.validate()?;
    if data.iter().all(|t| t.instances.is_empty()) {
        return Err(TrainError::NoData);
    }
    if state.step == 0 && cfg.gradcheck_elements > 0 {
        let report = smoke_grad_check(model, &mut state.store, data, cfg)?;
        if report.max_rel_err > GRADCHECK_ABORT {
            return Err(TrainError::GradCheck(report));
        }
        if report.passed() {
            log::info!("pre-training gradient check passed (max rel err {:.2e})", report.max_rel_err);
        } else {
            log::warn!("pre-training gradient check above tolerance: {:.2e} at {:?}", report.max_rel_err, report.worst);
        }
    }
    let mut grads = Grads::new(&state.store);
    let log_io = |source| TrainError::Io { path: PathBuf::from("<loss log>"), source };
    while state.epoch < cfg.epochs {
        let order = epoch_order(data, cfg.seed, state.epoch);
        while state.pos < order.len() {
            if hooks.max_steps.is_some_and(|m| state.step >= m) {
                (hooks.checkpoint)(state)?;
                return Ok(());
            }
            let (t, i) = order[state.pos];
            let mut rng = step_rng(cfg.seed, state.step);
            grads.zero_all();
            let breakdown = {
                let mut g = Graph::new(&state.store);
                let out = step_loss(model, &mut g, data[t].example(i), &cfg.objective, cfg.k, cfg.tau, SelectMode::Gumbel(Noise::Sampled(&mut rng)))?;
                if !out.breakdown.total.is_finite() {
                    return Err(non_finite(state.step + 1, &data[t].task_id, i, &out.breakdown));
                }
                g.backward(out.loss, &mut grads)?;
                out.breakdown
            };
            if !grads.is_finite() {
                return Err(non_finite(state.step + 1, &data[t].task_id, i, &breakdown));
            }
            if let Some(c) = cfg.grad_clip_norm {
                let n = grads.global_norm();
                if n > c {
                    grads.scale(c / n);
                }
            }
            adam_step(&mut state.store, &grads, &mut state.adam, cfg)?;
            state.step += 1;
            state.pos += 1;
            let line = serde_json::to_string(&StepLog { step: state.step, loss: breakdown }).expect("log line serializes");
            writeln!(hooks.log, "{line}").map_err(log_io)?;
        }
        state.epoch += 1;
        state.pos = 0;
        hooks.log.flush().map_err(log_io)?;
        (hooks.checkpoint)(state)?;
    }
    Ok(())
}

fn non_finite(step: usize, task: &str, instance: usize, b: &LossBreakdown) -> TrainError {
    let dump = format!("task {task} instance {instance}: {}", serde_json::to_string(b).unwrap_or_default());
    TrainError::NonFinite { step, dump }
}
