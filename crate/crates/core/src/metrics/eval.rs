use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{exact_match, rouge_l, MetricError};
use crate::compute::{Graph, ParamStore, Tensor};
use crate::corpus::TaskKind;
use crate::model::PickRankModel;
use crate::objectives::{encode_variant, ObjectiveError};
use crate::seed;
use crate::selector::{draw_gumbel, gumbel_sample, pointer_logits, sentence_embeddings, union_mask, SelectorError};
use crate::text::Vocab;
use crate::trainer::PreparedTask;
use crate::variants::{build_origin, build_repeat};

use super::report::{Aggregate, EvalReport, TaskScore};

/// How test-time masks are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    /// One hard Gumbel draw (of `k` unioned samples) per instance.
    Sampled,
    /// The highest-scoring valid sentence, no noise.
    Argmax,
}

impl FromStr for SelectMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sampled" => Ok(Self::Sampled),
            "argmax" => Ok(Self::Argmax),
            _ => Err("expected sampled or argmax".into()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub select: SelectMode,
    pub seed: u64,
    pub k: usize,
    pub tau: f64,
    pub workers: usize,
    pub max_decode_len: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { select: SelectMode::Sampled, seed: 0, k: 2, tau: 1.0, workers: 1, max_decode_len: 64 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("task {0} has no instances")]
    EmptyTask(String),
}

impl From<SelectorError> for EvalError {
    fn from(e: SelectorError) -> Self {
        Self::Objective(e.into())
    }
}

impl From<crate::model::ModelError> for EvalError {
    fn from(e: crate::model::ModelError) -> Self {
        Self::Objective(e.into())
    }
}

impl From<crate::compute::ComputeError> for EvalError {
    fn from(e: crate::compute::ComputeError) -> Self {
        Self::Objective(e.into())
    }
}

type Res<T> = Result<T, EvalError>;

/// The selector's view of one instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceMask {
    pub logits: Vec<f64>,
    /// softmax of the logits.
    pub probs: Vec<f64>,
    /// Union of the soft samples.
    pub soft: Vec<f64>,
    pub hard: Vec<f64>,
}

/// Runs the selector for instance `i` of `task` with the eval stream
/// `(seed, task_id, i)`, so the draw does not depend on worker layout.
pub fn instance_mask(model: &PickRankModel, store: &ParamStore, task: &PreparedTask, i: usize, opts: &EvalOptions) -> Res<InstanceMask> {
    let mut g = Graph::inference(store);
    let emb = sentence_embeddings(model, &mut g, &task.definition, &task.cands)?;
    let logits = pointer_logits(model, &mut g, &emb, &task.cands.valid())?;
    let n = model.n_cand;
    let noise: Vec<Vec<f64>> = match opts.select {
        SelectMode::Sampled => {
            let mut rng = seed::rng(seed::mix(opts.seed, &task.task_id), i as u64);
            (0..opts.k).map(|_| draw_gumbel(&mut rng, n)).collect()
        }
        SelectMode::Argmax => vec![vec![0.0; n]],
    };
    let samples = noise.iter().map(|z| gumbel_sample(&mut g, logits, opts.tau, z)).collect::<Result<Vec<_>, _>>()?;
    let mask = union_mask(&mut g, &samples)?;
    let lv = g.value(logits).to_vec();
    let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = lv.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(InstanceMask { probs: e.iter().map(|v| v / z).collect(), soft: g.value(mask.soft).to_vec(), hard: mask.hard, logits: lv })
}

/// Greedy prediction on the Repeat variant built from a hard mask.
pub fn predict(model: &PickRankModel, store: &ParamStore, task: &PreparedTask, i: usize, hard: &[f64], max_len: usize) -> Res<Vec<u32>> {
    let mut g = Graph::inference(store);
    let gate = g.constant(Tensor::vector(hard.to_vec()));
    let inst = &task.instances[i];
    let v = build_repeat(&mut g, &task.definition, &task.cands, gate, &inst.input, model.config.max_src_len)?;
    let gate_values = g.value(v.gate).to_vec();
    Ok(model.greedy_decode(store, &v.tokens, &gate_values, max_len)?)
}

#[derive(Debug, Clone)]
struct TaskResult {
    score: TaskScore,
    predictions: Vec<String>,
}

fn evaluate_task(model: &PickRankModel, store: &ParamStore, vocab: &Vocab, task: &PreparedTask, opts: &EvalOptions) -> Res<TaskResult> {
    if task.instances.is_empty() {
        return Err(EvalError::EmptyTask(task.task_id.clone()));
    }
    let (mut primary, mut overall) = (0.0, 0.0);
    let mut predictions = Vec::with_capacity(task.instances.len());
    for (i, inst) in task.instances.iter().enumerate() {
        let mask = instance_mask(model, store, task, i, opts)?;
        let ids = predict(model, store, task, i, &mask.hard, opts.max_decode_len)?;
        let text = vocab.decode(&ids).unwrap_or_default();
        let r = rouge_l(&text, &inst.references)?;
        primary += match task.kind {
            TaskKind::Classification => exact_match(&text, &inst.references)?,
            TaskKind::Generation => r,
        };
        overall += r;
        predictions.push(text);
    }
    let n = task.instances.len() as f64;
    let metric = match task.kind {
        TaskKind::Classification => "exact_match",
        TaskKind::Generation => "rouge_l",
    };
    Ok(TaskResult {
        score: TaskScore { kind: task.kind, metric: metric.into(), value: primary / n, rouge_l: overall / n, n_instances: task.instances.len() },
        predictions,
    })
}

/// Scores every task (classification by ExactMatch, generation by ROUGE-L,
/// all by ROUGE-L for the overall figure), macro-averaged over tasks.
pub fn evaluate(model: &PickRankModel, store: &ParamStore, vocab: &Vocab, tasks: &[PreparedTask], opts: &EvalOptions) -> Res<EvalReport> {
    let workers = opts.workers.max(1).min(tasks.len().max(1));
    let mut results: Vec<Option<Res<TaskResult>>> = (0..tasks.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, t) in results.iter_mut().zip(tasks) {
            *slot = Some(evaluate_task(model, store, vocab, t, opts));
        }
    } else {
        let chunk = tasks.len().div_ceil(workers);
        std::thread::scope(|s| {
            for (slots, ts) in results.chunks_mut(chunk).zip(tasks.chunks(chunk)) {
                s.spawn(move || {
                    for (slot, t) in slots.iter_mut().zip(ts) {
                        *slot = Some(evaluate_task(model, store, vocab, t, opts));
                    }
                });
            }
        });
    }
    let mut per_task = BTreeMap::new();
    let mut predictions = BTreeMap::new();
    for (t, r) in tasks.iter().zip(results) {
        let r = r.expect("every task evaluated")?;
        per_task.insert(t.task_id.clone(), r.score);
        predictions.insert(t.task_id.clone(), r.predictions);
    }
    let aggregate = Aggregate::from_scores(&per_task);
    Ok(EvalReport { select: opts.select, seed: opts.seed, per_task, aggregate, predictions })
}

/// Mean gold-sequence probability under Repeat and Origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbabilityProbe {
    pub mean_f_repeat: f64,
    pub mean_f_origin: f64,
    pub n_instances: usize,
}

impl ProbabilityProbe {
    pub fn gap(&self) -> f64 {
        self.mean_f_repeat - self.mean_f_origin
    }
}

/// Teacher-forced `f` of the first reference under Repeat (with the eval
/// mask) and Origin, averaged over every instance of `tasks`.
pub fn probe_probabilities(model: &PickRankModel, store: &ParamStore, tasks: &[PreparedTask], opts: &EvalOptions) -> Res<ProbabilityProbe> {
    let (mut fr, mut fo, mut n) = (0.0, 0.0, 0usize);
    for task in tasks {
        for (i, inst) in task.instances.iter().enumerate() {
            let mask = instance_mask(model, store, task, i, opts)?;
            let mut g = Graph::inference(store);
            let gate = g.constant(Tensor::vector(mask.hard));
            let max = model.config.max_src_len;
            let rep = build_repeat(&mut g, &task.definition, &task.cands, gate, &inst.input, max)?;
            let enc = encode_variant(model, &mut g, &rep)?;
            let f = model.sequence_prob(&mut g, &enc, &inst.gold)?;
            fr += g.scalar(f);
            let ori = build_origin(&mut g, &task.definition, &inst.input, max)?;
            let enc = encode_variant(model, &mut g, &ori)?;
            let f = model.sequence_prob(&mut g, &enc, &inst.gold)?;
            fo += g.scalar(f);
            n += 1;
        }
    }
    let d = n.max(1) as f64;
    Ok(ProbabilityProbe { mean_f_repeat: fr / d, mean_f_origin: fo / d, n_instances: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Instance, TaskRecord};
    use crate::model::tiny_config;
    use crate::text::build_vocab;
    use crate::trainer::prepare_task;

    fn tasks() -> Vec<TaskRecord> {
        let mk = |id: &str, kind, out: &str| TaskRecord {
            task_id: id.into(),
            definition_sentences: vec!["Answer yes or no.".into(), "Be brief.".into()],
            instances: (0..3).map(|i| Instance { input_text: format!("item {i}"), gold_outputs: vec![out.into()] }).collect(),
            kind,
            label_space: None,
        };
        vec![mk("a", TaskKind::Classification, "yes"), mk("b", TaskKind::Generation, "no"), mk("c", TaskKind::Generation, "yes no")]
    }

    fn setup() -> (PickRankModel, ParamStore, Vocab, Vec<PreparedTask>) {
        let t = tasks();
        let vocab = build_vocab(&t, 1).unwrap();
        let mut s = ParamStore::new();
        let m = PickRankModel::new(tiny_config(vocab.len()), 5, &mut s, 5).unwrap();
        let p = t.iter().map(|t| prepare_task(t, &vocab, 5, 0, 8, 100)).collect();
        (m, s, vocab, p)
    }

    #[test]
    fn report_is_deterministic_and_worker_independent() {
        let (m, s, v, p) = setup();
        let a = evaluate(&m, &s, &v, &p, &EvalOptions::default()).unwrap();
        let b = evaluate(&m, &s, &v, &p, &EvalOptions { workers: 3, ..Default::default() }).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        for score in a.per_task.values() {
            assert!((0.0..=100.0).contains(&score.value) && (0.0..=100.0).contains(&score.rouge_l));
        }
        let c = evaluate(&m, &s, &v, &p, &EvalOptions { select: SelectMode::Argmax, ..Default::default() }).unwrap();
        let keys = |r: &EvalReport| serde_json::to_value(r).unwrap().as_object().unwrap().keys().cloned().collect::<Vec<_>>();
        assert_eq!(keys(&a), keys(&c));
    }

    #[test]
    fn masks_are_well_formed() {
        let (m, s, _, p) = setup();
        for i in 0..3 {
            let mk = instance_mask(&m, &s, &p[0], i, &EvalOptions::default()).unwrap();
            let ones = mk.hard.iter().filter(|&&h| h == 1.0).count();
            assert!((1..=2).contains(&ones));
            assert_eq!(&mk.hard[2..], &[0.0, 0.0, 0.0]);
            assert!((mk.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_values_are_probabilities() {
        let (m, s, _, p) = setup();
        let probe = probe_probabilities(&m, &s, &p, &EvalOptions::default()).unwrap();
        assert_eq!(probe.n_instances, 9);
        assert!((0.0..=1.0).contains(&probe.mean_f_repeat) && (0.0..=1.0).contains(&probe.mean_f_origin));
    }
}
