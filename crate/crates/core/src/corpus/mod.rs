//! Task records, candidate-sentence sampling and task-level splits.

mod superni;
mod synthetic;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use superni::{load_superni_task, load_task_dir, parse_superni_task, write_superni_task, KIND_MANIFEST};
pub use synthetic::{generate_synthetic_tasks, Rule, SyntheticSpec, SyntheticTask, RULES};

use crate::seed;

/// Default number of candidate slots the selector scores.
pub const N_CAND: usize = 5;

/// Outputs drawn from at most this many distinct normalized strings make a
/// task a classification task.
pub const CLASSIFICATION_MAX_LABELS: usize = 20;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: missing required field {field:?}")]
    MissingField { path: String, field: &'static str },
    #[error("{path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("{path}: task has no instances")]
    EmptyTask { path: String },
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
    #[error("cannot split {tasks} tasks into {parts} non-empty parts")]
    Split { tasks: usize, parts: usize },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    Fractions((f64, f64, f64)),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: invalid JSON: {source}")]
    Json { path: String, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Generation,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Classification => "classification",
            Self::Generation => "generation",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classification" => Ok(Self::Classification),
            "generation" => Ok(Self::Generation),
            other => Err(format!("unknown task kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub input_text: String,
    pub gold_outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub definition_sentences: Vec<String>,
    pub instances: Vec<Instance>,
    pub kind: TaskKind,
    pub label_space: Option<Vec<String>>,
}

impl TaskRecord {
    /// Keeps at most the first `cap` instances.
    pub fn capped(&self, cap: usize) -> TaskRecord {
        let mut t = self.clone();
        t.instances.truncate(cap);
        t
    }
}

/// The fixed-size window of definition sentences the selector scores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub task_id: String,
    pub candidate_indices: Vec<usize>,
    pub pad_count: usize,
}

impl CandidateSet {
    pub fn n_slots(&self) -> usize {
        self.candidate_indices.len() + self.pad_count
    }

    /// Slot holding definition sentence `sentence`, if it is a candidate.
    pub fn slot_of(&self, sentence: usize) -> Option<usize> {
        self.candidate_indices.iter().position(|&i| i == sentence)
    }

    pub fn valid(&self) -> Vec<bool> {
        (0..self.n_slots()).map(|s| s < self.candidate_indices.len()).collect()
    }
}

/// Draws `n_cand` sentence indices uniformly without replacement, sorted.
/// Definitions with fewer sentences use all of them and pad the rest.
pub fn sample_candidates(task: &TaskRecord, n_cand: usize, seed: u64) -> CandidateSet {
    assert!(n_cand >= 1, "n_cand must be at least 1");
    let n = task.definition_sentences.len();
    let (candidate_indices, pad_count) = if n >= n_cand {
        let mut rng = seed::rng(seed::mix(seed, &task.task_id), 0);
        let mut idx = index::sample(&mut rng, n, n_cand).into_vec();
        idx.sort_unstable();
        (idx, 0)
    } else {
        ((0..n).collect(), n_cand - n)
    };
    CandidateSet { task_id: task.task_id.clone(), candidate_indices, pad_count }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<TaskRecord>,
    pub dev: Vec<TaskRecord>,
    pub test: Vec<TaskRecord>,
}

/// Task-level split: no task appears in two parts.
pub fn split_dataset(
    tasks: &[TaskRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Splits, CorpusError> {
    let (ft, fd, fs) = fractions;
    if [ft, fd, fs].iter().any(|f| *f < 0.0 || !f.is_finite()) || ((ft + fd + fs) - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Fractions(fractions));
    }
    let n = tasks.len();
    let parts = [ft, fd, fs].iter().filter(|f| **f > 0.0).count();
    if n < parts {
        return Err(CorpusError::Split { tasks: n, parts });
    }
    let count = |f: f64| if f > 0.0 { ((n as f64 * f).round() as usize).max(1) } else { 0 };
    let n_dev = count(fd);
    let n_test = count(fs);
    let n_train = n.checked_sub(n_dev + n_test).ok_or(CorpusError::Split { tasks: n, parts })?;
    if ft > 0.0 && n_train == 0 {
        return Err(CorpusError::Split { tasks: n, parts });
    }
    let mut order: Vec<usize> = (0..n).collect();
    // sort by id first so the split does not depend on input order
    order.sort_by(|&a, &b| tasks[a].task_id.cmp(&tasks[b].task_id));
    order.shuffle(&mut seed::rng(seed, 0x5317));
    let pick = |r: &[usize]| r.iter().map(|&i| tasks[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: pick(&order[..n_train]),
        dev: pick(&order[n_train..n_train + n_dev]),
        test: pick(&order[n_train + n_dev..]),
    })
}
