//! Planted-rule tasks. Each definition has exactly one sentence that decides
//! the input→output mapping; the others are drawn from a pool of unrelated
//! distractor sentences. Rule and distractor sentences have the same length,
//! so a selector cannot tell them apart by size.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Instance, TaskKind, TaskRecord};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub sentences_per_definition: usize,
    pub distractor_pool_size: usize,
    /// Number of distinct input symbols.
    pub vocab_size: usize,
    pub instances_per_task: usize,
    pub input_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_tasks: 240,
            sentences_per_definition: 5,
            distractor_pool_size: 200,
            vocab_size: 16,
            instances_per_task: 20,
            input_len: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    First,
    Second,
    Third,
    Last,
}

pub const RULES: [Rule; 4] = [Rule::First, Rule::Second, Rule::Third, Rule::Last];

impl Rule {
    /// The rule as a definition sentence. It shares no word with the
    /// encoder template, so repeating it cannot be mistaken for a marker.
    pub fn sentence(self) -> &'static str {
        match self {
            Rule::First => "Reply with the first symbol.",
            Rule::Second => "Reply with the second symbol.",
            Rule::Third => "Reply with the third symbol.",
            Rule::Last => "Reply with the last symbol.",
        }
    }

    /// Applies the rule to a whitespace-separated input.
    pub fn apply(self, input: &str) -> String {
        let toks: Vec<&str> = input.split_whitespace().collect();
        let pick = match self {
            Rule::First => toks.first(),
            Rule::Second => toks.get(1),
            Rule::Third => toks.get(2),
            Rule::Last => toks.last(),
        };
        pick.copied().unwrap_or_default().to_string()
    }

    fn min_input_len(self) -> usize {
        match self {
            Rule::First | Rule::Last => 1,
            Rule::Second => 2,
            Rule::Third => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub record: TaskRecord,
    /// Index of the rule sentence within `record.definition_sentences`.
    pub planted_rule_index: usize,
    pub rule: Rule,
}

const SUBJECTS: [&str; 10] = [
    "The river", "Our neighbor", "Many birds", "The clock", "The village",
    "The gardener", "Some travelers", "The museum", "Every bakery", "The orchestra",
];
const VERBS: [&str; 10] =
    ["admires", "visits", "paints", "ignores", "follows", "describes", "repairs", "borrows", "remembers", "collects"];
const OBJECTS: [&str; 10] = [
    "green hills", "wooden boats", "distant mountains", "spring flowers", "silver coins",
    "rainy evenings", "ancient maps", "busy markets", "summer storms", "tall lighthouses",
];

/// Input symbol `i`: letters `b`..`z`, then letter-digit pairs. The article
/// `a` is never used since metric normalization strips it.
pub fn symbol(i: usize) -> String {
    let letters: Vec<char> = ('b'..='z').collect();
    let l = letters[i % letters.len()];
    match i / letters.len() {
        0 => l.to_string(),
        n => format!("{l}{}", n - 1),
    }
}

fn distractor_pool(spec: &SyntheticSpec) -> Vec<String> {
    let total = SUBJECTS.len() * VERBS.len() * OBJECTS.len();
    let mut rng = seed::rng(spec.seed, u64::MAX);
    index::sample(&mut rng, total, spec.distractor_pool_size)
        .into_iter()
        .map(|c| {
            let (s, rest) = (c / (VERBS.len() * OBJECTS.len()), c % (VERBS.len() * OBJECTS.len()));
            format!("{} {} {}.", SUBJECTS[s], VERBS[rest / OBJECTS.len()], OBJECTS[rest % OBJECTS.len()])
        })
        .collect()
}

fn validate(spec: &SyntheticSpec) -> Result<(), CorpusError> {
    let bad = |m: String| Err(CorpusError::Config(m));
    let max_pool = SUBJECTS.len() * VERBS.len() * OBJECTS.len();
    if spec.sentences_per_definition < 2 {
        return bad("sentences_per_definition must be at least 2".into());
    }
    if spec.instances_per_task < 2 {
        return bad("instances_per_task must be at least 2".into());
    }
    if spec.distractor_pool_size < spec.sentences_per_definition - 1 || spec.distractor_pool_size > max_pool {
        return bad(format!(
            "distractor_pool_size must lie in [{}, {max_pool}] to build {} distractors per definition",
            spec.sentences_per_definition - 1,
            spec.sentences_per_definition - 1
        ));
    }
    if spec.vocab_size < 2 {
        return bad("vocab_size must be at least 2".into());
    }
    let need = RULES.iter().map(|r| r.min_input_len()).max().unwrap_or(1);
    if spec.input_len < need {
        return bad(format!("input_len must be at least {need}"));
    }
    Ok(())
}

pub fn generate_synthetic_tasks(spec: &SyntheticSpec) -> Result<Vec<SyntheticTask>, CorpusError> {
    validate(spec)?;
    let pool = distractor_pool(spec);
    let symbols: Vec<String> = (0..spec.vocab_size).map(symbol).collect();
    let width = spec.num_tasks.max(1).to_string().len().max(4);
    (0..spec.num_tasks)
        .map(|t| {
            let mut rng = seed::rng(spec.seed, t as u64);
            let rule = RULES[rng.gen_range(0..RULES.len())];
            let n_distract = spec.sentences_per_definition - 1;
            let mut sentences: Vec<String> =
                index::sample(&mut rng, pool.len(), n_distract).into_iter().map(|i| pool[i].clone()).collect();
            sentences.shuffle(&mut rng);
            let planted = rng.gen_range(0..spec.sentences_per_definition);
            sentences.insert(planted, rule.sentence().to_string());

            let instances = (0..spec.instances_per_task)
                .map(|_| {
                    let input: Vec<&str> =
                        (0..spec.input_len).map(|_| symbols[rng.gen_range(0..symbols.len())].as_str()).collect();
                    let input_text = input.join(" ");
                    let gold = rule.apply(&input_text);
                    Instance { input_text, gold_outputs: vec![gold] }
                })
                .collect::<Vec<_>>();
            let labels = if spec.vocab_size <= super::CLASSIFICATION_MAX_LABELS {
                let mut l: Vec<String> = instances.iter().map(|i| i.gold_outputs[0].clone()).collect();
                l.sort();
                l.dedup();
                Some(l)
            } else {
                None
            };
            let record = TaskRecord {
                task_id: format!("synth_{t:0width$}"),
                definition_sentences: sentences,
                instances,
                kind: if labels.is_some() { TaskKind::Classification } else { TaskKind::Generation },
                label_space: labels,
            };
            Ok(SyntheticTask { record, planted_rule_index: planted, rule })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{segment_sentences, tokenize};

    #[test]
    fn rules_apply_by_construction() {
        assert_eq!(Rule::First.apply("b c d"), "b");
        assert_eq!(Rule::First.apply("x y z"), "x");
        assert_eq!(Rule::Last.apply("x y z"), "z");
        assert_eq!(Rule::Third.apply("x y z"), "z");
    }

    #[test]
    fn every_instance_follows_its_planted_rule() {
        let spec = SyntheticSpec { num_tasks: 30, ..Default::default() };
        for t in generate_synthetic_tasks(&spec).unwrap() {
            let r = &t.record;
            assert_eq!(r.definition_sentences.len(), 5);
            assert_eq!(r.definition_sentences[t.planted_rule_index], t.rule.sentence());
            assert_eq!(r.definition_sentences.iter().filter(|s| s.starts_with("Reply")).count(), 1);
            // definitions survive re-segmentation, so dumps reload unchanged
            assert_eq!(segment_sentences(&r.definition_sentences.join(" ")), r.definition_sentences);
            for i in &r.instances {
                assert_eq!(t.rule.apply(&i.input_text), i.gold_outputs[0]);
            }
        }
    }

    #[test]
    fn rules_and_distractors_have_equal_length() {
        let spec = SyntheticSpec { num_tasks: 20, ..Default::default() };
        for t in generate_synthetic_tasks(&spec).unwrap() {
            let lens: Vec<usize> = t.record.definition_sentences.iter().map(|s| tokenize(s).len()).collect();
            assert!(lens.iter().all(|&l| l == lens[0]), "{lens:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec { num_tasks: 5, ..Default::default() };
        let a = serde_json::to_string(&generate_synthetic_tasks(&spec).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_synthetic_tasks(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_specs() {
        let err = |s: SyntheticSpec| matches!(generate_synthetic_tasks(&s), Err(CorpusError::Config(_)));
        assert!(err(SyntheticSpec { instances_per_task: 1, ..Default::default() }));
        assert!(err(SyntheticSpec { sentences_per_definition: 1, ..Default::default() }));
        assert!(err(SyntheticSpec { distractor_pool_size: 2, ..Default::default() }));
        assert!(err(SyntheticSpec { distractor_pool_size: 5000, ..Default::default() }));
    }

    #[test]
    fn symbols_avoid_articles() {
        let syms: Vec<String> = (0..60).map(symbol).collect();
        assert!(!syms.iter().any(|s| s == "a" || s == "an"));
        let mut d = syms.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), syms.len());
    }
}
