use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{CorpusError, Instance, TaskKind, TaskRecord, CLASSIFICATION_MAX_LABELS};
use crate::metrics::normalize_text;
use crate::text::segment_sentences;

/// Optional file in a task directory overriding inferred task kinds, one
/// `<task_id> <classification|generation>` pair per line.
pub const KIND_MANIFEST: &str = "task_kinds.txt";

pub fn load_superni_task(path: &Path) -> Result<TaskRecord, CorpusError> {
    let p = path.display().to_string();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: p.clone(), source })?;
    let task_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.clone());
    parse_superni_task(&task_id, &raw, &p)
}

/// Parses one task object. `origin` only labels error messages.
pub fn parse_superni_task(task_id: &str, raw: &str, origin: &str) -> Result<TaskRecord, CorpusError> {
    let path = origin.to_string();
    let root: Value = serde_json::from_str(raw).map_err(|source| CorpusError::Json { path: path.clone(), source })?;
    let obj = root
        .as_object()
        .ok_or_else(|| CorpusError::Schema { path: path.clone(), msg: "top level is not an object".into() })?;
    let schema = |msg: String| CorpusError::Schema { path: path.clone(), msg };

    let definition = obj
        .get("Definition")
        .ok_or(CorpusError::MissingField { path: path.clone(), field: "Definition" })?;
    let first = match definition {
        Value::Array(items) => items.first().and_then(Value::as_str),
        Value::String(s) => Some(s.as_str()),
        _ => None,
    }
    .ok_or_else(|| schema("\"Definition\" must be a non-empty list of strings".into()))?;
    let definition_sentences = segment_sentences(first);
    if definition_sentences.is_empty() {
        return Err(schema("definition is empty".into()));
    }

    let raw_instances = obj
        .get("Instances")
        .ok_or(CorpusError::MissingField { path: path.clone(), field: "Instances" })?
        .as_array()
        .ok_or_else(|| schema("\"Instances\" must be a list".into()))?;
    if raw_instances.is_empty() {
        return Err(CorpusError::EmptyTask { path });
    }
    let mut instances = Vec::with_capacity(raw_instances.len());
    for (i, inst) in raw_instances.iter().enumerate() {
        let input_text = inst
            .get("input")
            .and_then(Value::as_str)
            .ok_or_else(|| schema(format!("instance {i}: missing string \"input\"")))?
            .to_string();
        let gold_outputs: Vec<String> = match inst.get("output") {
            Some(Value::Array(outs)) => outs.iter().filter_map(Value::as_str).map(str::to_string).collect(),
            Some(Value::String(s)) => vec![s.clone()],
            _ => return Err(schema(format!("instance {i}: missing \"output\""))),
        };
        if gold_outputs.is_empty() || gold_outputs.iter().any(|g| g.trim().is_empty()) {
            return Err(schema(format!("instance {i}: outputs must be non-empty strings")));
        }
        instances.push(Instance { input_text, gold_outputs });
    }

    let (kind, label_space) = infer_kind(&instances);
    Ok(TaskRecord { task_id: task_id.to_string(), definition_sentences, instances, kind, label_space })
}

fn infer_kind(instances: &[Instance]) -> (TaskKind, Option<Vec<String>>) {
    let normalized: BTreeSet<String> =
        instances.iter().flat_map(|i| i.gold_outputs.iter().map(|g| normalize_text(g))).collect();
    if normalized.len() <= CLASSIFICATION_MAX_LABELS {
        (TaskKind::Classification, Some(label_space(instances)))
    } else {
        (TaskKind::Generation, None)
    }
}

fn label_space(instances: &[Instance]) -> Vec<String> {
    let set: BTreeSet<&String> = instances.iter().flat_map(|i| &i.gold_outputs).collect();
    set.into_iter().cloned().collect()
}

/// Writes a task in the same schema the loader reads. Extra top-level fields
/// (such as a planted-rule sidecar) are merged in.
pub fn write_superni_task(task: &TaskRecord, extra: &[(&str, Value)], path: &Path) -> Result<(), CorpusError> {
    let mut obj = Map::new();
    obj.insert("Definition".into(), json!([task.definition_sentences.join(" ")]));
    let instances: Vec<Value> = task
        .instances
        .iter()
        .map(|i| json!({ "input": i.input_text, "output": i.gold_outputs }))
        .collect();
    obj.insert("Instances".into(), Value::Array(instances));
    for (k, v) in extra {
        obj.insert((*k).to_string(), v.clone());
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(obj)).expect("task serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

/// Loads every `*.json` task in `dir`, sorted by file name, applying the
/// optional kind manifest.
pub fn load_task_dir(dir: &Path) -> Result<Vec<TaskRecord>, CorpusError> {
    let io = |source| CorpusError::Io { path: dir.display().to_string(), source };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut tasks = paths.iter().map(|p| load_superni_task(p)).collect::<Result<Vec<_>, _>>()?;

    let manifest = dir.join(KIND_MANIFEST);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest)
            .map_err(|source| CorpusError::Io { path: manifest.display().to_string(), source })?;
        let mut kinds = HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let bad = || CorpusError::Schema { path: manifest.display().to_string(), msg: format!("bad line {line:?}") };
            let mut parts = line.split_whitespace();
            let (id, kind) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
            kinds.insert(id.to_string(), kind.parse::<TaskKind>().map_err(|_| bad())?);
        }
        for t in &mut tasks {
            if let Some(&k) = kinds.get(&t.task_id) {
                t.kind = k;
                t.label_space = match k {
                    TaskKind::Classification => Some(label_space(&t.instances)),
                    TaskKind::Generation => None,
                };
            }
        }
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_task_loads_as_classification() {
        let raw = r#"{"Definition":["Output yes or no."],"Instances":[{"input":"a","output":["yes"]}]}"#;
        let t = parse_superni_task("t1", raw, "t1.json").unwrap();
        assert_eq!(t.definition_sentences, vec!["Output yes or no."]);
        assert_eq!(t.instances.len(), 1);
        assert_eq!(t.kind, TaskKind::Classification);
        assert_eq!(t.label_space, Some(vec!["yes".to_string()]));
    }

    #[test]
    fn missing_fields_are_named() {
        let err = parse_superni_task("t", r#"{"Instances":[]}"#, "t.json").unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { field: "Definition", .. }));
        let err = parse_superni_task("t", r#"{"Definition":["x."]}"#, "t.json").unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { field: "Instances", .. }));
        let err = parse_superni_task("t", r#"{"Definition":["x."],"Instances":[]}"#, "t.json").unwrap_err();
        assert!(matches!(err, CorpusError::EmptyTask { .. }));
    }

    #[test]
    fn definition_is_segmented() {
        let def = "Read the text. Is it positive? Answer now!";
        let raw = json!({"Definition": [def], "Instances": [{"input": "x", "output": ["y"]}]}).to_string();
        let t = parse_superni_task("t", &raw, "t.json").unwrap();
        assert_eq!(t.definition_sentences.len(), 3);
        assert_eq!(t.definition_sentences, segment_sentences(def));
    }

    #[test]
    fn many_distinct_outputs_make_generation() {
        let instances: Vec<Value> =
            (0..25).map(|i| json!({"input": format!("{i}"), "output": [format!("out {i}")]})).collect();
        let raw = json!({"Definition": ["Echo."], "Instances": instances}).to_string();
        let t = parse_superni_task("t", &raw, "t.json").unwrap();
        assert_eq!(t.kind, TaskKind::Generation);
        assert!(t.label_space.is_none());
    }

    #[test]
    fn manifest_overrides_kind() {
        let dir = tempfile::tempdir().unwrap();
        let raw = r#"{"Definition":["Say yes."],"Instances":[{"input":"a","output":["yes"]}]}"#;
        fs::write(dir.path().join("b.json"), raw).unwrap();
        fs::write(dir.path().join("a.json"), raw).unwrap();
        fs::write(dir.path().join(KIND_MANIFEST), "b generation\n").unwrap();
        let tasks = load_task_dir(dir.path()).unwrap();
        assert_eq!(tasks.iter().map(|t| t.task_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(tasks[0].kind, TaskKind::Classification);
        assert_eq!(tasks[1].kind, TaskKind::Generation);
    }
}
