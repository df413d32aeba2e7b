//! End-to-end tests of the `pickrank` binary. The file name sorts ahead of the
//! acceptance target so these still run when an acceptance criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = "d_model = 8\nn_layers = 1\nn_heads = 2\nffn_dim = 16\ngradcheck_elements = 1\n";

fn pickrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pickrank")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, tasks: usize, instances: usize) {
    let (t, i) = (format!("num_tasks={tasks}"), format!("instances_per_task={instances}"));
    ok(pickrank(&["synth-gen", "--out", p(dir), "--set", &t, "--set", &i]));
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{TINY}train_fraction = 0.5\ndev_fraction = 0.0\ntest_fraction = 0.5\n{extra}")).unwrap();
    path
}

fn log_lines(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("loss_log.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn synth_gen_is_loadable_and_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 4, 3);
    synth(&b, 4, 3);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4 + 3, "{names:?}");
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?} differs");
    }
    let tasks = pickrank::corpus::load_task_dir(&a).unwrap();
    assert_eq!(tasks.len(), 4);
    let planted = fs::read_to_string(a.join("planted_rules.jsonl")).unwrap();
    for (line, task) in planted.lines().zip(&tasks) {
        let v: Value = serde_json::from_str(line).unwrap();
        let idx = v["planted_rule_index"].as_u64().unwrap() as usize;
        assert_eq!(v["task_id"], task.task_id.as_str());
        assert_eq!(task.definition_sentences[idx], v["planted_rule"].as_str().unwrap());
    }
}

#[test]
fn synth_gen_rejects_single_instance_tasks() {
    let tmp = TempDir::new().unwrap();
    let out = pickrank(&["synth-gen", "--out", p(tmp.path()), "--set", "instances_per_task=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("instances_per_task"));
}

#[test]
fn train_smoke_writes_checkpoint_log_and_config_echo() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 4);
    let cfg = write_config(tmp.path(), "");
    let ck = tmp.path().join("ck");
    ok(pickrank(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ck), "--max-steps", "5"]));
    for f in ["params.bin", "optimizer.bin", "trainer.json", "vocab.txt", "model.cfg", "config.txt", "splits.json"] {
        assert!(ck.join(f).is_file(), "missing {f}");
    }
    let lines = log_lines(&ck);
    assert_eq!(lines.len(), 5);
    assert_eq!(lines.last().unwrap()["step"], 5);
    let echo = fs::read_to_string(ck.join("config.txt")).unwrap();
    assert!(echo.contains("d_model = 8") && echo.contains("objective = ranking_all"), "{echo}");
    assert!(!echo.contains("vocab_size"));
}

#[test]
fn objective_flag_controls_logged_terms() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 4);
    let cfg = write_config(tmp.path(), "");
    let (s1, all) = (tmp.path().join("s1"), tmp.path().join("all"));
    ok(pickrank(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&s1), "--max-steps", "4", "--objective", "strategy1_only"]));
    ok(pickrank(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&all), "--max-steps", "4", "--objective", "ranking_all"]));
    for l in log_lines(&s1) {
        for k in ["rank_origin", "rank_delete", "rank_null"] {
            assert_eq!(l[k], 0.0, "{l}");
        }
        assert!(l["f_origin"].is_null() && l["f_delete"].is_null() && l["f_null"].is_null(), "{l}");
        assert_eq!(l["total"], l["nll"]);
    }
    for l in log_lines(&all) {
        for k in ["f_repeat", "f_origin", "f_delete", "f_null"] {
            let f = l[k].as_f64().unwrap_or_else(|| panic!("{k} missing in {l}"));
            assert!((0.0..=1.0).contains(&f));
        }
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 4);
    let cfg = write_config(tmp.path(), "lr_pointer = 0.002\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(pickrank(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&a), "--max-steps", "4", "--set", "seed=7"]));
    let echo = a.join("config.txt");
    ok(pickrank(&["train", "--data", p(&data), "--config", p(&echo), "--out", p(&b), "--max-steps", "4"]));
    for f in ["loss_log.jsonl", "params.bin", "config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 2);
    let out = tmp.path().join("x");
    for set in ["vocab_size=10", "no_such_key=1", "lr_seq2seq=-1", "epochs=zero"] {
        let r = pickrank(&["train", "--data", p(&data), "--out", p(&out), "--set", set]);
        assert_eq!(r.status.code(), Some(2), "{set}: {}", String::from_utf8_lossy(&r.stderr));
    }
}

#[test]
fn eval_reports_missing_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 2);
    let missing = tmp.path().join("nope");
    let r = pickrank(&["eval", "--checkpoint", p(&missing), "--data", p(&data), "--out", p(&tmp.path().join("ev"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("no checkpoint"));
}

fn schema(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), schema(v))).collect()),
        Value::Array(a) => Value::Array(a.iter().take(1).map(schema).collect()),
        Value::Number(_) => Value::from("number"),
        Value::String(_) => Value::from("string"),
        Value::Bool(_) => Value::from("bool"),
        Value::Null => Value::Null,
    }
}

#[test]
fn both_select_modes_share_the_report_schema() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 3);
    let cfg = write_config(tmp.path(), "");
    let ck = tmp.path().join("ck");
    ok(pickrank(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ck), "--max-steps", "3"]));
    let mut reports = Vec::new();
    for mode in ["sampled", "argmax"] {
        let ev = tmp.path().join(mode);
        ok(pickrank(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&ev), "--select", mode, "--csv", "--plot", "--workers", "2"]));
        assert!(ev.join("report.csv").is_file() && ev.join("per_task.svg").is_file() && ev.join("loss.svg").is_file());
        let r: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
        assert_eq!(r["select"], mode);
        reports.push(r);
    }
    assert_eq!(schema(&reports[0]), schema(&reports[1]));
}

#[test]
fn inspect_selection_prints_valid_masks() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 3);
    let cfg = write_config(tmp.path(), "");
    let ck = tmp.path().join("ck");
    ok(pickrank(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ck), "--max-steps", "2"]));
    let task = data.join("synth_0000.json");
    let out = ok(pickrank(&["inspect-selection", "--checkpoint", p(&ck), "--task", p(&task)]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let hard: Vec<f64> = v["hard"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let pop = hard.iter().filter(|&&h| h == 1.0).count();
        assert!((1..=2).contains(&pop), "{hard:?}");
        assert!(hard.iter().all(|&h| h == 0.0 || h == 1.0));
        assert_eq!(v["candidates"].as_array().unwrap().len(), 5);
        let rep = v["repeat"].as_array().unwrap();
        assert_eq!(rep.iter().filter(|t| t["token"] == "[REP]").count(), 2);
        let del = v["delete"].as_array().unwrap();
        assert!(del.iter().all(|t| t["mask"].as_f64().is_some()));
    }
}

#[test]
fn overfit_checkpoint_scores_full_exact_match_on_its_task() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir_all(&data).unwrap();
    fs::write(
        data.join("only.json"),
        r#"{"Definition": ["Reply with the first symbol. The river paints green hills."],
            "Instances": [{"input": "k m n", "output": ["k"]}]}"#,
    )
    .unwrap();
    let cfg = tmp.path().join("run.cfg");
    let lrs = "lr_seq2seq = 0.003\nlr_pointer = 0.003\nlr_selector_encoder = 0.003\nepochs = 200\n";
    fs::write(&cfg, format!("{TINY}{lrs}train_fraction = 1.0\ndev_fraction = 0.0\ntest_fraction = 0.0\n")).unwrap();
    let ck = tmp.path().join("ck");
    ok(pickrank(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ck)]));
    let ev = tmp.path().join("ev");
    ok(pickrank(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&ev), "--split", "train"]));
    let r: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["per_task"]["only"]["value"], 100.0, "{r}");
    assert_eq!(r["aggregate"]["rouge_l_overall"], 100.0);
}
