use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use medcorr_core::corpus::{ClinicalNote, Dataset, GoldLabel, Record, Source, Split};
use medcorr_core::pipeline::{predictions_to_jsonl, CorrectionResult, Strategy};
use tempfile::TempDir;

fn medcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medcorr")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn record(id: &str, source: Source, topic: &str, gold: GoldLabel) -> Record {
    let note = ClinicalNote::new(id, source, [format!("Patient presents with {topic}."), format!("Treated for {topic}.")]).unwrap();
    Record { note, gold: Some(gold) }
}

fn records() -> Vec<Record> {
    vec![
        record("ms-1", Source::MS, "fever", GoldLabel::no_error()),
        record("ms-2", Source::MS, "stroke", GoldLabel::error(1, "Treated for ischemia.", Some("stroke".into()))),
        record("ms-3", Source::MS, "rash", GoldLabel::error(0, "Patient presents with hives.", Some("rash".into()))),
        record("uw-1", Source::UW, "cough", GoldLabel::no_error()),
        record("uw-2", Source::UW, "sepsis", GoldLabel::error(1, "Treated for bacteremia.", Some("sepsis".into()))),
    ]
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: tempfile::tempdir().unwrap() };
        let ds = Dataset::new(records(), Split::Valid).unwrap();
        fs::write(ws.path("valid.jsonl"), ds.to_jsonl()).unwrap();
        ws.write_mock(r#"{"incorrect_sentence_id": "1", "correction": "Treated for ischemia."}"#);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn write_mock(&self, default: &str) {
        let script = serde_json::json!({"responses": {}, "default_response": default});
        fs::write(self.path("mock.json"), script.to_string()).unwrap();
    }

    fn config(&self, strategy: &str) -> String {
        let text = format!(
            r#"[paths]
valid = {valid:?}
predictions = {pred:?}
mock_script = {mock:?}

[run]
split = "valid"

[strategy]
strategy = "{strategy}"

[strategy.prompt]
shots = 0
"#,
            valid = self.arg("valid.jsonl"),
            pred = self.arg("pred.jsonl"),
            mock = self.arg("mock.json"),
        );
        fs::write(self.path("run.toml"), text).unwrap();
        self.arg("run.toml")
    }
}

#[test]
fn ingest_reports_counts_per_source() {
    let ws = Workspace::new();
    let out = medcorr(&["ingest", &ws.arg("valid.jsonl"), "--split", "valid", "--json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["total"], 5);
    assert_eq!(summary["per_source"]["MS"]["with_error"], 2);
    assert_eq!(summary["per_source"]["UW"]["no_error"], 1);
    let text = medcorr(&["ingest", &ws.arg("valid.jsonl"), "--split", "valid"]);
    assert!(stdout(&text).starts_with("5 notes"));
}

#[test]
fn empty_or_malformed_data_exits_with_data_error() {
    let ws = Workspace::new();
    fs::write(ws.path("empty.jsonl"), "").unwrap();
    assert_eq!(code(&medcorr(&["ingest", &ws.arg("empty.jsonl")])), 2);
    fs::write(ws.path("bad.jsonl"), "{not json}\n").unwrap();
    assert_eq!(code(&medcorr(&["ingest", &ws.arg("bad.jsonl")])), 2);
    assert_eq!(code(&medcorr(&["ingest", &ws.arg("missing.jsonl")])), 2);
}

#[test]
fn usage_errors_exit_with_one() {
    let ws = Workspace::new();
    assert_eq!(code(&medcorr(&["no-such-command"])), 1);
    assert_eq!(code(&medcorr(&["sensitivity", "bogus"])), 1);
    assert_eq!(code(&medcorr(&["ingest", &ws.arg("valid.jsonl"), "--split", "holdout"])), 1);
    // hybrid needs a span predictor
    let cfg = ws.config("hybrid");
    let out = medcorr(&["predict", "-c", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("predictor"));
    assert_eq!(code(&medcorr(&["predict", "-c", &cfg, "--set", "strategy.prompt.persona=pirate"])), 1);
    assert_eq!(code(&medcorr(&["--help"])), 0);
}

#[test]
fn predict_writes_identical_outputs_on_rerun() {
    let ws = Workspace::new();
    let cfg = ws.config("e2e");
    let first = medcorr(&["predict", "-c", &cfg]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let a = fs::read(ws.path("pred.jsonl")).unwrap();
    let manifest_a: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("pred.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(code(&medcorr(&["predict", "-c", &cfg])), 0);
    let b = fs::read(ws.path("pred.jsonl")).unwrap();
    assert_eq!(a, b);
    let manifest_b: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("pred.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest_a["config_hash"], manifest_b["config_hash"]);
    assert_eq!(manifest_a["n_notes"], 5);
    assert!(ws.path("pred.jsonl.config.toml").exists());

    // a semantic override changes the hash; a transport one does not
    assert_eq!(code(&medcorr(&["predict", "-c", &cfg, "--set", "backend.max_retries=9"])), 0);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("pred.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config_hash"], manifest_a["config_hash"]);
    assert_eq!(code(&medcorr(&["predict", "-c", &cfg, "--set", "strategy.prompt.type_hint=false"])), 0);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("pred.jsonl.manifest.json")).unwrap()).unwrap();
    assert_ne!(m["config_hash"], manifest_a["config_hash"]);
}

#[test]
fn predict_exits_three_above_the_failure_ceiling() {
    let ws = Workspace::new();
    fs::write(ws.path("mock.json"), r#"{"responses": {}}"#).unwrap();
    let cfg = ws.config("e2e");
    let out = medcorr(&["predict", "-c", &cfg]);
    assert_eq!(code(&out), 3);
    // predictions are still written for inspection
    assert_eq!(fs::read_to_string(ws.path("pred.jsonl")).unwrap().lines().count(), 5);
    assert_eq!(code(&medcorr(&["predict", "-c", &cfg, "--set", "run.failure_ceiling=1.0"])), 0);
}

fn gold_predictions(ws: &Workspace) -> String {
    let preds: Vec<CorrectionResult> = records()
        .into_iter()
        .map(|r| {
            let g = r.gold.unwrap();
            let base = CorrectionResult::no_error(r.note.note_id(), Strategy::E2e, "");
            if g.has_error() {
                CorrectionResult { error_flag: 1, error_sid: g.error_sid, correction: g.corrected_sentence.unwrap(), ..base }
            } else {
                base
            }
        })
        .collect();
    fs::write(ws.path("gold_pred.jsonl"), predictions_to_jsonl(&preds)).unwrap();
    ws.arg("gold_pred.jsonl")
}

#[test]
fn evaluate_scores_perfect_predictions_as_one() {
    let ws = Workspace::new();
    let preds = gold_predictions(&ws);
    let out = medcorr(&["evaluate", "--predictions", &preds, "--gold", &ws.arg("valid.jsonl"), "--out", &ws.arg("report.json")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    for key in ["acc_flag", "acc_sent_id", "rouge1"] {
        assert_eq!(report["macro"][key], 1.0, "{key}");
    }
    assert_eq!(report["n_items"], 5);
    // predictions for a different note set do not align
    fs::write(ws.path("short.jsonl"), fs::read_to_string(&preds).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(code(&medcorr(&["evaluate", "--predictions", &ws.arg("short.jsonl"), "--gold", &ws.arg("valid.jsonl")])), 2);
}

#[test]
fn position_analysis_writes_report_and_quartiles() {
    let ws = Workspace::new();
    let preds = gold_predictions(&ws);
    let out_dir = ws.arg("position");
    let out = medcorr(&["sensitivity", "position", "--predictions", &preds, "--gold", &ws.arg("valid.jsonl"), "--out-dir", &out_dir]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(ws.path("position/position_quartiles.csv")).unwrap();
    assert!(csv.starts_with("bin,n,min,q1,median,q3,max,mean\n"));
    assert_eq!(csv.lines().count(), 4);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("position/position.json")).unwrap()).unwrap();
    assert!(report["skipped"].is_string(), "three error notes cannot fill every bin twice");
    assert_eq!(
        code(&medcorr(&["sensitivity", "position", "--predictions", &preds, "--gold", &ws.arg("valid.jsonl"), "--out-dir", &out_dir, "--adjustment", "holm"])),
        1
    );
}

#[test]
fn role_sweep_writes_seven_rows() {
    let ws = Workspace::new();
    let cfg = ws.config("e2e");
    let out = medcorr(&["sensitivity", "roles", "-c", &cfg, "--out-dir", &ws.arg("roles")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = fs::read_to_string(ws.path("roles/roles.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    let metrics: Vec<&str> = rows.iter().map(|r| r.split_once('\t').unwrap().1).collect();
    assert!(metrics.iter().all(|m| *m == metrics[0]));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("roles/roles.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 7);

    let two = medcorr(&["sensitivity", "roles", "-c", &cfg, "--roles", "nurse,clinician", "--out-dir", &ws.arg("roles2")]);
    assert_eq!(code(&two), 0);
    assert_eq!(fs::read_to_string(ws.path("roles2/roles.tsv")).unwrap().lines().count(), 3);
}

#[test]
fn mcq_position_runs_both_placements() {
    let ws = Workspace::new();
    ws.write_mock(r#"{"option": "influenza", "Answer": "A"}"#);
    let cfg = ws.config("mcq");
    let out = medcorr(&[
        "sensitivity", "mcq-position", "-c", &cfg,
        "--set", "strategy.mcq.total_options=2", "--set", "strategy.mcq.injected_index=0",
        "--set", "strategy.predictor.kind=gold_oracle",
        "--out-dir", &ws.arg("mcq"),
    ]);
    // no-error notes have no span to blank and count as failures
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(matches!(code(&out), 0 | 3), "{stderr}");
    let tsv = fs::read_to_string(ws.path("mcq/mcq_position.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = tsv.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[1][0]), ("0", "1"));
    assert_ne!(rows[0][1], rows[1][1], "moving the span should flip the always-A answers");
}

#[test]
fn span_export_round_trip() {
    let ws = Workspace::new();
    let out = medcorr(&["span-export", "squad", "--input", &ws.arg("valid.jsonl"), "--split", "valid", "--out", &ws.arg("squad.jsonl")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let squad: Vec<serde_json::Value> =
        fs::read_to_string(ws.path("squad.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(squad.len(), 3);
    let mut offline = String::new();
    for rec in &squad {
        let context = rec["context"].as_str().unwrap();
        let text = rec["answers"]["text"][0].as_str().unwrap();
        let start = rec["answers"]["answer_start"][0].as_u64().unwrap() as usize;
        let sliced: String = context.chars().skip(start).take(text.chars().count()).collect();
        assert_eq!(sliced, text);
        let line = serde_json::json!({"note_id": rec["id"], "text": text, "start": start, "end": start + text.chars().count()});
        offline.push_str(&(line.to_string() + "\n"));
    }
    fs::write(ws.path("spans.jsonl"), &offline).unwrap();
    let out = medcorr(&["span-export", "import", "--predictions", &ws.arg("spans.jsonl"), "--input", &ws.arg("valid.jsonl")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("EM 100.00"));

    fs::write(ws.path("bad_spans.jsonl"), r#"{"note_id": "ms-2", "text": "nope", "start": 0, "end": 4}"#).unwrap();
    let bad = medcorr(&["span-export", "import", "--predictions", &ws.arg("bad_spans.jsonl"), "--input", &ws.arg("valid.jsonl")]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn reason_bank_requires_a_reasoning_style() {
    let ws = Workspace::new();
    fs::copy(ws.path("valid.jsonl"), ws.path("train.jsonl")).unwrap();
    let cfg = ws.config("e2e");
    let train = format!("paths.train={:?}", ws.arg("train.jsonl"));
    let bank = format!("paths.reason_bank={:?}", ws.arg("bank.jsonl"));
    let args = vec!["reason-bank", "-c", &cfg, "--set", &train, "--set", &bank];
    let mut none = args.clone();
    none.extend(["--style", "None"]);
    assert_eq!(code(&medcorr(&none)), 1);
    let mut soap = args.clone();
    soap.extend(["--style", "SOAP"]);
    let out = medcorr(&soap);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(ws.path("bank.jsonl")).unwrap().lines().count(), 5);
    assert!(stdout(&medcorr(&soap)).contains("5 already present, 0 requested"));
}
