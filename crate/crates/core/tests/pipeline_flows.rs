mod common;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use common::{asthma_record, fixture, simple_record, stroke_record};
use medcorr_core::corpus::{Dataset, GoldLabel, Record, Source, Split};
use medcorr_core::gateway::{AttemptError, BackendConfig, FnBackend, Gateway, MockScript};
use medcorr_core::pipeline::{
    build_icl_bank, load_reason_bank, predictions_to_jsonl, render_e2e_for, run_dataset, run_e2e, run_note,
    ExampleStore, PipelineError, PredictorChoice, RunContext, RunOptions, Strategy, StrategyConfig,
};
use medcorr_core::prompt::{ChatMessage, CotStyle, Persona, PromptSpec, ReasonEntry};
use medcorr_core::retrieval::Bm25Params;
use medcorr_core::span::SpanPredictor;

fn cfg() -> BackendConfig {
    BackendConfig { backoff_base_ms: 1, max_retries: 0, ..BackendConfig::inference() }
}

fn fn_gateway(f: impl Fn(&[ChatMessage]) -> Result<String, AttemptError> + Send + Sync + 'static) -> Gateway {
    Gateway::new(Arc::new(FnBackend(f)), cfg()).unwrap()
}

fn ctx<'a>(gateway: &'a Gateway, store: Option<&'a ExampleStore>, predictor: &'a SpanPredictor) -> RunContext<'a> {
    RunContext { gateway, store, predictor, split: Split::Valid }
}

fn zero_shot() -> PromptSpec {
    PromptSpec { persona: Persona::ClinicianAssistant, shots: 0, cot_style: CotStyle::Brief, type_hint: true, span_hint: None }
}

fn c1_gateway() -> Gateway {
    let mut script = MockScript::new();
    script.insert(&[ChatMessage::system(fixture("c1_system.txt")), ChatMessage::user(fixture("c1_query.txt"))], fixture("c1_answer.json"));
    Gateway::mock(script, cfg()).unwrap()
}

#[test]
fn scripted_exchange_yields_the_correction() {
    let gw = c1_gateway();
    let rec = stroke_record();
    let strategy = StrategyConfig::hybrid(zero_shot(), PredictorChoice::GoldOracle);
    let result = run_e2e(&rec, &strategy, &ctx(&gw, None, &SpanPredictor::GoldOracle)).unwrap();
    assert_eq!(result.error_flag, 1);
    assert_eq!(result.error_sid, 4);
    assert_eq!(result.correction, rec.gold.unwrap().corrected_sentence.unwrap());
    assert!(result.reason.unwrap().starts_with("The mention of 'CTA of the head'"));
    assert_eq!(result.raw_response, fixture("c1_answer.json"));
    assert!(result.diagnostic.is_none());
}

#[test]
fn gold_oracle_is_refused_on_test_notes() {
    let gw = c1_gateway();
    let strategy = StrategyConfig::hybrid(zero_shot(), PredictorChoice::GoldOracle);
    let predictor = SpanPredictor::GoldOracle;
    let c = RunContext { split: Split::Test, ..ctx(&gw, None, &predictor) };
    assert!(matches!(run_e2e(&stroke_record(), &strategy, &c), Err(PipelineError::Span(_))));
}

#[test]
fn garbage_output_falls_back_to_no_error() {
    let gw = Gateway::mock(MockScript::with_default("I am unable to review this note."), cfg()).unwrap();
    let strategy = StrategyConfig::e2e(zero_shot());
    let r = run_e2e(&stroke_record(), &strategy, &ctx(&gw, None, &SpanPredictor::None)).unwrap();
    assert_eq!((r.error_flag, r.error_sid, r.correction.as_str()), (0, -1, "NA"));
    assert!(r.diagnostic.is_some());
    assert!(r.is_consistent());
}

#[test]
fn out_of_range_sentence_id_falls_back() {
    let reply = r#"{"incorrect_sentence_id": "42", "correction": "Something else."}"#;
    let gw = Gateway::mock(MockScript::with_default(reply), cfg()).unwrap();
    let r = run_e2e(&stroke_record(), &StrategyConfig::e2e(zero_shot()), &ctx(&gw, None, &SpanPredictor::None)).unwrap();
    assert_eq!((r.error_flag, r.error_sid, r.correction.as_str()), (0, -1, "NA"));
}

fn mcq_gateway(answer: &str) -> Gateway {
    let mut script = MockScript::new();
    script.insert(&[ChatMessage::user(fixture("c2_1.txt"))], r#"{"option": "asthma"}"#);
    script.insert(&[ChatMessage::user(fixture("c3_1.txt"))], answer);
    Gateway::mock(script, cfg()).unwrap()
}

#[test]
fn mcq_choosing_the_alternative_flags_the_sentence() {
    let gw = mcq_gateway(r#"{"Answer": "A. asthma"}"#);
    let strategy = StrategyConfig::mcq(2, 1, PredictorChoice::GoldOracle);
    let r = run_note(&asthma_record(), &strategy, &ctx(&gw, None, &SpanPredictor::GoldOracle)).unwrap();
    assert_eq!(r.strategy, Strategy::Mcq);
    assert_eq!((r.error_flag, r.error_sid, r.correction.as_str()), (1, 8, "Suspected of asthma."));
}

#[test]
fn mcq_choosing_the_original_span_means_no_error() {
    for answer in [r#"{"Answer": "B"}"#, r#"{"Answer": "primary ciliary dyskinesia"}"#, "B. primary ciliary dyskinesia"] {
        let gw = mcq_gateway(answer);
        let strategy = StrategyConfig::mcq(2, 1, PredictorChoice::GoldOracle);
        let r = run_note(&asthma_record(), &strategy, &ctx(&gw, None, &SpanPredictor::GoldOracle)).unwrap();
        assert_eq!((r.error_flag, r.error_sid, r.correction.as_str()), (0, -1, "NA"), "{answer}");
        assert!(r.diagnostic.is_none());
    }
}

#[test]
fn mcq_unusable_answer_falls_back() {
    let gw = mcq_gateway(r#"{"Answer": "E"}"#);
    let strategy = StrategyConfig::mcq(2, 1, PredictorChoice::GoldOracle);
    let r = run_note(&asthma_record(), &strategy, &ctx(&gw, None, &SpanPredictor::GoldOracle)).unwrap();
    assert_eq!((r.error_flag, r.error_sid), (0, -1));
    assert!(r.diagnostic.is_some());
}

#[test]
fn mcq_without_generated_options_falls_back() {
    let mut script = MockScript::new();
    script.insert(&[ChatMessage::user(fixture("c2_1.txt"))], "no idea");
    let gw = Gateway::mock(script, cfg()).unwrap();
    let strategy = StrategyConfig::mcq(2, 1, PredictorChoice::GoldOracle);
    let r = run_note(&asthma_record(), &strategy, &ctx(&gw, None, &SpanPredictor::GoldOracle)).unwrap();
    assert_eq!((r.error_flag, r.error_sid), (0, -1));
    assert!(r.diagnostic.unwrap().contains("option"));
}

#[test]
fn injected_position_moves_the_span_but_keeps_the_options() {
    let seen: Arc<Mutex<Vec<String>>> = Arc::default();
    let log = Arc::clone(&seen);
    let gw = fn_gateway(move |m| {
        let text = &m[0].content;
        if text.contains("be replaced with if") {
            Ok(r#"{"option_1": "asthma", "option_2": "bronchiolitis", "option_3": "pulmonary embolism"}"#.into())
        } else {
            log.lock().unwrap().push(text.clone());
            Ok(r#"{"Answer": "A"}"#.into())
        }
    });
    let rec = asthma_record();
    for idx in 0..4 {
        let strategy = StrategyConfig::mcq(4, idx, PredictorChoice::GoldOracle);
        let r = run_note(&rec, &strategy, &ctx(&gw, None, &SpanPredictor::GoldOracle)).unwrap();
        assert_eq!(r.error_flag, u8::from(idx != 0), "index {idx}");
    }
    let questions = seen.lock().unwrap();
    let option_lines = |q: &str| -> Vec<String> {
        q.split("Options:\n\n").nth(1).unwrap().lines().map(str::to_string).collect()
    };
    let texts = |q: &str| -> BTreeSet<String> { option_lines(q).iter().map(|l| l[3..].to_string()).collect() };
    let first = texts(&questions[0]);
    assert_eq!(first.len(), 4);
    for (idx, q) in questions.iter().enumerate() {
        assert_eq!(texts(q), first);
        let letter = (b'A' + idx as u8) as char;
        assert_eq!(option_lines(q)[idx], format!("{letter}. primary ciliary dyskinesia"));
    }
}

#[test]
fn hybrid_without_a_span_renders_the_e2e_prompt() {
    let gw = Gateway::mock(MockScript::with_default("{}"), cfg()).unwrap();
    let rec = stroke_record();
    let none = SpanPredictor::None;
    let e2e = render_e2e_for(&rec, &StrategyConfig::e2e(zero_shot()), &ctx(&gw, None, &none)).unwrap();
    let hybrid = render_e2e_for(&rec, &StrategyConfig::hybrid(zero_shot(), PredictorChoice::None), &ctx(&gw, None, &none)).unwrap();
    assert_eq!(e2e, hybrid);
    let oracle = render_e2e_for(&rec, &StrategyConfig::hybrid(zero_shot(), PredictorChoice::GoldOracle), &ctx(&gw, None, &SpanPredictor::GoldOracle)).unwrap();
    assert_ne!(e2e, oracle);
    assert_eq!(oracle[1].content, fixture("c1_query.txt"));
}

fn pool(n: usize, offset: usize) -> Vec<Record> {
    let topics = ["fever and cough", "renal failure", "acute stroke", "skin rash", "chest pain"];
    (offset..offset + n)
        .map(|i| {
            let t = topics[i % topics.len()];
            let gold = if i % 3 == 0 { GoldLabel::no_error() } else { GoldLabel::error(1, format!("Treated for {t} again {i}."), None) };
            simple_record(&format!("tr-{i:04}"), Source::MS, &[&format!("Patient {i} presents with {t}."), &format!("Treated for {t} {i}.")], gold)
        })
        .collect()
}

fn bank_for(records: &[Record], style: CotStyle) -> Vec<ReasonEntry> {
    records.iter().map(|r| ReasonEntry { note_id: r.id().into(), reason_style: style, reason: format!("reason for {}", r.id()) }).collect()
}

#[test]
fn few_shot_examples_come_from_the_store_with_reasons() {
    let train = pool(12, 0);
    let bank = bank_for(&train[..6], CotStyle::Brief);
    let store = ExampleStore::new(train.clone(), &bank, Bm25Params::default()).unwrap();
    let gw = Gateway::mock(MockScript::with_default("{}"), cfg()).unwrap();
    let spec = PromptSpec { shots: 2, ..zero_shot() };
    let target = &train[0];
    let msgs = render_e2e_for(target, &StrategyConfig::e2e(spec.clone()), &ctx(&gw, Some(&store), &SpanPredictor::None)).unwrap();
    assert_eq!(msgs.len(), 6);
    for pair in [&msgs[1..3], &msgs[3..5]] {
        assert!(!pair[0].content.contains(&format!("Patient 0 presents")), "an example repeats the note itself");
        let answer: serde_json::Value = serde_json::from_str(&pair[1].content).unwrap();
        let reason = answer["reason"].as_str().unwrap();
        let id: usize = reason.trim_start_matches("reason for tr-").parse().unwrap();
        assert!(id < 6 && id != 0);
    }
    // six reasons minus the note itself leaves five; eight shots cannot be met
    let eight = PromptSpec { shots: 8, ..spec };
    let err = render_e2e_for(target, &StrategyConfig::e2e(eight), &ctx(&gw, Some(&store), &SpanPredictor::None)).unwrap_err();
    assert!(matches!(err, PipelineError::NotEnoughExamples { needed: 8, available: 5, .. }), "{err}");
    // without a store few-shot is impossible
    let two = PromptSpec { shots: 2, ..zero_shot() };
    assert!(matches!(render_e2e_for(target, &StrategyConfig::e2e(two), &ctx(&gw, None, &SpanPredictor::None)), Err(PipelineError::NoExampleStore)));
}

fn answering_backend(m: &[ChatMessage]) -> Result<String, AttemptError> {
    let query = &m.last().unwrap().content;
    if query.contains("renal") {
        return Err(AttemptError::Rejected { status: 400, message: "content filter".into() });
    }
    if query.contains("stroke") {
        return Ok(r#"{"incorrect_sentence_id": "1", "correction": "Treated for stroke carefully."}"#.into());
    }
    Ok(r#"{"incorrect_sentence_id": "-1", "correction": "NA"}"#.into())
}

#[test]
fn dataset_runs_are_byte_identical_across_reruns() {
    let ds = Dataset::new(pool(25, 100), Split::Valid).unwrap();
    let strategy = StrategyConfig::e2e(zero_shot());
    let run = || {
        let gw = fn_gateway(answering_backend);
        run_dataset(&ds, &strategy, &ctx(&gw, None, &SpanPredictor::None), RunOptions::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(predictions_to_jsonl(&a.results), predictions_to_jsonl(&b.results));
    assert_eq!(a.manifest.config_hash, b.manifest.config_hash);
    let ids: Vec<&str> = a.results.iter().map(|r| r.note_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    let stroke = a.results.iter().find(|r| r.note_id == "tr-0102").unwrap();
    assert_eq!((stroke.error_flag, stroke.error_sid), (1, 1));
    // renal notes (every fifth) are rejected and counted as failures
    assert_eq!(a.manifest.failure_count, 5);
    assert_eq!(a.manifest.fallback_count, 5);
    assert!(!a.manifest.ceiling_exceeded);
    let strict = RunOptions { failure_ceiling: 0.1 };
    let gw = fn_gateway(answering_backend);
    assert!(run_dataset(&ds, &strategy, &ctx(&gw, None, &SpanPredictor::None), strict).unwrap().manifest.ceiling_exceeded);
}

#[test]
fn reason_bank_resumes_with_only_missing_records() {
    let train = Dataset::new(pool(130, 0), Split::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.jsonl");
    let mut text: String = bank_for(&train.records()[..100], CotStyle::Long)
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect();
    // a line cut short by an interrupted run
    text.push_str(r#"{"note_id": "tr-01"#);
    std::fs::write(&path, text).unwrap();

    let calls = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&calls);
    let gw = fn_gateway(move |_| {
        counter.fetch_add(1, Ordering::SeqCst);
        Ok("  generated reason  ".into())
    });
    let report = build_icl_bank(&train, CotStyle::Long, &gw, &path).unwrap();
    assert_eq!((report.total, report.already_present, report.requested, report.completed), (130, 100, 30, 30));
    assert_eq!(calls.load(Ordering::SeqCst), 30);

    let bank = load_reason_bank(&path).unwrap();
    assert_eq!(bank.len(), 130);
    let ids: Vec<&str> = bank.iter().map(|e| e.note_id.as_str()).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(bank.last().unwrap().reason, "generated reason");

    // a second pass has nothing left to do; another style starts over
    let again = build_icl_bank(&train, CotStyle::Long, &gw, &path).unwrap();
    assert_eq!(again.requested, 0);
    assert_eq!(calls.load(Ordering::SeqCst), 30);
    let soap = build_icl_bank(&train, CotStyle::Soap, &gw, &path).unwrap();
    assert_eq!(soap.requested, 130);
    assert_eq!(load_reason_bank(&path).unwrap().len(), 260);
}
