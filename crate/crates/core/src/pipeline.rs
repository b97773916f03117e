//! The three correction strategies, output parsing, reason-bank construction
//! and the bounded-parallel dataset runner.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{ClinicalNote, Dataset, Record, Split};
use crate::gateway::{BackendConfig, Gateway, GatewayError};
use crate::prompt::{
    assemble_options, blank_out_span, expected_option_keys, render_e2e_prompt, render_mcq_option_request,
    render_mcq_question, render_reason_request, CotStyle, IclExample, PromptError, PromptSpec, ReasonEntry, BLANK,
    TEMPLATE_VERSION,
};
use crate::retrieval::{Bm25Index, Bm25Params, RetrievalError};
use crate::span::{SpanError, SpanPredictor};

pub const NO_CORRECTION: &str = "NA";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid strategy configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Span(#[from] SpanError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("no span prediction for note {0}")]
    NoSpan(String),
    #[error("needed {needed} in-context examples for note {note_id}, only {available} available")]
    NotEnoughExamples { note_id: String, needed: usize, available: usize },
    #[error("record {0} has no gold label")]
    MissingGold(String),
    #[error("the strategy needs an example store")]
    NoExampleStore,
    #[error("bank line {line}: {message}")]
    Bank { line: usize, message: String },
    #[error("predictions line {line}: {message}")]
    Predictions { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    E2e,
    Mcq,
    Hybrid,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::E2e => "e2e",
            Strategy::Mcq => "mcq",
            Strategy::Hybrid => "hybrid",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "e2e" => Ok(Strategy::E2e),
            "mcq" => Ok(Strategy::Mcq),
            "hybrid" => Ok(Strategy::Hybrid),
            _ => Err(format!("unknown strategy `{s}` (expected e2e, mcq or hybrid)")),
        }
    }
}

/// One prediction. `error_flag = 0`, `error_sid = -1` and `correction = "NA"`
/// always hold together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub note_id: String,
    pub error_flag: u8,
    pub error_sid: i64,
    pub correction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub raw_response: String,
    pub strategy: Strategy,
    /// Why the result is a fallback, when it is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl CorrectionResult {
    pub fn no_error(note_id: impl Into<String>, strategy: Strategy, raw: impl Into<String>) -> Self {
        Self {
            note_id: note_id.into(),
            error_flag: 0,
            error_sid: -1,
            correction: NO_CORRECTION.into(),
            reason: None,
            raw_response: raw.into(),
            strategy,
            diagnostic: None,
        }
    }

    /// The "as if no error was found" result, tagged with what went wrong.
    pub fn fallback(note_id: impl Into<String>, strategy: Strategy, raw: impl Into<String>, why: impl Into<String>) -> Self {
        Self { diagnostic: Some(why.into()), ..Self::no_error(note_id, strategy, raw) }
    }

    pub fn is_consistent(&self) -> bool {
        let none = (self.error_flag == 0, self.error_sid == -1, self.correction == NO_CORRECTION);
        matches!(none, (true, true, true)) || (self.error_flag == 1 && self.error_sid >= 0 && self.correction != NO_CORRECTION)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorChoice {
    None,
    GoldOracle,
    Offline { path: String },
    Remote { url: String, timeout_secs: u64 },
}

impl PredictorChoice {
    pub fn is_none(&self) -> bool {
        matches!(self, PredictorChoice::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct McqConfig {
    /// Options shown to the model, the predicted span included.
    pub total_options: usize,
    pub injected_index: usize,
}

impl McqConfig {
    pub fn generated_options(&self) -> usize {
        self.total_options - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub prompt: PromptSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcq: Option<McqConfig>,
    pub predictor: PredictorChoice,
    pub bm25: Bm25Params,
    /// On test runs, also draw examples from the validation sets.
    pub include_validation_pool: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::e2e(PromptSpec::default())
    }
}

impl StrategyConfig {
    pub fn e2e(prompt: PromptSpec) -> Self {
        Self {
            strategy: Strategy::E2e,
            prompt,
            mcq: None,
            predictor: PredictorChoice::None,
            bm25: Bm25Params::default(),
            include_validation_pool: false,
        }
    }

    pub fn hybrid(prompt: PromptSpec, predictor: PredictorChoice) -> Self {
        Self { strategy: Strategy::Hybrid, predictor, ..Self::e2e(prompt) }
    }

    pub fn mcq(total_options: usize, injected_index: usize, predictor: PredictorChoice) -> Self {
        Self {
            strategy: Strategy::Mcq,
            mcq: Some(McqConfig { total_options, injected_index }),
            predictor,
            ..Self::e2e(PromptSpec::default())
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        match (self.strategy, &self.mcq) {
            (Strategy::Mcq, None) => return bad("strategy mcq requires mcq settings".into()),
            (Strategy::Mcq, Some(m)) => {
                if !matches!(m.total_options, 2 | 4) {
                    return bad(format!("mcq total_options must be 2 or 4, got {}", m.total_options));
                }
                if m.injected_index >= m.total_options {
                    return bad(format!(
                        "mcq injected_index {} must be below total_options {}",
                        m.injected_index, m.total_options
                    ));
                }
            }
            (s, Some(_)) => return bad(format!("mcq settings are only valid for strategy mcq, not {s}")),
            (_, None) => {}
        }
        if matches!(self.strategy, Strategy::Hybrid | Strategy::Mcq) && self.predictor.is_none() {
            return bad(format!("strategy {} requires a span predictor", self.strategy));
        }
        if self.strategy == Strategy::E2e && self.prompt.span_hint.is_some() {
            return bad("a fixed span hint is not allowed; the hybrid strategy sets it per note".into());
        }
        if !self.prompt.is_replication_shot_count() {
            log::warn!("shot count {} is outside the replicated grid 0/2/4/8", self.prompt.shots);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Output parsing

/// Strips a Markdown code fence (with optional language tag) if present.
fn unwrap_fence(raw: &str) -> &str {
    let Some(open) = raw.find("```") else { return raw };
    let after = &raw[open + 3..];
    let tag = after.len() - after.trim_start_matches(|c: char| c.is_ascii_alphanumeric()).len();
    let body = &after[tag..];
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

/// The first balanced `{...}` in `text`, honouring JSON string escapes.
fn first_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn strip_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            out.push(c);
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        if c == '"' {
            in_str = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Extracts a JSON object from model output: unwraps code fences, takes the
/// first balanced object and tolerates trailing commas.
pub fn extract_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let body = unwrap_fence(raw);
    let candidate = first_object(body).or_else(|| first_object(raw))?;
    let parsed = serde_json::from_str::<Value>(candidate)
        .or_else(|_| serde_json::from_str::<Value>(&strip_trailing_commas(candidate)))
        .ok()?;
    match parsed {
        Value::Object(map) => Some(map),
        _ => None,
    }
}

fn field<'a>(map: &'a serde_json::Map<String, Value>, key: &str) -> Option<&'a Value> {
    map.get(key).or_else(|| map.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(_, v)| v))
}

fn as_sid(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n.as_i64().or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn as_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Null => None,
        other => Some(other.to_string()),
    }
}

/// Parses an end-to-end answer. Anything unusable becomes the fallback result.
pub fn parse_llm_json(raw: &str, note: &ClinicalNote, strategy: Strategy) -> CorrectionResult {
    let id = note.note_id();
    let fail = |why: String| {
        log::warn!("note {id}: {why}; using fallback");
        CorrectionResult::fallback(id, strategy, raw, why)
    };
    let Some(map) = extract_json_object(raw) else {
        return fail("response is not JSON-parseable".into());
    };
    let reason = field(&map, "reason").and_then(as_text);
    let Some(sid) = field(&map, "incorrect_sentence_id").and_then(as_sid) else {
        return fail("missing or non-numeric incorrect_sentence_id".into());
    };
    if sid == -1 {
        return CorrectionResult { reason, ..CorrectionResult::no_error(id, strategy, raw) };
    }
    if sid < 0 || sid as usize >= note.len() {
        return fail(format!("incorrect_sentence_id {sid} is not a sentence of the note"));
    }
    let correction = field(&map, "correction").and_then(as_text).map(|c| c.trim().to_string());
    match correction {
        Some(c) if !c.is_empty() && c != NO_CORRECTION => CorrectionResult {
            note_id: id.to_string(),
            error_flag: 1,
            error_sid: sid,
            correction: c,
            reason,
            raw_response: raw.to_string(),
            strategy,
            diagnostic: None,
        },
        _ => fail(format!("sentence {sid} flagged without a usable correction")),
    }
}

// ---------------------------------------------------------------------------
// Example store

/// Retrieval pool for in-context examples, with gold labels and reasons.
pub struct ExampleStore {
    index: Bm25Index,
    records: HashMap<String, Record>,
    reasons: HashMap<(String, CotStyle), String>,
}

impl ExampleStore {
    pub fn new(pool: Vec<Record>, bank: &[ReasonEntry], params: Bm25Params) -> Result<Self, PipelineError> {
        let index = Bm25Index::build(pool.iter().map(|r| (r.id().to_string(), r.note.plain_text())), params)?;
        Self::with_index(pool, bank, index)
    }

    /// Uses a prebuilt (e.g. cached) index over the same pool.
    pub fn with_index(pool: Vec<Record>, bank: &[ReasonEntry], index: Bm25Index) -> Result<Self, PipelineError> {
        let mut records = HashMap::new();
        for r in pool {
            if r.gold.is_none() {
                return Err(PipelineError::MissingGold(r.id().to_string()));
            }
            records.insert(r.id().to_string(), r);
        }
        if index.len() != records.len() || index.doc_ids().any(|d| !records.contains_key(d)) {
            return Err(PipelineError::Config("index does not cover the example pool".into()));
        }
        let reasons = bank
            .iter()
            .filter(|e| records.contains_key(&e.note_id))
            .map(|e| ((e.note_id.clone(), e.reason_style), e.reason.clone()))
            .collect();
        Ok(Self { index, records, reasons })
    }

    /// Pool built from every given dataset, in order.
    pub fn from_datasets(datasets: &[&Dataset], bank: &[ReasonEntry], params: Bm25Params) -> Result<Self, PipelineError> {
        let pool = datasets.iter().flat_map(|d| d.records().iter().cloned()).collect();
        Self::new(pool, bank, params)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }

    /// The `spec.shots` best-ranked examples for `note`, never `note` itself.
    /// Under chain of thought, candidates without a reason in that style are skipped.
    pub fn examples_for(&self, note: &ClinicalNote, spec: &PromptSpec) -> Result<Vec<IclExample>, PipelineError> {
        if spec.shots == 0 {
            return Ok(Vec::new());
        }
        let exclude = HashSet::from([note.note_id().to_string()]);
        let ranked = self.index.top_k(&note.plain_text(), self.index.len(), &exclude);
        let mut out = Vec::with_capacity(spec.shots);
        for (id, _) in ranked {
            let rec = &self.records[&id];
            let gold = rec.gold.clone().expect("pool records carry gold labels");
            let ex = if spec.cot_style.is_cot() {
                match self.reasons.get(&(id.clone(), spec.cot_style)) {
                    Some(reason) => IclExample::with_reason(rec.note.clone(), gold, spec.cot_style, reason.clone()),
                    None => continue,
                }
            } else {
                IclExample::new(rec.note.clone(), gold)
            };
            out.push(ex);
            if out.len() == spec.shots {
                return Ok(out);
            }
        }
        Err(PipelineError::NotEnoughExamples { note_id: note.note_id().to_string(), needed: spec.shots, available: out.len() })
    }
}

// ---------------------------------------------------------------------------
// Strategies

/// Everything a strategy needs besides the note and its config.
pub struct RunContext<'a> {
    pub gateway: &'a Gateway,
    pub store: Option<&'a ExampleStore>,
    pub predictor: &'a SpanPredictor,
    /// Split of the notes being corrected.
    pub split: Split,
}

/// The end-to-end (or hybrid) prompt for `record`.
pub fn render_e2e_for(record: &Record, cfg: &StrategyConfig, ctx: &RunContext<'_>) -> Result<Vec<crate::prompt::ChatMessage>, PipelineError> {
    let mut spec = cfg.prompt.clone();
    if cfg.strategy == Strategy::Hybrid {
        spec.span_hint = ctx.predictor.predict(record, ctx.split)?.map(|p| p.text);
    }
    let examples = match (spec.shots, ctx.store) {
        (0, _) => Vec::new(),
        (_, Some(store)) => store.examples_for(&record.note, &spec)?,
        (_, None) => return Err(PipelineError::NoExampleStore),
    };
    Ok(render_e2e_prompt(&record.note, &examples, &spec)?)
}

pub fn run_e2e(record: &Record, cfg: &StrategyConfig, ctx: &RunContext<'_>) -> Result<CorrectionResult, PipelineError> {
    let messages = render_e2e_for(record, cfg, ctx)?;
    let raw = ctx.gateway.complete(&messages)?;
    Ok(parse_llm_json(&raw, &record.note, cfg.strategy))
}

/// Candidate texts from an option-generation reply, in key order.
pub fn parse_generated_options(raw: &str, n: usize) -> Vec<String> {
    let Some(map) = extract_json_object(raw) else { return Vec::new() };
    expected_option_keys(n)
        .iter()
        .filter_map(|k| field(&map, k).and_then(as_text))
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// The option chosen by an MCQ answer: a letter ("A", "A. asthma") or the option text.
pub fn parse_mcq_answer(raw: &str, options: &crate::prompt::OptionSet) -> Result<usize, String> {
    let answer = match extract_json_object(raw) {
        Some(map) => field(&map, "answer").and_then(as_text).ok_or("reply has no Answer key")?,
        None => raw.trim().to_string(),
    };
    let answer = answer.trim();
    let mut chars = answer.chars();
    let first = chars.next().ok_or("empty answer")?;
    let rest = chars.as_str();
    let letter_form = first.is_ascii_alphabetic()
        && (rest.is_empty() || rest.starts_with(|c: char| matches!(c, '.' | ')' | ':') || c.is_whitespace()));
    if letter_form {
        if let Some((i, _)) = options.by_letter(first) {
            return Ok(i);
        }
        if rest.is_empty() {
            return Err(format!("answer letter `{first}` is not among the options"));
        }
    }
    if let Some((i, _)) = options.by_text(answer) {
        return Ok(i);
    }
    if letter_form {
        let tail = rest.trim_start_matches(|c: char| matches!(c, '.' | ')' | ':')).trim();
        if let Some((i, _)) = options.by_text(tail) {
            return Ok(i);
        }
        return Err(format!("answer letter `{first}` is not among the options"));
    }
    Err(format!("answer `{answer}` matches no option"))
}

pub fn run_mcq(record: &Record, cfg: &StrategyConfig, ctx: &RunContext<'_>) -> Result<CorrectionResult, PipelineError> {
    let mcq = cfg.mcq.ok_or_else(|| PipelineError::Config("strategy mcq requires mcq settings".into()))?;
    let id = record.id();
    let prediction = ctx.predictor.predict(record, ctx.split)?.ok_or_else(|| PipelineError::NoSpan(id.to_string()))?;
    let span = prediction.text;
    let blanked = blank_out_span(&record.note, &span)?;

    let n = mcq.generated_options();
    let option_reply = ctx.gateway.complete(&render_mcq_option_request(&blanked, &span, n)?)?;
    let generated = parse_generated_options(&option_reply, n);
    if generated.len() < n {
        log::warn!("note {id}: {} of {n} options generated", generated.len());
    }
    let options = match assemble_options(&generated, &span, mcq.injected_index.min(generated.len())) {
        Ok(o) => o,
        Err(e) => return Ok(CorrectionResult::fallback(id, Strategy::Mcq, option_reply, format!("option generation failed: {e}"))),
    };

    let answer = ctx.gateway.complete(&render_mcq_question(&blanked, &options)?)?;
    let chosen = match parse_mcq_answer(&answer, &options) {
        Ok(i) => i,
        Err(why) => return Ok(CorrectionResult::fallback(id, Strategy::Mcq, answer, why)),
    };
    if chosen == options.injected_index() {
        return Ok(CorrectionResult::no_error(id, Strategy::Mcq, answer));
    }
    let text = &options.options()[chosen].1;
    Ok(CorrectionResult {
        note_id: id.to_string(),
        error_flag: 1,
        error_sid: blanked.sid as i64,
        correction: blanked.sentence.replacen(BLANK, text, 1),
        reason: None,
        raw_response: answer,
        strategy: Strategy::Mcq,
        diagnostic: None,
    })
}

pub fn run_note(record: &Record, cfg: &StrategyConfig, ctx: &RunContext<'_>) -> Result<CorrectionResult, PipelineError> {
    match cfg.strategy {
        Strategy::E2e | Strategy::Hybrid => run_e2e(record, cfg, ctx),
        Strategy::Mcq => run_mcq(record, cfg, ctx),
    }
}

// ---------------------------------------------------------------------------
// Dataset runs

fn canonical_hash(value: &Value) -> String {
    // serde_json maps are ordered by key, so this is canonical
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// The settings that can change predictions. Transport knobs (timeouts,
/// retries, parallelism, rate limits, key variable) are left out.
pub fn semantic_config(cfg: &StrategyConfig, backend: &BackendConfig) -> Value {
    serde_json::json!({
        "strategy": cfg,
        "backend": {
            "endpoint": backend.endpoint,
            "model_name": backend.model_name,
            "api_version": backend.api_version,
            "temperature": backend.temperature,
            "top_p": backend.top_p,
            "frequency_penalty": backend.frequency_penalty,
            "presence_penalty": backend.presence_penalty,
            "max_new_tokens": backend.max_new_tokens,
        },
        "template_version": TEMPLATE_VERSION,
    })
}

pub fn config_hash(cfg: &StrategyConfig, backend: &BackendConfig) -> String {
    canonical_hash(&semantic_config(cfg, backend))
}

/// Config hash with the persona blanked, for comparing role-sweep runs.
pub fn config_hash_without_persona(cfg: &StrategyConfig, backend: &BackendConfig) -> String {
    let mut v = semantic_config(cfg, backend);
    v["strategy"]["prompt"]["persona"] = Value::Null;
    canonical_hash(&v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Largest tolerated fraction of notes that fail outright.
    pub failure_ceiling: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { failure_ceiling: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteFailure {
    pub note_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub template_version: String,
    pub model_name: String,
    pub strategy: Strategy,
    pub predictor: String,
    pub split: Split,
    pub started_at: String,
    pub finished_at: String,
    pub n_notes: usize,
    /// Notes that raised an error and were recorded as fallbacks.
    pub failure_count: usize,
    /// Notes whose output could not be used and fell back to "no error".
    pub fallback_count: usize,
    pub failure_ceiling: f64,
    pub ceiling_exceeded: bool,
    pub failures: Vec<NoteFailure>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub results: Vec<CorrectionResult>,
    pub manifest: RunManifest,
}

/// Runs `f` over `items` on at most `workers` threads; output keeps input order.
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock()[i] = Some(r);
            });
        }
    });
    slots.into_inner().into_iter().map(|r| r.expect("every item processed")).collect()
}

/// Corrects every note in `ds`. Per-note errors become fallback results and
/// are counted; the returned manifest says whether the ceiling was exceeded.
pub fn run_dataset(ds: &Dataset, cfg: &StrategyConfig, ctx: &RunContext<'_>, opts: RunOptions) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let outcomes = parallel_map(ds.records(), ctx.gateway.config().max_parallel, |r| {
        (r.id().to_string(), run_note(r, cfg, ctx))
    });
    let mut results = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                log::error!("note {id}: {e}");
                results.push(CorrectionResult::fallback(&id, cfg.strategy, "", e.to_string()));
                failures.push(NoteFailure { note_id: id, error: e.to_string() });
            }
        }
    }
    results.sort_by(|a, b| a.note_id.cmp(&b.note_id));
    failures.sort_by(|a, b| a.note_id.cmp(&b.note_id));
    let n = results.len();
    let fallback_count = results.iter().filter(|r| r.diagnostic.is_some()).count();
    let rate = if n == 0 { 0.0 } else { failures.len() as f64 / n as f64 };
    let manifest = RunManifest {
        config_hash: config_hash(cfg, ctx.gateway.config()),
        template_version: TEMPLATE_VERSION.to_string(),
        model_name: ctx.gateway.config().model_name.clone(),
        strategy: cfg.strategy,
        predictor: ctx.predictor.kind().to_string(),
        split: ds.split(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        n_notes: n,
        failure_count: failures.len(),
        fallback_count,
        failure_ceiling: opts.failure_ceiling,
        ceiling_exceeded: rate > opts.failure_ceiling,
        failures,
    };
    Ok(RunOutput { results, manifest })
}

pub fn predictions_to_jsonl(results: &[CorrectionResult]) -> String {
    results.iter().map(|r| serde_json::to_string(r).expect("result serializes") + "\n").collect()
}

pub fn write_predictions(path: impl AsRef<Path>, results: &[CorrectionResult]) -> Result<(), PipelineError> {
    fs::write(path, predictions_to_jsonl(results))?;
    Ok(())
}

pub fn parse_predictions(text: &str) -> Result<Vec<CorrectionResult>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: CorrectionResult =
            serde_json::from_str(line).map_err(|e| PipelineError::Predictions { line: i + 1, message: e.to_string() })?;
        if !r.is_consistent() {
            return Err(PipelineError::Predictions {
                line: i + 1,
                message: format!("note {} has inconsistent flag/sid/correction", r.note_id),
            });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<CorrectionResult>, PipelineError> {
    parse_predictions(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Reason bank

/// Reads a bank file. Unparseable lines (such as a line cut short by an
/// interrupted run) are skipped with a warning.
pub fn load_reason_bank(path: impl AsRef<Path>) -> Result<Vec<ReasonEntry>, PipelineError> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ReasonEntry>(line) {
            Ok(e) => out.push(e),
            Err(e) => log::warn!("{}:{}: skipping bank line: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankReport {
    pub style: CotStyle,
    pub total: usize,
    pub already_present: usize,
    pub requested: usize,
    pub completed: usize,
    pub failures: Vec<NoteFailure>,
}

/// Generates one reason per training record in `style`, appending to the bank
/// at `path` as entries complete. Records already in the bank are not
/// requested again. The file is rewritten sorted once the run ends.
pub fn build_icl_bank(train: &Dataset, style: CotStyle, gateway: &Gateway, path: impl AsRef<Path>) -> Result<BankReport, PipelineError> {
    if !style.is_cot() {
        return Err(PromptError::NoCotStyle.into());
    }
    let path = path.as_ref();
    let existing = load_reason_bank(path)?;
    let done: HashSet<&str> = existing.iter().filter(|e| e.reason_style == style).map(|e| e.note_id.as_str()).collect();
    let mut pending = Vec::new();
    for r in train.records() {
        if r.gold.is_none() {
            return Err(PipelineError::MissingGold(r.id().to_string()));
        }
        if !done.contains(r.id()) {
            pending.push(r);
        }
    }
    let already_present = train.len() - pending.len();

    // rewrite what we loaded so a truncated tail line does not corrupt appends
    write_bank(path, existing.clone())?;
    let sink = Mutex::new(BufWriter::new(OpenOptions::new().append(true).open(path)?));
    let outcomes = parallel_map(&pending, gateway.config().max_parallel, |r| -> Result<(), PipelineError> {
        let gold = r.gold.as_ref().expect("checked above");
        let messages = render_reason_request(&r.note, gold, style)?;
        let reason = gateway.complete(&messages)?;
        let entry = ReasonEntry { note_id: r.id().to_string(), reason_style: style, reason: reason.trim().to_string() };
        let mut w = sink.lock();
        writeln!(w, "{}", serde_json::to_string(&entry).expect("entry serializes"))?;
        w.flush()?;
        Ok(())
    });
    drop(sink);

    let mut failures = Vec::new();
    for (r, o) in pending.iter().zip(outcomes) {
        if let Err(e) = o {
            log::error!("reason for {}: {e}", r.id());
            failures.push(NoteFailure { note_id: r.id().to_string(), error: e.to_string() });
        }
    }
    write_bank(path, load_reason_bank(path)?)?;
    Ok(BankReport {
        style,
        total: train.len(),
        already_present,
        requested: pending.len(),
        completed: pending.len() - failures.len(),
        failures,
    })
}

/// Writes entries sorted by (note_id, style), keeping the last entry per key.
fn write_bank(path: &Path, entries: Vec<ReasonEntry>) -> Result<(), PipelineError> {
    let mut by_key: BTreeMap<(String, String), ReasonEntry> = BTreeMap::new();
    for e in entries {
        by_key.insert((e.note_id.clone(), e.reason_style.to_string()), e);
    }
    let mut f = BufWriter::new(File::create(path)?);
    for e in by_key.values() {
        writeln!(f, "{}", serde_json::to_string(e).expect("entry serializes"))?;
    }
    f.flush()?;
    Ok(())
}
