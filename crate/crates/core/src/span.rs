//! Error-span prediction: predictors, SQuAD v1 conversion and EM / token F1.
//!
//! Offsets on the wire are Unicode scalar (character) offsets into the
//! span context, which is the numbered rendering of the note.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_numbered_note, ClinicalNote, CorpusError, Dataset, GoldLabel, Record, Split};

pub const SQUAD_QUESTION: &str = "Which part in the given clinical note is clinically incorrect?";

#[derive(Debug, Error)]
pub enum SpanError {
    #[error("note {0} contains no error; only error notes convert to SQuAD records")]
    NoError(String),
    #[error("note {0} has no gold label")]
    MissingGold(String),
    #[error("note {note_id}: error span `{span}` not found in context")]
    SpanNotFound { note_id: String, span: String },
    #[error("span service unreachable: {0}")]
    Unreachable(String),
    #[error("malformed span service reply: {0}")]
    Malformed(String),
    #[error("gold-oracle predictor is refused on the test split")]
    OracleOnTest,
    #[error("predictions and golds are not aligned: {0}")]
    Misaligned(String),
    #[error("no items to evaluate")]
    Empty,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Text the span predictor reads.
pub fn span_context(note: &ClinicalNote) -> String {
    render_numbered_note(note)
}

fn char_slice(s: &str, start: usize, end: usize) -> Option<&str> {
    let mut idx = s.char_indices().map(|(i, _)| i).chain(std::iter::once(s.len()));
    let b0 = idx.nth(start)?;
    if end < start {
        return None;
    }
    let b1 = if end == start { b0 } else { idx.nth(end - start - 1)? };
    Some(&s[b0..b1])
}

fn char_offset_of(haystack: &str, needle: &str) -> Option<usize> {
    haystack.find(needle).map(|b| haystack[..b].chars().count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub text: String,
    pub start_char: usize,
    pub end_char: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl SpanPrediction {
    /// Validates `context[start..end) == text` and `end > start`.
    pub fn new(context: &str, text: impl Into<String>, start_char: usize, end_char: usize) -> Result<Self, SpanError> {
        let text = text.into();
        if end_char <= start_char {
            return Err(SpanError::Malformed(format!("empty or inverted span {start_char}..{end_char}")));
        }
        match char_slice(context, start_char, end_char) {
            Some(s) if s == text => Ok(Self { text, start_char, end_char, confidence: None }),
            Some(s) => Err(SpanError::Malformed(format!(
                "offsets {start_char}..{end_char} select `{s}`, not `{text}`"
            ))),
            None => Err(SpanError::Malformed(format!("offsets {start_char}..{end_char} outside context"))),
        }
    }

    /// Locates the first occurrence of `text` in `context`.
    pub fn locate(context: &str, text: &str) -> Option<Self> {
        let start = char_offset_of(context, text)?;
        Self::new(context, text, start, start + text.chars().count()).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SquadRecord {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answer_text: String,
    pub answer_start: usize,
}

impl SquadRecord {
    /// SQuAD v1 JSON shape: `answers: {text: [..], answer_start: [..]}`.
    pub fn to_squad_json(&self) -> serde_json::Value {
        serde_json::json!({
            "id": self.id,
            "question": self.question,
            "context": self.context,
            "answers": {"text": [self.answer_text], "answer_start": [self.answer_start]},
        })
    }
}

pub fn context_answer_start(context: &str, answer: &str) -> Option<usize> {
    char_offset_of(context, answer)
}

pub fn to_squad(note: &ClinicalNote, gold: &GoldLabel) -> Result<SquadRecord, SpanError> {
    if !gold.has_error() {
        return Err(SpanError::NoError(note.note_id().to_string()));
    }
    let span = gold.resolve_span(note).ok_or_else(|| SpanError::SpanNotFound {
        note_id: note.note_id().to_string(),
        span: String::new(),
    })?;
    let context = span_context(note);
    let sid = gold.error_sid as usize;
    // Prefer the mention inside the error sentence's own line.
    let line_offset: usize = note.sentences()[..sid]
        .iter()
        .map(|s| format!("{} {}", s.sid, s.text).chars().count() + 1)
        .sum::<usize>()
        + format!("{sid} ").chars().count();
    let answer_start = note
        .sentence(sid)
        .and_then(|sentence| char_offset_of(sentence, &span))
        .map(|o| line_offset + o)
        .or_else(|| context_answer_start(&context, &span))
        .ok_or_else(|| SpanError::SpanNotFound { note_id: note.note_id().to_string(), span: span.clone() })?;
    Ok(SquadRecord {
        id: note.note_id().to_string(),
        question: SQUAD_QUESTION.to_string(),
        context,
        answer_text: span,
        answer_start,
    })
}

/// SQuAD records for every error note of a labelled dataset.
pub fn dataset_to_squad(ds: &Dataset) -> Result<Vec<SquadRecord>, SpanError> {
    let mut out = Vec::new();
    for r in ds.records() {
        let gold = r.gold.as_ref().ok_or_else(|| SpanError::MissingGold(r.id().to_string()))?;
        if gold.has_error() {
            out.push(to_squad(&r.note, gold)?);
        }
    }
    Ok(out)
}

/// Lowercase, strip punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(pred) == normalize_answer(gold))
}

pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() && gt.is_empty() {
        return 1.0;
    }
    if pt.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pt.len() as f64;
    let recall = overlap as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Mean EM and token F1 over aligned pairs, as percentages.
pub fn evaluate_spans(
    predictions: &HashMap<String, String>,
    golds: &HashMap<String, String>,
) -> Result<(f64, f64), SpanError> {
    if golds.is_empty() {
        return Err(SpanError::Empty);
    }
    if let Some(extra) = predictions.keys().find(|k| !golds.contains_key(*k)) {
        return Err(SpanError::Misaligned(format!("prediction for unknown note {extra}")));
    }
    let mut em = 0.0;
    let mut f1 = 0.0;
    let mut ids: Vec<&String> = golds.keys().collect();
    ids.sort();
    for id in ids {
        let gold = &golds[id];
        let pred = predictions
            .get(id)
            .ok_or_else(|| SpanError::Misaligned(format!("no prediction for note {id}")))?;
        em += exact_match(pred, gold) as f64;
        f1 += token_f1(pred, gold);
    }
    let n = golds.len() as f64;
    Ok((100.0 * em / n, 100.0 * f1 / n))
}

/// Offline prediction line as exported by the span service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineSpan {
    pub note_id: String,
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub fn load_offline_predictions(path: impl AsRef<Path>) -> Result<HashMap<String, OfflineSpan>, SpanError> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: OfflineSpan =
            serde_json::from_str(line).map_err(|e| SpanError::Malformed(format!("line {}: {e}", i + 1)))?;
        out.insert(rec.note_id.clone(), rec);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct PredictRequest<'a> {
    context: &'a str,
}

#[derive(Debug, Deserialize)]
struct PredictReply {
    text: String,
    start: usize,
    end: usize,
}

/// Client for `POST /predict` on the span service.
pub struct RemoteSpanClient {
    base_url: String,
    agent: ureq::Agent,
}

impl RemoteSpanClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { base_url: base_url.into().trim_end_matches('/').to_string(), agent }
    }

    pub fn predict_context(&self, context: &str) -> Result<SpanPrediction, SpanError> {
        let url = format!("{}/predict", self.base_url);
        let body = serde_json::to_string(&PredictRequest { context }).expect("request serializes");
        let mut resp = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send(body.as_bytes())
            .map_err(|e| SpanError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| SpanError::Unreachable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(SpanError::Malformed(format!("HTTP {status}: {text}")));
        }
        let reply: PredictReply = serde_json::from_str(&text).map_err(|e| SpanError::Malformed(e.to_string()))?;
        SpanPrediction::new(context, reply.text, reply.start, reply.end)
    }
}

pub enum SpanPredictor {
    Remote(RemoteSpanClient),
    Offline(HashMap<String, OfflineSpan>),
    GoldOracle,
    None,
}

impl SpanPredictor {
    pub fn is_none(&self) -> bool {
        matches!(self, SpanPredictor::None)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SpanPredictor::Remote(_) => "remote",
            SpanPredictor::Offline(_) => "offline",
            SpanPredictor::GoldOracle => "gold_oracle",
            SpanPredictor::None => "none",
        }
    }

    pub fn predict(&self, record: &Record, split: Split) -> Result<Option<SpanPrediction>, SpanError> {
        let context = span_context(&record.note);
        match self {
            SpanPredictor::None => Ok(None),
            SpanPredictor::GoldOracle => {
                if split == Split::Test {
                    return Err(SpanError::OracleOnTest);
                }
                let gold = record.gold.as_ref().ok_or_else(|| SpanError::MissingGold(record.id().to_string()))?;
                if !gold.has_error() {
                    return Ok(None);
                }
                let squad = to_squad(&record.note, gold)?;
                let end = squad.answer_start + squad.answer_text.chars().count();
                SpanPrediction::new(&context, squad.answer_text, squad.answer_start, end).map(Some)
            }
            SpanPredictor::Offline(map) => match map.get(record.id()) {
                Some(p) => SpanPrediction::new(&context, p.text.clone(), p.start, p.end).map(Some),
                None => Ok(None),
            },
            SpanPredictor::Remote(client) => client.predict_context(&context).map(Some),
        }
    }
}
