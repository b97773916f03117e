//! Shared-task metrics: flag accuracy, sentence-id accuracy, ROUGE-1 and the
//! aggregate NLG score, macro-averaged over note sources.
//!
//! Scoring protocol for the NLG metrics, per item:
//! - prediction and gold both report no error: every metric is 1.0;
//! - exactly one side reports no error: every metric is 0.0;
//! - otherwise each metric compares the predicted and gold corrected sentences.
//!
//! A sentence id of -1 on both sides counts as a match. BERTScore and BLEURT
//! are read from a sidecar TSV produced out of process.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, GoldLabel, Source};
use crate::pipeline::CorrectionResult;
use crate::retrieval::tokenize;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("predictions and golds are not aligned: {0}")]
    Misaligned(String),
    #[error("missing aggregate component: {0}")]
    MissingComponent(&'static str),
    #[error("sidecar line {line}: {message}")]
    Sidecar { line: usize, message: String },
    #[error("sidecar {metric} score {value} for note {note_id} is outside [0, 1]")]
    OutOfRange { note_id: String, metric: &'static str, value: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn check_aligned(preds: &[CorrectionResult], golds: &[GoldLabel]) -> Result<(), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    if preds.len() != golds.len() {
        return Err(EvalError::Misaligned(format!("{} predictions vs {} golds", preds.len(), golds.len())));
    }
    Ok(())
}

/// Fraction of items whose error flag matches. Inputs are paired by position.
pub fn acc_flag(preds: &[CorrectionResult], golds: &[GoldLabel]) -> Result<f64, EvalError> {
    check_aligned(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p.error_flag == g.error_flag).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn acc_sent_id(preds: &[CorrectionResult], golds: &[GoldLabel]) -> Result<f64, EvalError> {
    check_aligned(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p.error_sid == g.error_sid).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unigram-overlap F1 with clipped counts.
pub fn rouge1_f(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *ref_counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &c {
        if let Some(n) = ref_counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c.len() as f64;
    let rc = overlap as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExternalScore {
    pub bertscore: Option<f64>,
    pub bleurt: Option<f64>,
}

/// Per-item NLG scores. External metrics are `None` when not part of the run
/// or when the sidecar has no value for the item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub rouge1: f64,
    pub bertscore: Option<f64>,
    pub bleurt: Option<f64>,
}

/// Which NLG metrics participate in scoring.
#[derive(Debug, Clone, Default)]
pub struct NlgMetrics {
    pub external: Option<HashMap<String, ExternalScore>>,
}

impl NlgMetrics {
    pub fn rouge_only() -> Self {
        Self { external: None }
    }

    pub fn with_external(scores: HashMap<String, ExternalScore>) -> Self {
        Self { external: Some(scores) }
    }
}

pub fn score_correction(pred: &CorrectionResult, gold: &GoldLabel, nlg: &NlgMetrics) -> ItemScores {
    let forced = match (pred.error_flag == 1, gold.has_error()) {
        (false, false) => Some(1.0),
        (true, false) | (false, true) => Some(0.0),
        (true, true) => None,
    };
    if let Some(v) = forced {
        let ext = nlg.external.as_ref().map(|_| v);
        return ItemScores { rouge1: v, bertscore: ext, bleurt: ext };
    }
    let reference = gold.corrected_sentence.as_deref().unwrap_or_default();
    let rouge1 = rouge1_f(&pred.correction, reference);
    let sidecar = nlg.external.as_ref().map(|m| m.get(&pred.note_id).copied());
    let (bertscore, bleurt) = match sidecar {
        Some(Some(s)) => (s.bertscore, s.bleurt),
        _ => (None, None),
    };
    ItemScores { rouge1, bertscore, bleurt }
}

pub fn aggregate(rouge1: Option<f64>, bertscore: Option<f64>, bleurt: Option<f64>) -> Result<f64, EvalError> {
    let r = rouge1.ok_or(EvalError::MissingComponent("rouge1"))?;
    let b = bertscore.ok_or(EvalError::MissingComponent("bertscore"))?;
    let l = bleurt.ok_or(EvalError::MissingComponent("bleurt"))?;
    Ok((r + b + l) / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub acc_flag: f64,
    pub acc_sent_id: f64,
    pub rouge1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bertscore: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleurt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_agg: Option<f64>,
    pub n_items: usize,
}

fn mean_all(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v?;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl MetricRow {
    /// Scores one group of aligned items.
    pub fn compute(preds: &[CorrectionResult], golds: &[GoldLabel], nlg: &NlgMetrics) -> Result<Self, EvalError> {
        let acc_flag = acc_flag(preds, golds)?;
        let acc_sent_id = acc_sent_id(preds, golds)?;
        let items: Vec<ItemScores> = preds.iter().zip(golds).map(|(p, g)| score_correction(p, g, nlg)).collect();
        let rouge1 = items.iter().map(|i| i.rouge1).sum::<f64>() / items.len() as f64;
        let bertscore = mean_all(items.iter().map(|i| i.bertscore));
        let bleurt = mean_all(items.iter().map(|i| i.bleurt));
        let score_agg = aggregate(Some(rouge1), bertscore, bleurt).ok();
        Ok(Self { acc_flag, acc_sent_id, rouge1, bertscore, bleurt, score_agg, n_items: preds.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Unweighted mean over sources.
    #[serde(rename = "macro")]
    pub macro_avg: MetricRow,
    pub per_source: BTreeMap<Source, MetricRow>,
    pub n_items: usize,
}

/// Unweighted mean of each metric across sources. Optional metrics survive
/// only if every source has them.
pub fn macro_average(per_source: &BTreeMap<Source, MetricRow>) -> Result<MetricRow, EvalError> {
    if per_source.is_empty() {
        return Err(EvalError::Empty);
    }
    let rows: Vec<&MetricRow> = per_source.values().collect();
    let k = rows.len() as f64;
    let mean = |f: &dyn Fn(&MetricRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / k;
    let mean_opt = |f: &dyn Fn(&MetricRow) -> Option<f64>| mean_all(rows.iter().map(|r| f(r)));
    let rouge1 = mean(&|r| r.rouge1);
    let bertscore = mean_opt(&|r| r.bertscore);
    let bleurt = mean_opt(&|r| r.bleurt);
    Ok(MetricRow {
        acc_flag: mean(&|r| r.acc_flag),
        acc_sent_id: mean(&|r| r.acc_sent_id),
        rouge1,
        bertscore,
        bleurt,
        score_agg: mean_opt(&|r| r.score_agg),
        n_items: rows.iter().map(|r| r.n_items).sum(),
    })
}

/// Aligns predictions to a labelled dataset by note id and reports per source and macro.
pub fn evaluate(preds: &[CorrectionResult], golds: &Dataset, nlg: &NlgMetrics) -> Result<MetricReport, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::Empty);
    }
    let by_id: HashMap<&str, &CorrectionResult> = preds.iter().map(|p| (p.note_id.as_str(), p)).collect();
    if by_id.len() != preds.len() {
        return Err(EvalError::Misaligned("duplicate prediction ids".into()));
    }
    if preds.len() != golds.len() {
        return Err(EvalError::Misaligned(format!("{} predictions vs {} gold notes", preds.len(), golds.len())));
    }
    let mut grouped: BTreeMap<Source, (Vec<CorrectionResult>, Vec<GoldLabel>)> = BTreeMap::new();
    for r in golds.records() {
        let gold = r.gold.clone().ok_or_else(|| EvalError::Misaligned(format!("note {} has no gold label", r.id())))?;
        let pred = by_id.get(r.id()).ok_or_else(|| EvalError::Misaligned(format!("no prediction for note {}", r.id())))?;
        let e = grouped.entry(r.note.source()).or_default();
        e.0.push((*pred).clone());
        e.1.push(gold);
    }
    let mut per_source = BTreeMap::new();
    for (src, (p, g)) in grouped {
        per_source.insert(src, MetricRow::compute(&p, &g, nlg)?);
    }
    let macro_avg = macro_average(&per_source)?;
    Ok(MetricReport { macro_avg, per_source, n_items: preds.len() })
}

/// Reads a TSV with header `note_id  bertscore  bleurt`. Values are used as
/// given (producers rescale to [0, 1]); an empty cell leaves that metric absent.
pub fn load_external_scores(path: impl AsRef<Path>) -> Result<HashMap<String, ExternalScore>, EvalError> {
    parse_external_scores(&fs::read_to_string(path)?)
}

pub fn parse_external_scores(text: &str) -> Result<HashMap<String, ExternalScore>, EvalError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(EvalError::Sidecar { line: 1, message: "missing header".into() })?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |name: &str| cols.iter().position(|c| *c == name);
    let (Some(id_col), Some(bs_col), Some(bl_col)) = (find("note_id"), find("bertscore"), find("bleurt")) else {
        return Err(EvalError::Sidecar { line: 1, message: format!("header must name note_id, bertscore, bleurt; got `{header}`") });
    };
    let mut out = HashMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let get = |c: usize| fields.get(c).copied().unwrap_or("");
        let note_id = get(id_col).to_string();
        if note_id.is_empty() {
            return Err(EvalError::Sidecar { line: line_no, message: "empty note_id".into() });
        }
        let parse = |c: usize, metric: &'static str| -> Result<Option<f64>, EvalError> {
            let raw = get(c);
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                return Ok(None);
            }
            let value: f64 = raw
                .parse()
                .map_err(|_| EvalError::Sidecar { line: line_no, message: format!("bad {metric} value `{raw}`") })?;
            if !(0.0..=1.0).contains(&value) {
                return Err(EvalError::OutOfRange { note_id: note_id.clone(), metric, value });
            }
            Ok(Some(value))
        };
        let score = ExternalScore { bertscore: parse(bs_col, "bertscore")?, bleurt: parse(bl_col, "bleurt")? };
        out.insert(note_id, score);
    }
    Ok(out)
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        writeln!(
            f,
            "{:<8} {:>6} {:>9} {:>12} {:>8} {:>10} {:>8} {:>10}",
            "source", "n", "acc_flag", "acc_sent_id", "rouge1", "bertscore", "bleurt", "score_agg"
        )?;
        let mut row = |name: &str, r: &MetricRow| {
            writeln!(
                f,
                "{:<8} {:>6} {:>9.4} {:>12.4} {:>8.4} {:>10} {:>8} {:>10}",
                name,
                r.n_items,
                r.acc_flag,
                r.acc_sent_id,
                r.rouge1,
                opt(r.bertscore),
                opt(r.bleurt),
                opt(r.score_agg)
            )
        };
        for (src, r) in &self.per_source {
            row(&src.to_string(), r)?;
        }
        row("macro", &self.macro_avg)
    }
}
