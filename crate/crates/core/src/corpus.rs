//! Sentence-indexed clinical notes, gold labels and the JSONL dataset format.
//!
//! One record per line:
//!
//! ```text
//! {"id": "n1", "source": "MS", "sentences": [{"sid": 0, "text": "A."}],
//!  "error_flag": 0, "error_sid": -1, "corrected_sentence": null}
//! ```
//!
//! Label fields may be null only on the test split. `error_span` is an
//! optional extension naming the erroneous fragment inside the error
//! sentence; when absent it is derived from the sentence/correction diff.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("note {note_id}: {message}")]
    Validation { note_id: String, message: String },
    #[error("dataset has no gold labels for note {0}")]
    MissingLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    MS,
    UW,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::MS => "MS",
            Source::UW => "UW",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "val" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, valid or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sid: usize,
    pub text: String,
}

/// A clinical note split into sentences with contiguous ids starting at 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalNote {
    note_id: String,
    source: Source,
    sentences: Vec<Sentence>,
}

impl ClinicalNote {
    /// Builds a note from sentence texts in order, trimming each text.
    pub fn new<I, S>(note_id: impl Into<String>, source: Source, texts: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let sentences = texts
            .into_iter()
            .enumerate()
            .map(|(sid, t)| Sentence { sid, text: t.as_ref().to_string() })
            .collect();
        Self::from_sentences(note_id, source, sentences)
    }

    /// Validates explicit `(sid, text)` pairs. Sentences are sorted by sid first.
    pub fn from_sentences(
        note_id: impl Into<String>,
        source: Source,
        mut sentences: Vec<Sentence>,
    ) -> Result<Self, CorpusError> {
        let note_id = note_id.into();
        let invalid = |message: String| CorpusError::Validation { note_id: note_id.clone(), message };
        if sentences.is_empty() {
            return Err(invalid("note has no sentences".into()));
        }
        sentences.sort_by_key(|s| s.sid);
        for (expected, s) in sentences.iter_mut().enumerate() {
            if s.sid != expected {
                return Err(invalid(format!(
                    "sentence ids must be contiguous from 0; expected {expected}, found {}",
                    s.sid
                )));
            }
            let trimmed = s.text.trim();
            if trimmed.is_empty() {
                return Err(invalid(format!("sentence {} is empty", s.sid)));
            }
            if trimmed.len() != s.text.len() {
                s.text = trimmed.to_string();
            }
        }
        Ok(Self { note_id, source, sentences })
    }

    pub fn note_id(&self) -> &str {
        &self.note_id
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentence(&self, sid: usize) -> Option<&str> {
        self.sentences.get(sid).map(|s| s.text.as_str())
    }

    /// Sentences joined by single spaces, the form shown in MCQ prompts.
    pub fn plain_text(&self) -> String {
        self.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// One line per sentence, `"<sid> <text>"`, newline separated.
pub fn render_numbered_note(note: &ClinicalNote) -> String {
    note.sentences
        .iter()
        .map(|s| format!("{} {}", s.sid, s.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub error_flag: u8,
    pub error_sid: i64,
    pub corrected_sentence: Option<String>,
    /// Erroneous fragment of the error sentence, when known.
    pub error_span: Option<String>,
}

impl GoldLabel {
    pub fn no_error() -> Self {
        Self { error_flag: 0, error_sid: -1, corrected_sentence: None, error_span: None }
    }

    pub fn error(sid: usize, corrected: impl Into<String>, span: Option<String>) -> Self {
        Self {
            error_flag: 1,
            error_sid: sid as i64,
            corrected_sentence: Some(corrected.into()),
            error_span: span,
        }
    }

    pub fn has_error(&self) -> bool {
        self.error_flag == 1
    }

    fn validate(&self, note: &ClinicalNote) -> Result<(), String> {
        match self.error_flag {
            0 => {
                if self.error_sid != -1 {
                    return Err(format!("error_flag=0 requires error_sid=-1, got {}", self.error_sid));
                }
                if self.corrected_sentence.is_some() {
                    return Err("error_flag=0 must not carry a corrected_sentence".into());
                }
                if self.error_span.is_some() {
                    return Err("error_flag=0 must not carry an error_span".into());
                }
            }
            1 => {
                if self.error_sid < 0 || self.error_sid as usize >= note.len() {
                    return Err(format!(
                        "error_sid {} is not a sentence id of this note (0..{})",
                        self.error_sid,
                        note.len()
                    ));
                }
                match &self.corrected_sentence {
                    Some(c) if !c.trim().is_empty() => {}
                    _ => return Err("error_flag=1 requires a corrected_sentence".into()),
                }
                if let Some(span) = &self.error_span {
                    let sentence = note.sentence(self.error_sid as usize).unwrap_or_default();
                    if span.is_empty() || !sentence.contains(span.as_str()) {
                        return Err(format!("error_span `{span}` does not occur in sentence {}", self.error_sid));
                    }
                }
            }
            other => return Err(format!("error_flag must be 0 or 1, got {other}")),
        }
        Ok(())
    }

    /// The erroneous fragment: the stored span, or the word-level diff
    /// between the error sentence and its correction.
    pub fn resolve_span(&self, note: &ClinicalNote) -> Option<String> {
        if !self.has_error() {
            return None;
        }
        if let Some(span) = &self.error_span {
            return Some(span.clone());
        }
        let sentence = note.sentence(self.error_sid as usize)?;
        diff_span(sentence, self.corrected_sentence.as_deref()?)
    }
}

/// Smallest run of whitespace-delimited words in `original` that differs
/// from `corrected` once the common word prefix and suffix are removed.
pub fn diff_span(original: &str, corrected: &str) -> Option<String> {
    let words: Vec<(usize, &str)> = word_offsets(original);
    let other: Vec<&str> = corrected.split_whitespace().collect();
    if words.is_empty() {
        return None;
    }
    let mut prefix = 0;
    while prefix < words.len() && prefix < other.len() && words[prefix].1 == other[prefix] {
        prefix += 1;
    }
    let mut suffix = 0;
    while suffix < words.len() - prefix
        && suffix < other.len() - prefix.min(other.len())
        && words[words.len() - 1 - suffix].1 == other[other.len() - 1 - suffix]
    {
        suffix += 1;
    }
    if prefix + suffix >= words.len() {
        return None;
    }
    let (start, _) = words[prefix];
    let (last_start, last) = words[words.len() - 1 - suffix];
    Some(original[start..last_start + last.len()].to_string())
}

fn word_offsets(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &text[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub note: ClinicalNote,
    pub gold: Option<GoldLabel>,
}

impl Record {
    pub fn id(&self) -> &str {
        self.note.note_id()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<Record>,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    source: Source,
    sentences: Vec<Sentence>,
    #[serde(default)]
    error_flag: Option<u8>,
    #[serde(default)]
    error_sid: Option<i64>,
    #[serde(default)]
    corrected_sentence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error_span: Option<String>,
}

impl Dataset {
    pub fn new(records: Vec<Record>, split: Split) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id().to_string()) {
                return Err(CorpusError::Validation {
                    note_id: r.id().to_string(),
                    message: "duplicate note id".into(),
                });
            }
            match &r.gold {
                Some(g) => g.validate(&r.note).map_err(|message| CorpusError::Validation {
                    note_id: r.id().to_string(),
                    message,
                })?,
                None if split != Split::Test => {
                    return Err(CorpusError::Validation {
                        note_id: r.id().to_string(),
                        message: format!("labels may be null only on the test split, not {split}"),
                    })
                }
                None => {}
            }
        }
        Ok(Self { records, split })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, note_id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id() == note_id)
    }

    pub fn has_labels(&self) -> bool {
        self.records.iter().all(|r| r.gold.is_some())
    }

    pub fn parse_jsonl(text: &str, split: Split) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(line)
                .map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
            records.push(raw.into_record()?);
        }
        Self::new(records, split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let raw = RawRecord::from_record(r);
            out.push_str(&serde_json::to_string(&raw).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Counts per (source, error flag); `None` flag means unlabeled.
    pub fn summary(&self) -> DatasetSummary {
        let mut counts: BTreeMap<Source, SourceCounts> = BTreeMap::new();
        for r in &self.records {
            let c = counts.entry(r.note.source()).or_default();
            c.total += 1;
            match &r.gold {
                Some(g) if g.has_error() => c.with_error += 1,
                Some(_) => c.no_error += 1,
                None => c.unlabeled += 1,
            }
        }
        DatasetSummary { split: self.split, total: self.len(), per_source: counts }
    }
}

impl RawRecord {
    fn into_record(self) -> Result<Record, CorpusError> {
        let note = ClinicalNote::from_sentences(self.id.clone(), self.source, self.sentences)?;
        let gold = match (self.error_flag, self.error_sid) {
            (None, None) if self.corrected_sentence.is_none() => None,
            (Some(flag), Some(sid)) => Some(GoldLabel {
                error_flag: flag,
                error_sid: sid,
                corrected_sentence: self.corrected_sentence.map(|s| s.trim().to_string()),
                error_span: self.error_span,
            }),
            _ => {
                return Err(CorpusError::Validation {
                    note_id: self.id,
                    message: "error_flag and error_sid must both be set or both be null".into(),
                })
            }
        };
        Ok(Record { note, gold })
    }

    fn from_record(r: &Record) -> Self {
        let g = r.gold.as_ref();
        RawRecord {
            id: r.note.note_id().to_string(),
            source: r.note.source(),
            sentences: r.note.sentences().to_vec(),
            error_flag: g.map(|g| g.error_flag),
            error_sid: g.map(|g| g.error_sid),
            corrected_sentence: g.and_then(|g| g.corrected_sentence.clone()),
            error_span: g.and_then(|g| g.error_span.clone()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SourceCounts {
    pub total: usize,
    pub no_error: usize,
    pub with_error: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub split: Split,
    pub total: usize,
    pub per_source: BTreeMap<Source, SourceCounts>,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} notes ({} split)", self.total, self.split)?;
        for (src, c) in &self.per_source {
            write!(f, "  {src}: {} total, {} no error, {} contain error", c.total, c.no_error, c.with_error)?;
            if c.unlabeled > 0 {
                write!(f, ", {} unlabeled", c.unlabeled)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    Dataset::parse_jsonl(&text, split)
}

/// Records whose gold label flags an error, in original order.
pub fn error_subset(ds: &Dataset) -> Result<Dataset, CorpusError> {
    let mut out = Vec::new();
    for r in ds.records() {
        match &r.gold {
            Some(g) if g.has_error() => out.push(r.clone()),
            Some(_) => {}
            None => return Err(CorpusError::MissingLabel(r.id().to_string())),
        }
    }
    Ok(Dataset { records: out, split: ds.split })
}
