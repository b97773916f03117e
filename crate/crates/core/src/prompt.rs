//! Prompt rendering for every exchange the pipelines have with the LLM.
//!
//! All functions here are pure: identical inputs render identical bytes.
//! Template text lives in [`templates`]; bump [`TEMPLATE_VERSION`] whenever
//! any of it changes.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_numbered_note, ClinicalNote, GoldLabel};

pub mod templates;

pub use templates::TEMPLATE_VERSION;

pub const BLANK: &str = "<BLANK>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("expected {expected} in-context examples, got {got}")]
    ShotMismatch { expected: usize, got: usize },
    #[error("in-context example {note_id} has no {style} reason")]
    MissingReason { note_id: String, style: CotStyle },
    #[error("in-context example {note_id} carries a reason but the prompt uses no chain of thought")]
    UnexpectedReason { note_id: String },
    #[error("reasons only exist for chain-of-thought styles")]
    NoCotStyle,
    #[error("span `{0}` does not occur in the note")]
    SpanNotFound(String),
    #[error("span `{0}` crosses a sentence boundary")]
    SpanCrossesSentence(String),
    #[error("the number of requested options must be at least 1")]
    NoOptions,
    #[error("every generated option duplicates the predicted span")]
    DegenerateOptions,
    #[error("injected index {index} is outside 0..={max}")]
    InjectedIndex { index: usize, max: usize },
    #[error("{0} options exceed the A-Z letter range")]
    TooManyOptions(usize),
    #[error("invalid option set: {0}")]
    InvalidOptionSet(String),
    #[error("example {0} has no gold label")]
    MissingGold(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Role the system prompt asks the model to play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persona {
    ClinicianAssistant,
    None,
    Assistant,
    MedicalStudent,
    Nurse,
    ClinicalNoteVerificator,
    Clinician,
}

impl Persona {
    pub const ALL: [Persona; 7] = [
        Persona::ClinicianAssistant,
        Persona::None,
        Persona::Assistant,
        Persona::MedicalStudent,
        Persona::Nurse,
        Persona::ClinicalNoteVerificator,
        Persona::Clinician,
    ];

    /// Noun phrase substituted after "You are".
    pub fn noun_phrase(self) -> Option<&'static str> {
        match self {
            Persona::ClinicianAssistant => Some("a clinician assistant"),
            Persona::None => None,
            Persona::Assistant => Some("an assistant"),
            Persona::MedicalStudent => Some("a medical student"),
            Persona::Nurse => Some("a nurse"),
            Persona::ClinicalNoteVerificator => Some("a clinical note verificator"),
            Persona::Clinician => Some("a clinician"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Persona::ClinicianAssistant => "clinician_assistant",
            Persona::None => "none",
            Persona::Assistant => "assistant",
            Persona::MedicalStudent => "medical_student",
            Persona::Nurse => "nurse",
            Persona::ClinicalNoteVerificator => "clinical_note_verificator",
            Persona::Clinician => "clinician",
        }
    }
}

impl fmt::Display for Persona {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Persona {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Persona::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown persona `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CotStyle {
    None,
    Brief,
    Long,
    #[serde(rename = "SOAP")]
    Soap,
}

impl CotStyle {
    pub fn is_cot(self) -> bool {
        self != CotStyle::None
    }
}

impl fmt::Display for CotStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CotStyle::None => "None",
            CotStyle::Brief => "Brief",
            CotStyle::Long => "Long",
            CotStyle::Soap => "SOAP",
        })
    }
}

impl FromStr for CotStyle {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(CotStyle::None),
            "brief" => Ok(CotStyle::Brief),
            "long" => Ok(CotStyle::Long),
            "soap" => Ok(CotStyle::Soap),
            _ => Err(format!("unknown CoT style `{s}` (expected None, Brief, Long or SOAP)")),
        }
    }
}

/// Everything that determines a rendered end-to-end prompt besides the notes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSpec {
    pub persona: Persona,
    pub shots: usize,
    pub cot_style: CotStyle,
    pub type_hint: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_hint: Option<String>,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self { persona: Persona::ClinicianAssistant, shots: 8, cot_style: CotStyle::Brief, type_hint: true, span_hint: None }
    }
}

impl PromptSpec {
    /// Shot counts outside the replicated grid {0, 2, 4, 8} are allowed but flagged.
    pub fn is_replication_shot_count(&self) -> bool {
        matches!(self.shots, 0 | 2 | 4 | 8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IclExample {
    pub note: ClinicalNote,
    pub gold: GoldLabel,
    reason: Option<(CotStyle, String)>,
}

impl IclExample {
    pub fn new(note: ClinicalNote, gold: GoldLabel) -> Self {
        Self { note, gold, reason: None }
    }

    pub fn with_reason(note: ClinicalNote, gold: GoldLabel, style: CotStyle, reason: impl Into<String>) -> Self {
        Self { note, gold, reason: Some((style, reason.into())) }
    }

    pub fn reason(&self) -> Option<&str> {
        self.reason.as_ref().map(|(_, r)| r.as_str())
    }

    pub fn reason_style(&self) -> Option<CotStyle> {
        self.reason.as_ref().map(|(s, _)| *s)
    }
}

/// One line of a persisted reason bank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonEntry {
    pub note_id: String,
    pub reason_style: CotStyle,
    pub reason: String,
}

pub fn render_system_prompt(persona: Persona) -> ChatMessage {
    let opening = match persona.noun_phrase() {
        Some(role) => format!("You are {role} tasked"),
        None => "You are tasked".to_string(),
    };
    ChatMessage::system(format!("{opening}{}", templates::SYSTEM_AFTER_ROLE))
}

/// The answer object the model is asked to emit, pretty-printed.
pub fn render_answer_json(gold: &GoldLabel, reason: Option<&str>) -> String {
    #[derive(Serialize)]
    struct Answer<'a> {
        #[serde(skip_serializing_if = "Option::is_none")]
        reason: Option<&'a str>,
        incorrect_sentence_id: String,
        correction: &'a str,
    }
    let answer = if gold.has_error() {
        Answer {
            reason,
            incorrect_sentence_id: gold.error_sid.to_string(),
            correction: gold.corrected_sentence.as_deref().unwrap_or("NA"),
        }
    } else {
        Answer { reason, incorrect_sentence_id: "-1".into(), correction: "NA" }
    };
    serde_json::to_string_pretty(&answer).expect("answer serializes")
}

fn hint_lines(spec: &PromptSpec) -> Vec<String> {
    let mut lines = Vec::new();
    if spec.type_hint {
        lines.push(format!("- {}", templates::TYPE_HINT));
    }
    if let Some(span) = &spec.span_hint {
        lines.push(format!("- {}", templates::span_hint(span)));
    }
    lines
}

fn render_query_turn(note: &ClinicalNote, hints: &[String], cot: bool) -> String {
    let mut out = format!("Clinical text:\n\n{}\n\n", render_numbered_note(note));
    if hints.is_empty() {
        out.push_str(templates::TASK);
        out.push('\n');
    } else {
        out.push_str(templates::TASK);
        out.push(' ');
        out.push_str(templates::TASK_FOLLOW_HINTS);
        out.push_str("\nHint:\n");
        for h in hints {
            out.push_str(h);
            out.push('\n');
        }
    }
    if cot {
        out.push_str(templates::STEP_BY_STEP);
        out.push('\n');
    }
    out.push_str("Answer:");
    out
}

/// The final user turn for `note` under `spec`, without system prompt or examples.
pub fn render_query(note: &ClinicalNote, spec: &PromptSpec) -> String {
    render_query_turn(note, &hint_lines(spec), spec.cot_style.is_cot())
}

/// System prompt, then one user/assistant pair per example, then the query turn.
pub fn render_e2e_prompt(
    note: &ClinicalNote,
    examples: &[IclExample],
    spec: &PromptSpec,
) -> Result<Vec<ChatMessage>, PromptError> {
    if examples.len() != spec.shots {
        return Err(PromptError::ShotMismatch { expected: spec.shots, got: examples.len() });
    }
    let cot = spec.cot_style.is_cot();
    let mut messages = vec![render_system_prompt(spec.persona)];
    for ex in examples {
        let reason = match (cot, &ex.reason) {
            (true, Some((style, r))) if *style == spec.cot_style => Some(r.as_str()),
            (true, _) => {
                return Err(PromptError::MissingReason {
                    note_id: ex.note.note_id().to_string(),
                    style: spec.cot_style,
                })
            }
            (false, None) => None,
            (false, Some(_)) => {
                return Err(PromptError::UnexpectedReason { note_id: ex.note.note_id().to_string() })
            }
        };
        messages.push(ChatMessage::user(render_query_turn(&ex.note, &[], cot)));
        messages.push(ChatMessage::assistant(render_answer_json(&ex.gold, reason)));
    }
    messages.push(ChatMessage::user(render_query(note, spec)));
    Ok(messages)
}

/// Asks the model to justify a known gold correction in the given style.
pub fn render_reason_request(
    note: &ClinicalNote,
    gold: &GoldLabel,
    style: CotStyle,
) -> Result<Vec<ChatMessage>, PromptError> {
    let instruction = match style {
        CotStyle::None => return Err(PromptError::NoCotStyle),
        CotStyle::Brief => templates::REASON_BRIEF,
        CotStyle::Long => templates::REASON_LONG,
        CotStyle::Soap => templates::REASON_SOAP,
    };
    let gold_block = if gold.has_error() {
        let sid = gold.error_sid as usize;
        format!(
            "Incorrect sentence id: {sid}\nIncorrect sentence: {}\nCorrected sentence: {}",
            note.sentence(sid).unwrap_or_default(),
            gold.corrected_sentence.as_deref().unwrap_or_default()
        )
    } else {
        templates::REASON_NO_ERROR.to_string()
    };
    let body = format!(
        "{}\n\nClinical text:\n\n{}\n\nGround truth:\n{}\n\n{}",
        templates::REASON_PREAMBLE,
        render_numbered_note(note),
        gold_block,
        instruction
    );
    Ok(vec![ChatMessage::system(templates::REASON_SYSTEM), ChatMessage::user(body)])
}

/// A note with one span replaced by [`BLANK`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlankedNote {
    /// Full note text, sentences joined by spaces.
    pub text: String,
    /// The affected sentence after blanking.
    pub sentence: String,
    pub sid: usize,
}

/// Replaces the first occurrence of `span` (in sentence order) with [`BLANK`].
pub fn blank_out_span(note: &ClinicalNote, span: &str) -> Result<BlankedNote, PromptError> {
    if span.is_empty() {
        return Err(PromptError::SpanNotFound(span.to_string()));
    }
    let hit = note.sentences().iter().find(|s| s.text.contains(span));
    let Some(hit) = hit else {
        return if note.plain_text().contains(span) {
            Err(PromptError::SpanCrossesSentence(span.to_string()))
        } else {
            Err(PromptError::SpanNotFound(span.to_string()))
        };
    };
    let sentence = hit.text.replacen(span, BLANK, 1);
    let text = note
        .sentences()
        .iter()
        .map(|s| if s.sid == hit.sid { sentence.as_str() } else { s.text.as_str() })
        .collect::<Vec<_>>()
        .join(" ");
    Ok(BlankedNote { text, sentence, sid: hit.sid })
}

fn option_keys(n: usize) -> Vec<String> {
    if n == 1 {
        vec!["option".to_string()]
    } else {
        (1..=n).map(|i| format!("option_{i}")).collect()
    }
}

/// `'option'` or `'option_1', 'option_2' and 'option_3'`.
fn quoted_key_list(n: usize) -> String {
    let keys: Vec<String> = option_keys(n).into_iter().map(|k| format!("'{k}'")).collect();
    match keys.split_last() {
        Some((last, rest)) if !rest.is_empty() => format!("{} and {last}", rest.join(", ")),
        _ => keys.join(""),
    }
}

/// The JSON keys an option-generation reply for `n` candidates uses.
pub fn expected_option_keys(n: usize) -> Vec<String> {
    option_keys(n)
}

pub fn render_mcq_option_request(
    blanked: &BlankedNote,
    predicted_span: &str,
    n: usize,
) -> Result<Vec<ChatMessage>, PromptError> {
    if n == 0 {
        return Err(PromptError::NoOptions);
    }
    let content = format!(
        "{intro}\n\nIn the following clinical note, what should the {BLANK} in the sentence \"{sentence}\" \
         be replaced with if \"{span}\" is incorrect? Do not answer with \"{span}\" or its medical synonyms \
         in your answer. Output your response in JSON format, with keys {keys}.\n\nClinical note:\n\n{note}",
        intro = templates::MCQ_INTRO,
        sentence = blanked.sentence,
        span = predicted_span,
        keys = quoted_key_list(n),
        note = blanked.text,
    );
    Ok(vec![ChatMessage::user(content)])
}

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Lettered answer options; exactly one of them is the predicted span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionSet {
    options: Vec<(char, String)>,
    injected_index: usize,
}

impl OptionSet {
    pub fn new(texts: Vec<String>, injected_index: usize) -> Result<Self, PromptError> {
        if texts.len() > 26 {
            return Err(PromptError::TooManyOptions(texts.len()));
        }
        if injected_index >= texts.len() {
            return Err(PromptError::InjectedIndex { index: injected_index, max: texts.len().saturating_sub(1) });
        }
        let mut seen = HashSet::new();
        for t in &texts {
            if !seen.insert(fold(t)) {
                return Err(PromptError::InvalidOptionSet(format!("duplicate option `{t}`")));
            }
        }
        let options = texts.into_iter().enumerate().map(|(i, t)| ((b'A' + i as u8) as char, t)).collect();
        Ok(Self { options, injected_index })
    }

    pub fn options(&self) -> &[(char, String)] {
        &self.options
    }

    pub fn len(&self) -> usize {
        self.options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.options.is_empty()
    }

    pub fn injected_index(&self) -> usize {
        self.injected_index
    }

    pub fn predicted_span(&self) -> &str {
        &self.options[self.injected_index].1
    }

    pub fn by_letter(&self, letter: char) -> Option<(usize, &str)> {
        let letter = letter.to_ascii_uppercase();
        self.options.iter().position(|(l, _)| *l == letter).map(|i| (i, self.options[i].1.as_str()))
    }

    pub fn by_text(&self, text: &str) -> Option<(usize, &str)> {
        let needle = fold(text);
        self.options.iter().position(|(_, t)| fold(t) == needle).map(|i| (i, self.options[i].1.as_str()))
    }
}

/// Inserts `predicted_span` among the generated candidates at `injected_index`.
///
/// Candidates that case-fold to the span, or to an earlier candidate, are
/// dropped first; the index is validated against the surviving list.
pub fn assemble_options(
    generated: &[String],
    predicted_span: &str,
    injected_index: usize,
) -> Result<OptionSet, PromptError> {
    if generated.is_empty() {
        return Err(PromptError::NoOptions);
    }
    if injected_index > generated.len() {
        return Err(PromptError::InjectedIndex { index: injected_index, max: generated.len() });
    }
    let span_key = fold(predicted_span);
    let mut seen = HashSet::from([span_key]);
    let mut texts: Vec<String> = generated
        .iter()
        .map(|g| g.trim().to_string())
        .filter(|g| !g.is_empty() && seen.insert(fold(g)))
        .collect();
    if texts.is_empty() {
        return Err(PromptError::DegenerateOptions);
    }
    let at = injected_index.min(texts.len());
    texts.insert(at, predicted_span.to_string());
    OptionSet::new(texts, at)
}

pub fn render_mcq_question(blanked: &BlankedNote, options: &OptionSet) -> Result<Vec<ChatMessage>, PromptError> {
    if options.len() > 26 {
        return Err(PromptError::TooManyOptions(options.len()));
    }
    let listed = options
        .options()
        .iter()
        .map(|(l, t)| format!("{l}. {t}"))
        .collect::<Vec<_>>()
        .join("\n");
    let content = format!(
        "{intro}\n\nIn the following clinical note, what should the {BLANK} in the sentence \"{sentence}\" \
         be replaced with for it to be medically informative and accurate? Choose one from the options \
         given below. Output your response in JSON format, with a key 'Answer'.\n\nClinical note:\n\n{note}\
         \n\nOptions:\n\n{listed}",
        intro = templates::MCQ_INTRO,
        sentence = blanked.sentence,
        note = blanked.text,
    );
    Ok(vec![ChatMessage::user(content)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Source;

    fn note() -> ClinicalNote {
        ClinicalNote::new("q", Source::MS, ["Fever for 3 days.", "Suspected of primary ciliary dyskinesia."]).unwrap()
    }

    #[test]
    fn personas_substitute_role_phrase() {
        let base = render_system_prompt(Persona::ClinicianAssistant).content;
        assert!(base.starts_with("You are a clinician assistant tasked with reviewing clinical texts"));
        let clin = render_system_prompt(Persona::Clinician).content;
        assert_eq!(clin, base.replacen("a clinician assistant", "a clinician", 1));
        let none = render_system_prompt(Persona::None).content;
        assert_eq!(none, base.replacen("a clinician assistant ", "", 1));
        assert!(!none.contains("You are a"));
    }

    #[test]
    fn persona_parse_round_trip() {
        for p in Persona::ALL {
            assert_eq!(p.as_str().parse::<Persona>().unwrap(), p);
        }
        assert!("surgeon".parse::<Persona>().is_err());
    }

    #[test]
    fn hint_block_omitted_when_toggled_off() {
        let spec = PromptSpec { shots: 0, cot_style: CotStyle::None, type_hint: false, ..Default::default() };
        let msgs = render_e2e_prompt(&note(), &[], &spec).unwrap();
        assert_eq!(msgs.len(), 2);
        assert!(!msgs[1].content.contains("Hint:"));
        assert!(!msgs[1].content.contains("Let's think step by step"));
    }

    #[test]
    fn shot_count_must_match() {
        let spec = PromptSpec { shots: 2, cot_style: CotStyle::None, ..Default::default() };
        assert_eq!(
            render_e2e_prompt(&note(), &[], &spec).unwrap_err(),
            PromptError::ShotMismatch { expected: 2, got: 0 }
        );
    }

    #[test]
    fn cot_examples_need_matching_reasons() {
        let ex = IclExample::with_reason(note(), GoldLabel::no_error(), CotStyle::Long, "r");
        let spec = PromptSpec { shots: 1, cot_style: CotStyle::Brief, ..Default::default() };
        assert!(matches!(render_e2e_prompt(&note(), &[ex.clone()], &spec), Err(PromptError::MissingReason { .. })));
        let spec = PromptSpec { shots: 1, cot_style: CotStyle::Long, ..Default::default() };
        let msgs = render_e2e_prompt(&note(), &[ex], &spec).unwrap();
        assert_eq!(msgs.len(), 4);
        assert_eq!(msgs[2].role, Role::Assistant);
        assert!(msgs[2].content.contains("\"reason\": \"r\""));
    }

    #[test]
    fn answer_json_for_error_and_no_error() {
        let g = GoldLabel::error(1, "Suspected of asthma.", None);
        let v: serde_json::Value = serde_json::from_str(&render_answer_json(&g, None)).unwrap();
        assert_eq!(v["incorrect_sentence_id"], "1");
        assert_eq!(v["correction"], "Suspected of asthma.");
        assert!(v.get("reason").is_none());
        let v: serde_json::Value = serde_json::from_str(&render_answer_json(&GoldLabel::no_error(), Some("ok"))).unwrap();
        assert_eq!(v["incorrect_sentence_id"], "-1");
        assert_eq!(v["correction"], "NA");
    }

    #[test]
    fn reason_request_rejects_none_style() {
        assert_eq!(
            render_reason_request(&note(), &GoldLabel::no_error(), CotStyle::None).unwrap_err(),
            PromptError::NoCotStyle
        );
        let soap = render_reason_request(&note(), &GoldLabel::error(1, "Suspected of asthma.", None), CotStyle::Soap)
            .unwrap();
        for label in ["Subjective:", "Objective:", "Assessment:", "Plan:", "Inconsistency:"] {
            assert!(soap[1].content.contains(label), "{label}");
        }
    }

    #[test]
    fn blanking() {
        let b = blank_out_span(&note(), "primary ciliary dyskinesia").unwrap();
        assert_eq!(b.sentence, "Suspected of <BLANK>.");
        assert_eq!(b.sid, 1);
        assert_eq!(b.text, "Fever for 3 days. Suspected of <BLANK>.");
        assert!(matches!(blank_out_span(&note(), "asthma"), Err(PromptError::SpanNotFound(_))));
        assert!(matches!(
            blank_out_span(&note(), "days. Suspected"),
            Err(PromptError::SpanCrossesSentence(_))
        ));
        let twice = ClinicalNote::new("t", Source::MS, ["CT then CT again."]).unwrap();
        assert_eq!(blank_out_span(&twice, "CT").unwrap().sentence, "<BLANK> then CT again.");
    }

    #[test]
    fn option_request_needs_positive_n() {
        let b = blank_out_span(&note(), "primary ciliary dyskinesia").unwrap();
        assert_eq!(render_mcq_option_request(&b, "x", 0).unwrap_err(), PromptError::NoOptions);
        let two = render_mcq_option_request(&b, "x", 2).unwrap();
        assert!(two[0].content.contains("with keys 'option_1' and 'option_2'."));
    }

    #[test]
    fn option_assembly() {
        let span = "primary ciliary dyskinesia";
        let set = assemble_options(&["asthma".into()], span, 1).unwrap();
        assert_eq!(set.options(), &[('A', "asthma".to_string()), ('B', span.to_string())]);
        let set = assemble_options(&["asthma".into()], span, 0).unwrap();
        assert_eq!(set.options()[0], ('A', span.to_string()));
        let set = assemble_options(&["Asthma".into(), "asthma".into()], span, 1).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(
            assemble_options(&["Primary Ciliary Dyskinesia".into()], span, 0).unwrap_err(),
            PromptError::DegenerateOptions
        );
        assert!(assemble_options(&["a".into()], span, 2).is_err());
    }

    #[test]
    fn letter_exhaustion() {
        let texts: Vec<String> = (0..27).map(|i| format!("o{i}")).collect();
        assert_eq!(OptionSet::new(texts, 0).unwrap_err(), PromptError::TooManyOptions(27));
    }
}
