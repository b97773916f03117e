//! Literal prompt text.

/// Bumped whenever any template byte changes; recorded in run manifests.
pub const TEMPLATE_VERSION: &str = "2024.1";

/// System prompt text following "You are <role> tasked".
pub const SYSTEM_AFTER_ROLE: &str = " with reviewing clinical texts that have been corrupted by an evil third party. \
Each clinical text may contain either one perturbed sentence with clinical or factual inaccuracies, or no errors at all. \
Your objective is to help the clinician in identifying any perturbed sentence and provide a correction. \
Please respond in JSON format with the following structure:\n\n\
- 'reason': Describe the reasoning behind identifying a specific sentence as incorrect or all clinical text as correct.\n\
- 'incorrect_sentence_id': If you identify an incorrect sentence, provide its ID here. If all sentences are correct, respond with -1.\n\
- 'correction': If an incorrect sentence is identified, provide a corrected sentence or an explanation of the inaccuracy. \
If all sentences are correct, respond with 'NA'.\n\n\
When evaluating the text, focus specifically on clinical or factual inaccuracies. \
This could include incorrect medical information, factual errors related to patient care, or erroneous data interpretations. \
Your detailed assessment and correction are critical for ensuring the reliability and accuracy of our clinical documentation. \
You have to be more action-oriented, don't suggest planning, discussion, or something that is not action-oriented.";

pub const TASK: &str = "Task: Identify 1 incorrect sentence in the clinical text, or confirm if all sentences are correct. \
If there is 1 incorrect sentence, how would you fix it?";

pub const TASK_FOLLOW_HINTS: &str = "Follow the hints below if you see fit";

pub const TYPE_HINT: &str = "Pay special attention to biomedical entities such as chief complaints, medical exams, \
diagnoses, and treatments. The mistake often lies within these areas.";

pub const STEP_BY_STEP: &str = "Let's think step by step";

pub fn span_hint(span: &str) -> String {
    format!(
        "The clinician said that you MAY want to pay attention to the mention of '{span}'. \
         If you believe that the mention is incorrect, ONLY SWAP this mention with something more probable. \
         DO NOT MODIFY the sentence in any other way."
    )
}

pub const MCQ_INTRO: &str = "Your job is to review a clinical note that potentially contains a medical error.";

pub const REASON_SYSTEM: &str = "You are a clinician assistant who explains corrections of clinical texts. \
You are given a clinical text together with its ground-truth correction. \
Explain why the correction is right by identifying the incorrect span and the reasoning behind it.";

pub const REASON_PREAMBLE: &str = "The following clinical text was reviewed by a clinician, \
who produced the ground-truth correction below.";

pub const REASON_NO_ERROR: &str = "All sentences are correct; the clinical text contains no error.";

pub const REASON_BRIEF: &str = "Give a brief reasoning in one to three sentences. \
State what is wrong with the incorrect span and why the correction is more appropriate. \
If all sentences are correct, briefly explain why. Respond with the reasoning only.";

pub const REASON_LONG: &str = "Give a detailed step-by-step reasoning. \
Quote the incorrect sentence by its id, explain why it is inaccurate given the rest of the clinical text, \
and finish by stating the corrected sentence. If all sentences are correct, explain step by step why. \
Respond with the reasoning only.";

pub const REASON_SOAP: &str = "Organise your reasoning as a SOAP note before stating the inconsistency. \
Write exactly these labelled sections, one per line:\n\
Subjective: <the patient's reported history and symptoms>\n\
Objective: <examination findings, vital signs, laboratory and imaging results>\n\
Assessment: <the clinical assessment>\n\
Plan: <the management plan>\n\
Inconsistency: <which sentence is incorrect and why, or why all sentences are correct>\n\
Respond with the five sections only.";
