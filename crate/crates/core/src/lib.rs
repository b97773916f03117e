//! Detection and correction of medical errors in clinical notes with LLM
//! prompting strategies, plus the metrics and analyses to evaluate them.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod sensitivity;
pub mod span;
pub mod stats;

pub use config::RunConfig;
pub use corpus::{ClinicalNote, Dataset, GoldLabel, Record, Source, Split};
pub use eval::{MetricReport, MetricRow, NlgMetrics};
pub use gateway::{BackendConfig, ChatBackend, Gateway, MockScript};
pub use pipeline::{CorrectionResult, ExampleStore, RunContext, Strategy, StrategyConfig};
pub use prompt::{ChatMessage, CotStyle, Persona, PromptSpec};
pub use retrieval::{Bm25Index, Bm25Params};
pub use span::{SpanPrediction, SpanPredictor};
