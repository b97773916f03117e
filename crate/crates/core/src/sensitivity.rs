//! Sensitivity analyses: where in the note the error sits, which role the
//! model is asked to play, and where the predicted span appears among MCQ options.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::eval::{evaluate, score_correction, EvalError, MetricReport, NlgMetrics};
use crate::pipeline::{
    config_hash, config_hash_without_persona, run_dataset, CorrectionResult, PipelineError, RunContext, RunManifest,
    RunOptions, Strategy, StrategyConfig,
};
use crate::prompt::Persona;
use crate::stats::{dunn_posthoc, kruskal_wallis, Adjustment, DunnResult, HTestResult, StatsError};

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("sentence id {sid} is outside a note of {n} sentences")]
    SidOutOfRange { sid: i64, n: usize },
    #[error("invalid analysis configuration: {0}")]
    Config(String),
    #[error("metric {0} has no score for note {1}")]
    MissingScore(ScoreMetric, String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionBin {
    Beginning,
    Middle,
    End,
}

impl PositionBin {
    pub const ALL: [PositionBin; 3] = [PositionBin::Beginning, PositionBin::Middle, PositionBin::End];

    pub fn as_str(self) -> &'static str {
        match self {
            PositionBin::Beginning => "beginning",
            PositionBin::Middle => "middle",
            PositionBin::End => "end",
        }
    }
}

/// Index 0 is the beginning (even in a one-sentence note), the last index the end.
pub fn bin_position(sid: i64, n_sentences: usize) -> Result<PositionBin, SensitivityError> {
    if sid < 0 || sid as usize >= n_sentences {
        return Err(SensitivityError::SidOutOfRange { sid, n: n_sentences });
    }
    let sid = sid as usize;
    Ok(if sid == 0 {
        PositionBin::Beginning
    } else if sid == n_sentences - 1 {
        PositionBin::End
    } else {
        PositionBin::Middle
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMetric {
    Rouge1,
    Bertscore,
    Bleurt,
}

impl std::fmt::Display for ScoreMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMetric::Rouge1 => "rouge1",
            ScoreMetric::Bertscore => "bertscore",
            ScoreMetric::Bleurt => "bleurt",
        })
    }
}

impl std::str::FromStr for ScoreMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rouge1" => Ok(ScoreMetric::Rouge1),
            "bertscore" => Ok(ScoreMetric::Bertscore),
            "bleurt" => Ok(ScoreMetric::Bleurt),
            _ => Err(format!("unknown metric `{s}` (expected rouge1, bertscore or bleurt)")),
        }
    }
}

/// Five-number summary plus mean; quartiles interpolate linearly between order statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            n: v.len(),
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinScores {
    pub bin: PositionBin,
    pub scores: Vec<f64>,
    pub summary: Option<Distribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub metric: ScoreMetric,
    pub adjustment: Adjustment,
    pub tie_corrected: bool,
    pub bins: Vec<BinScores>,
    pub kruskal: Option<HTestResult>,
    /// Pair indices refer to `bins`.
    pub dunn: Option<DunnResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl PositionReport {
    /// One row per bin, for external plotting.
    pub fn quartile_csv(&self) -> String {
        let mut out = String::from("bin,n,min,q1,median,q3,max,mean\n");
        for b in &self.bins {
            match &b.summary {
                Some(d) => {
                    let _ = writeln!(out, "{},{},{},{},{},{},{},{}", b.bin.as_str(), d.n, d.min, d.q1, d.median, d.q3, d.max, d.mean);
                }
                None => {
                    let _ = writeln!(out, "{},0,,,,,,", b.bin.as_str());
                }
            }
        }
        out
    }
}

/// Per-item scores of the gold-error notes, grouped by where the gold error sits.
pub fn position_analysis(
    preds: &[CorrectionResult],
    golds: &Dataset,
    nlg: &NlgMetrics,
    metric: ScoreMetric,
    adjustment: Adjustment,
) -> Result<PositionReport, SensitivityError> {
    let by_id: HashMap<&str, &CorrectionResult> = preds.iter().map(|p| (p.note_id.as_str(), p)).collect();
    let mut grouped: HashMap<PositionBin, Vec<f64>> = HashMap::new();
    for r in golds.records() {
        let Some(gold) = r.gold.as_ref().filter(|g| g.has_error()) else { continue };
        let pred = by_id
            .get(r.id())
            .ok_or_else(|| EvalError::Misaligned(format!("no prediction for note {}", r.id())))?;
        let s = score_correction(pred, gold, nlg);
        let value = match metric {
            ScoreMetric::Rouge1 => Some(s.rouge1),
            ScoreMetric::Bertscore => s.bertscore,
            ScoreMetric::Bleurt => s.bleurt,
        }
        .ok_or_else(|| SensitivityError::MissingScore(metric, r.id().to_string()))?;
        grouped.entry(bin_position(gold.error_sid, r.note.len())?).or_default().push(value);
    }
    let bins: Vec<BinScores> = PositionBin::ALL
        .iter()
        .map(|&bin| {
            let scores = grouped.remove(&bin).unwrap_or_default();
            BinScores { bin, summary: Distribution::of(&scores), scores }
        })
        .collect();
    let small: Vec<&str> = bins.iter().filter(|b| b.scores.len() < 2).map(|b| b.bin.as_str()).collect();
    let (kruskal, dunn, skipped) = if small.is_empty() {
        let groups: Vec<&[f64]> = bins.iter().map(|b| b.scores.as_slice()).collect();
        (Some(kruskal_wallis(&groups)?), Some(dunn_posthoc(&groups, adjustment)?), None)
    } else {
        let why = format!("bins with fewer than 2 items: {}", small.join(", "));
        log::warn!("position tests skipped ({why})");
        (None, None, Some(why))
    };
    Ok(PositionReport { metric, adjustment, tie_corrected: true, bins, kruskal, dunn, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<K> {
    pub key: K,
    pub config_hash: String,
    pub report: MetricReport,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSweep {
    /// Shared by every row: the config hash with the persona blanked.
    pub hash_modulo_persona: String,
    pub rows: Vec<SweepRow<Persona>>,
}

/// Runs and scores the pipeline once per role, holding everything else fixed.
pub fn role_sweep(
    ds: &Dataset,
    base: &StrategyConfig,
    roles: &[Persona],
    ctx: &RunContext<'_>,
    opts: RunOptions,
    nlg: &NlgMetrics,
) -> Result<RoleSweep, SensitivityError> {
    if roles.is_empty() {
        return Err(SensitivityError::Config("no roles to sweep".into()));
    }
    if base.strategy == Strategy::Mcq {
        return Err(SensitivityError::Config("the role sweep needs a prompting strategy with a system prompt".into()));
    }
    let backend = ctx.gateway.config();
    let expected = config_hash_without_persona(base, backend);
    let mut rows = Vec::with_capacity(roles.len());
    for &role in roles {
        let mut cfg = base.clone();
        cfg.prompt.persona = role;
        if config_hash_without_persona(&cfg, backend) != expected {
            return Err(SensitivityError::Config(format!("run for role {role} differs in more than the persona")));
        }
        let out = run_dataset(ds, &cfg, ctx, opts)?;
        let report = evaluate(&out.results, ds, nlg)?;
        rows.push(SweepRow { key: role, config_hash: config_hash(&cfg, backend), report, manifest: out.manifest });
    }
    Ok(RoleSweep { hash_modulo_persona: expected, rows })
}

/// Two MCQ runs (two options in total) that differ only in where the predicted span is placed.
pub fn mcq_position_experiment(
    ds: &Dataset,
    cfg: &StrategyConfig,
    positions: [usize; 2],
    ctx: &RunContext<'_>,
    opts: RunOptions,
    nlg: &NlgMetrics,
) -> Result<Vec<SweepRow<usize>>, SensitivityError> {
    let mcq = match (cfg.strategy, cfg.mcq) {
        (Strategy::Mcq, Some(m)) if m.total_options == 2 => m,
        _ => return Err(SensitivityError::Config("the option-position experiment needs strategy mcq with 2 options".into())),
    };
    if positions[0] == positions[1] {
        return Err(SensitivityError::Config("the two positions must differ".into()));
    }
    let mut rows = Vec::with_capacity(2);
    for index in positions {
        let mut run_cfg = cfg.clone();
        run_cfg.mcq = Some(crate::pipeline::McqConfig { injected_index: index, ..mcq });
        run_cfg.validate()?;
        let out = run_dataset(ds, &run_cfg, ctx, opts)?;
        let report = evaluate(&out.results, ds, nlg)?;
        rows.push(SweepRow { key: index, config_hash: config_hash(&run_cfg, ctx.gateway.config()), report, manifest: out.manifest });
    }
    Ok(rows)
}
