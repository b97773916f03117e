use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use medcorr_core::config::RunConfig;
use medcorr_core::corpus::{load_dataset, Dataset, Split};
use medcorr_core::eval::{evaluate as score, load_external_scores, NlgMetrics};
use medcorr_core::gateway::{BackendConfig, ChatBackend, Gateway, MockBackend, MockScript, OpenAiBackend};
use medcorr_core::pipeline::{
    build_icl_bank, load_predictions, load_reason_bank, run_dataset, write_predictions, ExampleStore, PredictorChoice,
    RunContext, RunOptions, Strategy,
};
use medcorr_core::prompt::{CotStyle, Persona};
use medcorr_core::retrieval::{corpus_hash, Bm25Index};
use medcorr_core::sensitivity::{mcq_position_experiment, position_analysis, role_sweep, ScoreMetric, SweepRow};
use medcorr_core::span::{dataset_to_squad, evaluate_spans, load_offline_predictions, RemoteSpanClient, SpanPredictor};
use medcorr_core::stats::Adjustment;
use serde::Serialize;

use crate::{Analysis, ConfigArgs, SpanAction};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CEILING: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

trait Classify<T> {
    fn usage(self) -> Result<T, CliError>;
    fn data(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, CliError> {
        self.map_err(|e| CliError { code: EXIT_USAGE, error: e.into() })
    }
    fn data(self) -> Result<T, CliError> {
        self.map_err(|e| CliError { code: EXIT_DATA, error: e.into() })
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_USAGE, error: anyhow!(msg.into()) }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse::<Split>().map_err(|e| usage(e.to_string()))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides).usage()?;
    cfg.validate().usage()?;
    Ok(cfg)
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| usage(format!("`{key}` must be set")))
}

fn load_labeled(path: &Path, split: Split) -> Result<Dataset, CliError> {
    let ds = load_dataset(path, split).with_context(|| format!("loading {}", path.display())).data()?;
    if ds.is_empty() {
        return Err(CliError { code: EXIT_DATA, error: anyhow!("{} contains no notes", path.display()) });
    }
    Ok(ds)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).data()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn build_gateway(backend: &BackendConfig, cfg: &RunConfig) -> Result<Gateway, CliError> {
    let chat: Arc<dyn ChatBackend> = match &cfg.paths.mock_script {
        Some(p) => Arc::new(MockBackend::new(MockScript::load(p).usage()?)),
        None => Arc::new(OpenAiBackend::from_env(backend)),
    };
    let mut gw = Gateway::new(chat, backend.clone()).usage()?;
    if let Some(p) = &cfg.paths.response_cache {
        gw = gw.with_cache(p).data()?;
    }
    if let Some(p) = &cfg.paths.audit_log {
        gw = gw.with_audit_log(p).data()?;
    }
    Ok(gw)
}

fn build_predictor(choice: &PredictorChoice) -> Result<SpanPredictor, CliError> {
    Ok(match choice {
        PredictorChoice::None => SpanPredictor::None,
        PredictorChoice::GoldOracle => SpanPredictor::GoldOracle,
        PredictorChoice::Offline { path } => SpanPredictor::Offline(load_offline_predictions(path).data()?),
        PredictorChoice::Remote { url, timeout_secs } => {
            SpanPredictor::Remote(RemoteSpanClient::new(url.clone(), Duration::from_secs(*timeout_secs)))
        }
    })
}

/// The in-context example pool, or `None` when the strategy uses no examples.
fn build_store(cfg: &RunConfig) -> Result<Option<ExampleStore>, CliError> {
    let s = &cfg.strategy;
    if s.strategy == Strategy::Mcq || s.prompt.shots == 0 {
        return Ok(None);
    }
    let mut pool = load_labeled(required(&cfg.paths.train, "paths.train")?, Split::Train)?.records().to_vec();
    if s.include_validation_pool && cfg.run.split == Split::Test {
        pool.extend_from_slice(load_labeled(required(&cfg.paths.valid, "paths.valid")?, Split::Valid)?.records());
    }
    let bank = if s.prompt.cot_style.is_cot() {
        load_reason_bank(required(&cfg.paths.reason_bank, "paths.reason_bank")?).data()?
    } else {
        Vec::new()
    };
    let store = match &cfg.paths.bm25_cache {
        Some(cache) => {
            let texts: Vec<(String, String)> = pool.iter().map(|r| (r.id().to_string(), r.note.plain_text())).collect();
            let hash = corpus_hash(texts.iter().map(|(a, b)| (a.as_str(), b.as_str())), s.bm25);
            let cached = if cache.exists() { Bm25Index::load_cache(cache, &hash).data()? } else { None };
            let index = match cached {
                Some(i) => i,
                None => {
                    let i = Bm25Index::build(texts, s.bm25).data()?;
                    i.save_cache(cache, &hash).data()?;
                    i
                }
            };
            ExampleStore::with_index(pool, &bank, index).data()?
        }
        None => ExampleStore::new(pool, &bank, s.bm25).data()?,
    };
    Ok(Some(store))
}

pub fn ingest(input: &Path, split: &str, json: bool) -> Result<(), CliError> {
    let ds = load_labeled(input, parse_split(split)?)?;
    let summary = ds.summary();
    if json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    } else {
        print!("{summary}");
    }
    Ok(())
}

pub fn reason_bank(args: &ConfigArgs, style: Option<&str>) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let style = match style {
        Some(s) => s.parse::<CotStyle>().map_err(usage)?,
        None => cfg.run.reason_style,
    };
    if !style.is_cot() {
        return Err(usage("reasons need a chain-of-thought style (Brief, Long or SOAP)"));
    }
    let train = load_labeled(required(&cfg.paths.train, "paths.train")?, Split::Train)?;
    let bank = required(&cfg.paths.reason_bank, "paths.reason_bank")?;
    let gw = build_gateway(&cfg.reason_backend, &cfg)?;
    let report = build_icl_bank(&train, style, &gw, bank).data()?;
    println!(
        "{style} reasons: {} notes, {} already present, {} requested, {} completed, {} failed",
        report.total,
        report.already_present,
        report.requested,
        report.completed,
        report.failures.len()
    );
    for f in &report.failures {
        eprintln!("  {}: {}", f.note_id, f.error);
    }
    if report.requested > 0 && report.failures.len() as f64 / report.requested as f64 > cfg.run.failure_ceiling {
        return Err(CliError { code: EXIT_CEILING, error: anyhow!("reason failures exceed the failure ceiling") });
    }
    Ok(())
}

pub fn predict(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let out = required(&cfg.paths.predictions, "paths.predictions")?.to_path_buf();
    let split = cfg.run.split;
    let ds_path = cfg.dataset_path(split).ok_or_else(|| usage(format!("no dataset path for split {split}")))?;
    let ds = load_labeled(ds_path, split)?;
    let store = build_store(&cfg)?;
    let gateway = build_gateway(&cfg.backend, &cfg)?;
    let predictor = build_predictor(&cfg.strategy.predictor)?;
    let ctx = RunContext { gateway: &gateway, store: store.as_ref(), predictor: &predictor, split };
    let opts = RunOptions { failure_ceiling: cfg.run.failure_ceiling };
    let run = run_dataset(&ds, &cfg.strategy, &ctx, opts).usage()?;

    write_predictions(&out, &run.results).data()?;
    write_json(&sibling(&out, ".manifest.json"), &run.manifest)?;
    fs::write(sibling(&out, ".config.toml"), cfg.to_toml_string()).data()?;
    println!(
        "{} predictions written to {} ({} failures, {} fallbacks)",
        run.results.len(),
        out.display(),
        run.manifest.failure_count,
        run.manifest.fallback_count
    );
    if run.manifest.ceiling_exceeded {
        return Err(CliError {
            code: EXIT_CEILING,
            error: anyhow!("{} of {} notes failed, above the ceiling {}", run.manifest.failure_count, run.manifest.n_notes, opts.failure_ceiling),
        });
    }
    Ok(())
}

fn nlg_metrics(sidecar: Option<&Path>) -> Result<NlgMetrics, CliError> {
    Ok(match sidecar {
        Some(p) => NlgMetrics::with_external(load_external_scores(p).data()?),
        None => NlgMetrics::rouge_only(),
    })
}

pub fn evaluate(predictions: &Path, gold: &Path, split: &str, sidecar: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let preds = load_predictions(predictions).data()?;
    let golds = load_labeled(gold, parse_split(split)?)?;
    let report = score(&preds, &golds, &nlg_metrics(sidecar)?).data()?;
    print!("{report}");
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepOutput<'a, K: Serialize> {
    hash_modulo_persona: Option<&'a str>,
    rows: &'a [SweepRow<K>],
}

fn sweep_table<K: std::fmt::Display>(rows: &[SweepRow<K>], label: &str) -> String {
    let mut out = format!("{label}\tacc_flag\tacc_sent_id\trouge1\tscore_agg\n");
    for r in rows {
        let m = &r.report.macro_avg;
        let agg = m.score_agg.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!("{}\t{:.4}\t{:.4}\t{:.4}\t{agg}\n", r.key, m.acc_flag, m.acc_sent_id, m.rouge1));
    }
    out
}

fn ceiling_check<K>(rows: &[SweepRow<K>]) -> Result<(), CliError> {
    if rows.iter().any(|r| r.manifest.ceiling_exceeded) {
        return Err(CliError { code: EXIT_CEILING, error: anyhow!("a run exceeded the failure ceiling") });
    }
    Ok(())
}

/// Config, labelled notes and run plumbing shared by the sweep analyses.
fn sweep_inputs(args: &ConfigArgs) -> Result<(RunConfig, Dataset), CliError> {
    let cfg = load_config(args)?;
    let split = cfg.run.split;
    let ds_path = cfg.dataset_path(split).ok_or_else(|| usage(format!("no dataset path for split {split}")))?;
    let ds = load_labeled(ds_path, split)?;
    if !ds.has_labels() {
        return Err(CliError { code: EXIT_DATA, error: anyhow!("the {split} set has no gold labels to score against") });
    }
    Ok((cfg, ds))
}

pub fn sensitivity(analysis: Analysis) -> Result<(), CliError> {
    match analysis {
        Analysis::Position { predictions, gold, split, metric, sidecar, adjustment, out_dir } => {
            let metric: ScoreMetric = metric.parse().map_err(usage)?;
            let adjustment = match adjustment.to_ascii_lowercase().as_str() {
                "none" => Adjustment::None,
                "bonferroni" => Adjustment::Bonferroni,
                other => return Err(usage(format!("unknown adjustment `{other}` (expected none or bonferroni)"))),
            };
            let preds = load_predictions(&predictions).data()?;
            let golds = load_labeled(&gold, parse_split(&split)?)?;
            let report = position_analysis(&preds, &golds, &nlg_metrics(sidecar.as_deref())?, metric, adjustment).data()?;
            fs::create_dir_all(&out_dir).data()?;
            write_json(&out_dir.join("position.json"), &report)?;
            fs::write(out_dir.join("position_quartiles.csv"), report.quartile_csv()).data()?;
            for b in &report.bins {
                println!("{:<10} n={}", b.bin.as_str(), b.scores.len());
            }
            match (&report.kruskal, &report.skipped) {
                (Some(h), _) => println!("Kruskal-Wallis H={:.4} df={} p={:.4}", h.h, h.df, h.p),
                (None, Some(why)) => println!("tests skipped: {why}"),
                (None, None) => {}
            }
            Ok(())
        }
        Analysis::Roles { config, roles, out_dir } => {
            let roles: Vec<Persona> = if roles.is_empty() {
                Persona::ALL.to_vec()
            } else {
                roles.iter().map(|r| r.parse::<Persona>().map_err(usage)).collect::<Result<_, _>>()?
            };
            let (cfg, ds) = sweep_inputs(&config)?;
            let store = build_store(&cfg)?;
            let gateway = build_gateway(&cfg.backend, &cfg)?;
            let predictor = build_predictor(&cfg.strategy.predictor)?;
            let ctx = RunContext { gateway: &gateway, store: store.as_ref(), predictor: &predictor, split: cfg.run.split };
            let opts = RunOptions { failure_ceiling: cfg.run.failure_ceiling };
            let nlg = nlg_metrics(cfg.paths.sidecar_scores.as_deref())?;
            let sweep = role_sweep(&ds, &cfg.strategy, &roles, &ctx, opts, &nlg).usage()?;
            fs::create_dir_all(&out_dir).data()?;
            write_json(&out_dir.join("roles.json"), &SweepOutput { hash_modulo_persona: Some(&sweep.hash_modulo_persona), rows: &sweep.rows })?;
            let table = sweep_table(&sweep.rows, "role");
            fs::write(out_dir.join("roles.tsv"), &table).data()?;
            print!("{table}");
            ceiling_check(&sweep.rows)
        }
        Analysis::McqPosition { config, positions, out_dir } => {
            let positions: [usize; 2] =
                positions.try_into().map_err(|_| usage("--positions takes exactly two indices"))?;
            let (cfg, ds) = sweep_inputs(&config)?;
            let gateway = build_gateway(&cfg.backend, &cfg)?;
            let predictor = build_predictor(&cfg.strategy.predictor)?;
            let ctx = RunContext { gateway: &gateway, store: None, predictor: &predictor, split: cfg.run.split };
            let opts = RunOptions { failure_ceiling: cfg.run.failure_ceiling };
            let nlg = nlg_metrics(cfg.paths.sidecar_scores.as_deref())?;
            let rows = mcq_position_experiment(&ds, &cfg.strategy, positions, &ctx, opts, &nlg).usage()?;
            fs::create_dir_all(&out_dir).data()?;
            write_json(&out_dir.join("mcq_position.json"), &SweepOutput { hash_modulo_persona: None, rows: &rows })?;
            let table = sweep_table(&rows, "injected_index");
            fs::write(out_dir.join("mcq_position.tsv"), &table).data()?;
            print!("{table}");
            ceiling_check(&rows)
        }
    }
}

pub fn span_export(action: SpanAction) -> Result<(), CliError> {
    match action {
        SpanAction::Squad { input, split, out } => {
            let ds = load_labeled(&input, parse_split(&split)?)?;
            let records = dataset_to_squad(&ds).data()?;
            let lines: String = records.iter().map(|r| r.to_squad_json().to_string() + "\n").collect();
            fs::write(&out, lines).data()?;
            println!("{} SQuAD records written to {}", records.len(), out.display());
            Ok(())
        }
        SpanAction::Import { predictions, input, split } => {
            let split = parse_split(&split)?;
            let ds = load_labeled(&input, split)?;
            let offline = load_offline_predictions(&predictions).data()?;
            if let Some(unknown) = offline.keys().find(|id| ds.get(id).is_none()) {
                return Err(CliError { code: EXIT_DATA, error: anyhow!("prediction for unknown note {unknown}") });
            }
            let predictor = SpanPredictor::Offline(offline);
            let mut predicted = HashMap::new();
            let mut golds = HashMap::new();
            for r in ds.records() {
                if let Some(p) = predictor.predict(r, split).data()? {
                    predicted.insert(r.id().to_string(), p.text);
                }
                if let Some(span) = r.gold.as_ref().and_then(|g| g.resolve_span(&r.note)) {
                    golds.insert(r.id().to_string(), span);
                }
            }
            println!("{} span predictions are consistent with {}", predicted.len(), input.display());
            if !golds.is_empty() {
                predicted.retain(|id, _| golds.contains_key(id));
                for id in golds.keys() {
                    predicted.entry(id.clone()).or_default();
                }
                let (em, f1) = evaluate_spans(&predicted, &golds).data()?;
                println!("EM {em:.2}  F1 {f1:.2} over {} error notes", golds.len());
            }
            Ok(())
        }
    }
}

