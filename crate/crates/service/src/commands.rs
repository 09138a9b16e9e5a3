use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;
use serde_json::{json, Value};

use udrt_core::classifier::{
    load_bank, save_bank, train, ClassifierBank, TrainConfig, TrainingExample,
};
use udrt_core::decision::{RetrainingSet, ReviewDesk, Thresholds, TrackDecision};
use udrt_core::evaluate::{auto_defects, score};
use udrt_core::format::{read_jsonl, write_jsonl, write_source, UdfgReader};
use udrt_core::ingest::{ColumnSource, FrameGeometry};
use udrt_core::pipeline::{self, MetricsRecorder, PipelineConfig, PipelineMetrics, PipelineReport};
use udrt_core::preprocess::FusionGroup;
use udrt_core::simulator::{
    generate_run, training_corpus, CorpusSpec, GroundTruthRecord, RunConfig,
};
use udrt_core::{Error, Result};

use crate::api::{router, AppState};
use crate::cli::{BenchArgs, Command, RunArgs, ServeArgs, SimulateArgs, ThresholdArgs, TrainArgs};

pub const THREADS_ENV: &str = "UDRT_THREADS";

pub fn execute(command: Command) -> Result<Value> {
    configure_threads()?;
    match command {
        Command::Simulate(a) => simulate(&a),
        Command::Train(a) => train_models(&a),
        Command::Run(a) => run(&a),
        Command::Bench(a) => bench(&a),
        Command::Serve(a) => serve(&a),
    }
}

/// Sizes the global worker pool from `UDRT_THREADS`. Calling it twice is
/// harmless.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "{THREADS_ENV} must be a positive integer, got `{raw}`"
        ))
    })?;
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn thresholds(args: &ThresholdArgs) -> Result<Thresholds> {
    for (name, v) in [
        ("min-confidence", args.min_confidence),
        ("min-margin", args.min_margin),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!(
                "--{name} must be in [0, 1], got {v}"
            )));
        }
    }
    Ok(Thresholds {
        confidence: args.min_confidence,
        margin: args.min_margin,
    })
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{} does not exist or is not a file",
            path.display()
        )))
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{} does not exist or is not a directory",
            path.display()
        )))
    }
}

/// `run.udfg` → `run.truth.jsonl`.
pub fn truth_path(udfg: &Path) -> PathBuf {
    udfg.with_extension("truth.jsonl")
}

fn simulate(a: &SimulateArgs) -> Result<Value> {
    let config = RunConfig {
        length_m: a.length_m,
        speed_kmh: a.speed_kmh,
        pulse_pitch_mm: a.pitch_mm,
        noise_sigma: a.noise,
        defect_density_per_km: a.density,
        seed: a.seed,
        ..RunConfig::default()
    };
    let (mut run, truth) = generate_run(&config)?;
    let records = write_source(&mut run, &a.out)?;
    let truth_file = truth_path(&a.out);
    write_jsonl(&truth_file, &truth)?;
    Ok(json!({
        "command": "simulate",
        "udfg": a.out,
        "truth": truth_file,
        "records": records,
        "indications": truth.len(),
    }))
}

#[derive(Debug, Serialize)]
struct GroupSummary {
    group: FusionGroup,
    simulated: usize,
    expert: usize,
    final_loss: Option<f64>,
    retrained: bool,
}

fn train_models(a: &TrainArgs) -> Result<Value> {
    let warm = match &a.warm_start {
        Some(dir) => {
            require_dir(dir)?;
            Some(load_bank(dir)?)
        }
        None => None,
    };
    let expert = match &a.retraining {
        Some(dir) => {
            require_dir(dir)?;
            Some(RetrainingSet::open(dir)?)
        }
        None => None,
    };
    let config = TrainConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let mut models = Vec::new();
    let mut summary = Vec::new();
    for group in FusionGroup::ALL {
        let mut data: Vec<TrainingExample> = if a.examples > 0 {
            training_corpus(
                group,
                &CorpusSpec {
                    examples: a.examples,
                    seed: a.seed,
                    ..CorpusSpec::default()
                },
            )?
        } else {
            Vec::new()
        };
        let simulated = data.len();
        if let Some(set) = &expert {
            data.extend(set.examples(group));
        }
        let prior = warm.as_ref().map(|b| b.model(group));
        if data.is_empty() {
            let model = prior.cloned().ok_or(Error::EmptyDataset)?;
            summary.push(GroupSummary {
                group,
                simulated,
                expert: 0,
                final_loss: model.training.final_loss,
                retrained: false,
            });
            models.push(model);
            continue;
        }
        let model = train(group, &data, &config, prior, |epoch, loss| {
            eprintln!("{group} epoch {epoch} loss {loss:.5}");
        })?;
        summary.push(GroupSummary {
            group,
            simulated,
            expert: data.len() - simulated,
            final_loss: model.training.final_loss,
            retrained: true,
        });
        models.push(model);
    }
    let bank = ClassifierBank::new(models)?;
    save_bank(&bank, &a.out)?;
    Ok(json!({ "command": "train", "models": a.out, "groups": summary }))
}

fn shared_desk(thresholds: Thresholds, retraining: RetrainingSet) -> pipeline::SharedDesk {
    Arc::new(Mutex::new(ReviewDesk::with_thresholds(
        retraining, thresholds,
    )))
}

fn run_file(
    input: &Path,
    bank: &ClassifierBank,
    thresholds: Thresholds,
    pace: Option<f64>,
) -> Result<PipelineReport> {
    let reader = UdfgReader::open(input)?;
    let desk = shared_desk(thresholds, RetrainingSet::in_memory());
    let metrics = Arc::new(Mutex::new(MetricsRecorder::default()));
    let config = PipelineConfig {
        thresholds,
        pace_columns_per_s: pace,
        ..PipelineConfig::default()
    };
    pipeline::run(reader, bank, &desk, &metrics, &config, |_| {})
}

fn run(a: &RunArgs) -> Result<Value> {
    require_file(&a.input)?;
    require_dir(&a.models)?;
    let thresholds = thresholds(&a.thresholds)?;
    let bank = load_bank(&a.models)?;
    let report = run_file(&a.input, &bank, thresholds, None)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.input.with_file_name("decisions.jsonl"));
    write_jsonl(&out, &report.decisions)?;
    if let Some(path) = &a.metrics {
        std::fs::write(path, serde_json::to_vec_pretty(&report.metrics)?)?;
    }
    let scored = match &a.truth {
        Some(path) => {
            require_file(path)?;
            let truth: Vec<GroundTruthRecord> = read_jsonl(path)?;
            let r = score(&report.decisions, &truth);
            Some(json!({
                "recall": r.recall(),
                "auto_precision": r.auto_precision(),
                "report": r,
            }))
        }
        None => None,
    };
    Ok(json!({
        "command": "run",
        "decisions_file": out,
        "decisions": report.metrics.decisions,
        "auto_accepted_defects": auto_defects(&report.decisions),
        "metrics": report.metrics,
        "score": scored,
    }))
}

/// Columns per second a probe carriage produces at `speed_kmh`.
pub fn required_columns_per_s(speed_kmh: f64, pulse_pitch_um: u32) -> f64 {
    speed_kmh * 1000.0 / 3600.0 * 1e6 / f64::from(pulse_pitch_um)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchVerdict {
    pub speed_kmh: f64,
    pub required_columns_per_s: f64,
    pub achieved_columns_per_s: f64,
    pub stride_period_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub threads: usize,
    pub sustained: bool,
    pub pass: bool,
}

/// Allowed shortfall of the achieved rate, covering timer granularity at
/// the end of the replay.
pub const RATE_TOLERANCE: f64 = 1e-3;

pub fn bench_verdict(
    speed_kmh: f64,
    pulse_pitch_um: u32,
    metrics: &PipelineMetrics,
) -> BenchVerdict {
    let required = required_columns_per_s(speed_kmh, pulse_pitch_um);
    let stride_period_ms = FrameGeometry::default().stride as f64 / required * 1e3;
    let sustained = metrics.columns_per_s >= required * (1.0 - RATE_TOLERANCE);
    BenchVerdict {
        speed_kmh,
        required_columns_per_s: required,
        achieved_columns_per_s: metrics.columns_per_s,
        stride_period_ms,
        p50_ms: metrics.window.p50_ms,
        p95_ms: metrics.window.p95_ms,
        p99_ms: metrics.window.p99_ms,
        threads: rayon::current_num_threads(),
        sustained,
        pass: sustained && metrics.window.p95_ms < stride_period_ms,
    }
}

fn bench(a: &BenchArgs) -> Result<Value> {
    require_file(&a.input)?;
    let thresholds = thresholds(&a.thresholds)?;
    let bank = match &a.models {
        Some(dir) => {
            require_dir(dir)?;
            load_bank(dir)?
        }
        None => ClassifierBank::init(0)?,
    };
    let pitch = UdfgReader::open(&a.input)?.header().pulse_pitch_um;
    let rate = required_columns_per_s(a.speed_kmh, pitch);
    let report = run_file(&a.input, &bank, thresholds, Some(rate))?;
    let verdict = bench_verdict(a.speed_kmh, pitch, &report.metrics);
    Ok(json!({ "command": "bench", "verdict": verdict, "metrics": report.metrics }))
}

fn serve(a: &ServeArgs) -> Result<Value> {
    require_dir(&a.models)?;
    let thresholds = thresholds(&a.thresholds)?;
    let bank = load_bank(&a.models)?;
    let source: Box<dyn ColumnSource + Send> = match &a.input {
        Some(path) => {
            require_file(path)?;
            Box::new(UdfgReader::open(path)?)
        }
        None => {
            let config = RunConfig {
                length_m: a.length_m,
                seed: a.seed,
                ..RunConfig::default()
            };
            Box::new(generate_run(&config)?.0)
        }
    };
    let header = source.header().clone();
    let pace = a
        .speed_kmh
        .map(|s| required_columns_per_s(s, header.pulse_pitch_um));
    let retraining = match &a.retraining {
        Some(dir) => RetrainingSet::open(dir)?,
        None => RetrainingSet::in_memory(),
    };
    let desk = shared_desk(thresholds, retraining);
    let metrics = Arc::new(Mutex::new(MetricsRecorder::default()));
    let state = AppState::new(
        desk.clone(),
        metrics.clone(),
        header.depth_samples,
        header.sample_window_us,
    );

    let feed = state.clone();
    let config = PipelineConfig {
        thresholds,
        pace_columns_per_s: pace,
        ..PipelineConfig::default()
    };
    let worker = std::thread::spawn(move || {
        let result = pipeline::run(
            source,
            &bank,
            &desk,
            &metrics,
            &config,
            |d: &TrackDecision| feed.publish(d),
        );
        match result {
            Ok(r) => eprintln!(
                "{}",
                json!({ "event": "stream_finished", "windows": r.metrics.windows, "decisions": r.metrics.decisions })
            ),
            Err(e) => eprintln!("{}", error_line(&e)),
        }
    });

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        eprintln!(
            "{}",
            json!({ "event": "listening", "addr": listener.local_addr()?.to_string() })
        );
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    drop(worker);
    Ok(json!({ "command": "serve", "addr": a.addr.to_string() }))
}

/// The single-line JSON form of an error.
pub fn error_line(e: &Error) -> String {
    json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}
