//! Threaded ingest → preprocess → classify → decide pipeline.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam::channel::{bounded, Receiver, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierBank, Verdict};
use crate::decision::{
    compose, DecisionStatus, DecisionStream, ReviewDesk, Thresholds, TrackDecision,
};
use crate::error::{Error, Result};
use crate::ingest::{ColumnSource, FrameGeometry, FrameSet, MeasurementStack};
use crate::preprocess::{fuse, FusedInput};

pub const QUEUE_CAPACITY: usize = 4;

const PACE_SLACK: Duration = Duration::from_millis(1);

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub geometry: FrameGeometry,
    pub thresholds: Thresholds,
    pub queue_capacity: usize,
    /// Replays the source at this many columns per second instead of as fast
    /// as possible.
    pub pace_columns_per_s: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            geometry: FrameGeometry::default(),
            thresholds: Thresholds::default(),
            queue_capacity: QUEUE_CAPACITY,
            pace_columns_per_s: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            count: sorted.len(),
            p50_ms: percentile(&sorted, 0.50),
            p95_ms: percentile(&sorted, 0.95),
            p99_ms: percentile(&sorted, 0.99),
            max_ms: sorted[sorted.len() - 1],
        }
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub columns: u64,
    pub windows: u64,
    pub elapsed_s: f64,
    /// Columns over the time the source took to deliver them.
    pub columns_per_s: f64,
    pub frames_per_s: f64,
    pub ingest: LatencySummary,
    pub preprocess: LatencySummary,
    pub classify: LatencySummary,
    pub decision: LatencySummary,
    /// From the arrival of a window's last column to its decisions.
    pub window: LatencySummary,
    pub review_queue_depth: usize,
    pub max_buffered_columns: usize,
    pub decisions: BTreeMap<String, u64>,
}

/// Live counters, shared with whoever reports metrics while the pipeline
/// runs.
#[derive(Debug, Default)]
pub struct MetricsRecorder {
    started: Option<Instant>,
    ingested: Option<Instant>,
    finished: Option<Instant>,
    columns: u64,
    windows: u64,
    ingest: Vec<f64>,
    preprocess: Vec<f64>,
    classify: Vec<f64>,
    decision: Vec<f64>,
    window: Vec<f64>,
    max_buffered: usize,
    decisions: BTreeMap<String, u64>,
}

impl MetricsRecorder {
    pub fn snapshot(&self, review_queue_depth: usize) -> PipelineMetrics {
        let elapsed_s = match self.started {
            Some(s) => self
                .finished
                .unwrap_or_else(Instant::now)
                .duration_since(s)
                .as_secs_f64(),
            None => 0.0,
        };
        let rate = |n: u64, secs: f64| if secs > 0.0 { n as f64 / secs } else { 0.0 };
        let ingest_s = match (self.started, self.ingested) {
            (Some(s), Some(e)) => e.duration_since(s).as_secs_f64(),
            _ => elapsed_s,
        };
        PipelineMetrics {
            columns: self.columns,
            windows: self.windows,
            elapsed_s,
            columns_per_s: rate(self.columns, ingest_s),
            frames_per_s: rate(self.windows, elapsed_s),
            ingest: LatencySummary::from_samples(&self.ingest),
            preprocess: LatencySummary::from_samples(&self.preprocess),
            classify: LatencySummary::from_samples(&self.classify),
            decision: LatencySummary::from_samples(&self.decision),
            window: LatencySummary::from_samples(&self.window),
            review_queue_depth,
            max_buffered_columns: self.max_buffered,
            decisions: self.decisions.clone(),
        }
    }

    fn count_decision(&mut self, status: DecisionStatus) {
        let key = match status {
            DecisionStatus::AutoAccepted => "auto_accepted",
            DecisionStatus::Delegated => "delegated",
            DecisionStatus::ExpertResolved => "expert_resolved",
        };
        *self.decisions.entry(key.to_string()).or_default() += 1;
    }
}

pub type SharedMetrics = Arc<Mutex<MetricsRecorder>>;
pub type SharedDesk = Arc<Mutex<ReviewDesk>>;

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub decisions: Vec<TrackDecision>,
    pub metrics: PipelineMetrics,
}

struct Assembled {
    set: FrameSet,
    ready: Instant,
}

struct Fused {
    set: FrameSet,
    inputs: Vec<FusedInput>,
    ready: Instant,
}

struct Classified {
    set: FrameSet,
    inputs: Vec<FusedInput>,
    verdicts: Vec<Verdict>,
    ready: Instant,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Runs a source to exhaustion. Every released decision is passed to
/// `on_decision` as soon as it is final; delegated ones are queued on the
/// desk first so they already have an id there.
pub fn run<S, F>(
    source: S,
    bank: &ClassifierBank,
    desk: &SharedDesk,
    metrics: &SharedMetrics,
    config: &PipelineConfig,
    mut on_decision: F,
) -> Result<PipelineReport>
where
    S: ColumnSource + Send,
    F: FnMut(&TrackDecision),
{
    if config.queue_capacity == 0 {
        return Err(Error::InvalidConfig(
            "queue capacity must be positive".into(),
        ));
    }
    if let Some(rate) = config.pace_columns_per_s {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::InvalidConfig(format!("pace {rate} columns/s")));
        }
    }
    let stack = MeasurementStack::new(source.header().clone(), config.geometry)?;
    *metrics.lock() = MetricsRecorder {
        started: Some(Instant::now()),
        ..MetricsRecorder::default()
    };

    let (frames_tx, frames_rx) = bounded::<Assembled>(config.queue_capacity);
    let (fused_tx, fused_rx) = bounded::<Fused>(config.queue_capacity);
    let (verdict_tx, verdict_rx) = bounded::<Classified>(config.queue_capacity);

    let mut decisions = Vec::new();
    let outcome = thread::scope(|scope| {
        let ingest = scope.spawn(|| ingest_stage(source, stack, frames_tx, metrics, config));
        let pre = scope.spawn(|| preprocess_stage(frames_rx, fused_tx, metrics));
        let cls = scope.spawn(|| classify_stage(verdict_tx, fused_rx, bank, metrics));
        let decided = decision_stage(verdict_rx, desk, metrics, config, |d| {
            on_decision(d);
            decisions.push(d.clone());
        });
        // Upstream errors take precedence: a failed stage closes its queue,
        // which the downstream stages see as a normal end of stream.
        let results = [
            ingest.join().expect("ingest stage panicked"),
            pre.join().expect("preprocess stage panicked"),
            cls.join().expect("classify stage panicked"),
            decided,
        ];
        results.into_iter().collect::<Result<Vec<()>>>()
    });
    outcome?;

    let depth = desk.lock().pending().len();
    let mut m = metrics.lock();
    m.finished = Some(Instant::now());
    Ok(PipelineReport {
        decisions,
        metrics: m.snapshot(depth),
    })
}

fn ingest_stage<S: ColumnSource>(
    mut source: S,
    mut stack: MeasurementStack,
    out: Sender<Assembled>,
    metrics: &SharedMetrics,
    config: &PipelineConfig,
) -> Result<()> {
    let start = Instant::now();
    let mut n: u64 = 0;
    while let Some(column) = source.next_column()? {
        if let Some(rate) = config.pace_columns_per_s {
            // sleep in bursts of about a millisecond rather than per column
            let due = start + Duration::from_secs_f64(n as f64 / rate);
            let now = Instant::now();
            if due > now + PACE_SLACK {
                thread::sleep(due - now);
            }
        }
        let t0 = Instant::now();
        let sets = stack.push_column(column)?;
        n += 1;
        let assembled = Instant::now();
        {
            let mut m = metrics.lock();
            m.columns = n;
            m.max_buffered = m.max_buffered.max(stack.max_buffered());
            for _ in &sets {
                m.ingest.push(ms(assembled - t0));
            }
        }
        for set in sets {
            if out.send(Assembled { set, ready: t0 }).is_err() {
                return Ok(());
            }
        }
    }
    metrics.lock().ingested = Some(Instant::now());
    if let Some(set) = stack.finish() {
        let _ = out.send(Assembled {
            set,
            ready: Instant::now(),
        });
    }
    Ok(())
}

fn preprocess_stage(
    input: Receiver<Assembled>,
    out: Sender<Fused>,
    metrics: &SharedMetrics,
) -> Result<()> {
    for item in input {
        let t0 = Instant::now();
        let inputs = fuse(&item.set)?;
        metrics.lock().preprocess.push(ms(t0.elapsed()));
        let fused = Fused {
            set: item.set,
            inputs,
            ready: item.ready,
        };
        if out.send(fused).is_err() {
            break;
        }
    }
    Ok(())
}

fn classify_stage(
    out: Sender<Classified>,
    input: Receiver<Fused>,
    bank: &ClassifierBank,
    metrics: &SharedMetrics,
) -> Result<()> {
    for item in input {
        let t0 = Instant::now();
        let verdicts = bank.classify(&item.inputs)?;
        metrics.lock().classify.push(ms(t0.elapsed()));
        let classified = Classified {
            set: item.set,
            inputs: item.inputs,
            verdicts,
            ready: item.ready,
        };
        if out.send(classified).is_err() {
            break;
        }
    }
    Ok(())
}

fn decision_stage<F: FnMut(&TrackDecision)>(
    input: Receiver<Classified>,
    desk: &SharedDesk,
    metrics: &SharedMetrics,
    config: &PipelineConfig,
    mut emit: F,
) -> Result<()> {
    let mut stream = DecisionStream::new();
    let mut release = |released: Vec<TrackDecision>, window: Option<&Classified>| -> Result<()> {
        for d in released {
            if d.status == DecisionStatus::Delegated {
                // Delegated decisions are always released with their own window.
                let w = window.ok_or_else(|| {
                    Error::DataCorruption("delegated decision without a window".into())
                })?;
                desk.lock()
                    .enqueue(&d, w.set.frames.clone(), w.inputs.clone())?;
            }
            metrics.lock().count_decision(d.status);
            emit(&d);
        }
        Ok(())
    };
    for item in input {
        let t0 = Instant::now();
        let composed = compose(&item.verdicts, &config.thresholds)?;
        let released = stream.push_window(composed);
        release(released, Some(&item))?;
        let done = Instant::now();
        let mut m = metrics.lock();
        m.windows += 1;
        m.decision.push(ms(done - t0));
        m.window.push(ms(done - item.ready));
    }
    release(stream.finish(), None)
}
