use std::sync::Arc;

use parking_lot::Mutex;
use udrt_core::classifier::ClassifierBank;
use udrt_core::decision::{DecisionStatus, ReviewDesk};
use udrt_core::pipeline::{run, MetricsRecorder, PipelineConfig};
use udrt_core::simulator::{generate_run, RunConfig};

#[test]
fn untrained_bank_delegates_every_window_with_all_channels() {
    let config = RunConfig {
        length_m: 6.0,
        defect_density_per_km: 0.0,
        seed: 3,
        ..RunConfig::default()
    };
    let (sim, _) = generate_run(&config).unwrap();
    let columns = sim.total_firings();
    let bank = ClassifierBank::init(1).unwrap();
    let desk = Arc::new(Mutex::new(ReviewDesk::default()));
    let metrics = Arc::new(Mutex::new(MetricsRecorder::default()));
    let mut seen = Vec::new();
    let report = run(
        sim,
        &bank,
        &desk,
        &metrics,
        &PipelineConfig::default(),
        |d| seen.push(d.clone()),
    )
    .unwrap();

    assert_eq!(seen, report.decisions);
    let m = &report.metrics;
    assert_eq!(m.columns, columns);
    // window k needs 512 columns plus the 420-column probe offset span
    // after k*256; one padded tail window covers the remainder
    let full = (columns - 932) / 256 + 1;
    let tail = u64::from(columns > (full - 1) * 256 + 512);
    assert_eq!(m.windows, full + tail);
    assert_eq!(m.window.count as u64, m.windows);
    assert!(m.max_buffered_columns <= 2 * 512 + 420);
    assert!(m.window.p50_ms <= m.window.p95_ms && m.window.p95_ms <= m.window.max_ms);

    // near-uniform probabilities fail the gate everywhere
    assert!(!report.decisions.is_empty());
    assert!(report
        .decisions
        .iter()
        .all(|d| d.status == DecisionStatus::Delegated));
    let desk = desk.lock();
    assert_eq!(desk.pending().len(), report.decisions.len());
    assert_eq!(m.review_queue_depth, desk.pending().len());
    for item in desk.pending() {
        assert_eq!(item.frames.len(), 7);
        assert_eq!(item.inputs.len(), 5);
    }
    let ids: Vec<u64> = report.decisions.iter().map(|d| d.id).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), ids.len(), "decision ids repeat");
}

#[test]
fn zero_queue_capacity_is_rejected() {
    let (sim, _) = generate_run(&RunConfig {
        length_m: 2.0,
        ..RunConfig::default()
    })
    .unwrap();
    let bank = ClassifierBank::init(1).unwrap();
    let desk = Arc::new(Mutex::new(ReviewDesk::default()));
    let metrics = Arc::new(Mutex::new(MetricsRecorder::default()));
    let config = PipelineConfig {
        queue_capacity: 0,
        ..PipelineConfig::default()
    };
    assert!(run(sim, &bank, &desk, &metrics, &config, |_| {}).is_err());
}
