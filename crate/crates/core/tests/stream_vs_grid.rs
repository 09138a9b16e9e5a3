use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use udrt_core::ingest::{ColumnSource, FrameGeometry, MeasurementStack};
use udrt_core::preprocess::fuse;
use udrt_core::simulator::{generate_run, GridRenderer, RunConfig};

/// Inputs fused from the streamed frames equal inputs rendered straight onto
/// the classifier grid, up to one quantization step.
#[test]
fn streamed_inputs_match_grid_rendering() {
    let config = RunConfig {
        length_m: 40.0,
        defect_density_per_km: 300.0,
        noise_sigma: 0.0,
        seed: 17,
        ..RunConfig::default()
    };
    let (mut run, truth) = generate_run(&config).unwrap();
    assert!(truth.len() >= 5, "only {} indications", truth.len());
    let indications = run.indications().to_vec();
    let renderer = GridRenderer {
        noise_sigma: 0.0,
        ..GridRenderer::default()
    };
    let step = 1.0 / renderer.max_raw as f32;
    let mut stack = MeasurementStack::new(run.header().clone(), FrameGeometry::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut windows = 0;
    let mut lit = 0;
    while let Some(col) = run.next_column().unwrap() {
        for set in stack.push_column(col).unwrap() {
            windows += 1;
            for streamed in fuse(&set).unwrap() {
                let rendered =
                    renderer.render(streamed.group, set.track_start_m, &indications, &mut rng);
                assert_eq!(rendered.planes.len(), streamed.planes.len());
                let worst = streamed
                    .planes
                    .iter()
                    .zip(&rendered.planes)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                assert!(
                    worst <= step * 1.01,
                    "window {} {}: differs by {worst}",
                    set.window_index,
                    streamed.group
                );
                if streamed.planes.iter().any(|&v| v > 0.1) {
                    lit += 1;
                }
            }
        }
    }
    assert!(windows > 100);
    assert!(lit > 10, "only {lit} group inputs carried an echo");
}
