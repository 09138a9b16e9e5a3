use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udrt_core::classifier::{
    accuracy, forward, mean_loss, train, ModelParams, TrainConfig, TrainingExample,
};
use udrt_core::ingest::apparent_depth_mm;
use udrt_core::preprocess::FusionGroup;
use udrt_core::simulator::{training_corpus, CorpusSpec, GridRenderer, Indication};
use udrt_core::DefectClass;

fn corpus(group: FusionGroup, examples: usize, seed: u64) -> Vec<TrainingExample> {
    training_corpus(
        group,
        &CorpusSpec {
            examples,
            seed,
            ..CorpusSpec::default()
        },
    )
    .unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 4,
        ..TrainConfig::default()
    }
}

fn g2_model() -> &'static ModelParams {
    static MODEL: OnceLock<ModelParams> = OnceLock::new();
    MODEL.get_or_init(|| {
        let data = corpus(FusionGroup::G2, 300, 1);
        train(FusionGroup::G2, &data, &config(10), None, |_, _| {}).unwrap()
    })
}

#[test]
fn g2_vertical_crack_is_recognized_on_held_out_frames() {
    let held: Vec<TrainingExample> = corpus(FusionGroup::G2, 300, 2)
        .into_iter()
        .filter(|ex| ex.label == DefectClass::VerticalCrack)
        .collect();
    assert!(held.len() > 100);
    let acc = accuracy(g2_model(), &held).unwrap();
    assert!(acc >= 0.90, "held-out accuracy {acc}");
}

#[test]
fn per_epoch_losses_are_reported() {
    let m = g2_model();
    assert_eq!(m.training.epoch_losses.len(), 10);
    assert_eq!(
        m.training.final_loss,
        m.training.epoch_losses.last().copied()
    );
    assert!(m.training.epoch_losses[9] < m.training.epoch_losses[0]);
}

/// Renders `ind` on the G2 grid after moving it by `(dx, dy)` input pixels.
fn render_shifted(
    renderer: &GridRenderer,
    ind: &Indication,
    start: f64,
    (dx, dy): (i32, i32),
    rng: &mut impl Rng,
) -> Vec<f32> {
    let px_m = renderer.window_length_m() / renderer.size as f64;
    let row_mm = apparent_depth_mm(
        renderer.depth_samples / renderer.size,
        renderer.depth_samples,
    )
    .unwrap();
    let mut moved = ind.clone();
    moved.center_m += f64::from(dx) * px_m;
    moved.depth_mm += f64::from(dy) * row_mm;
    renderer
        .render(FusionGroup::G2, start, &[moved], rng)
        .planes
}

#[test]
fn two_pixel_shifts_keep_the_top_class() {
    let model = g2_model();
    let renderer = GridRenderer::default();
    let window = renderer.window_length_m();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let shifts = [(2, 0), (-2, 0), (0, 2), (0, -2)];
    let (mut kept, mut total) = (0, 0);
    for k in 0..60 {
        let start = 100.0 + k as f64 * 2.0 * window;
        let class = if k % 2 == 0 {
            DefectClass::VerticalCrack
        } else {
            DefectClass::BoltHoleIntact
        };
        let center = start + rng.random_range(0.15..0.85) * window;
        let ind = Indication::sample(class, center, &mut rng).unwrap();
        let template = renderer.render(FusionGroup::G2, start, &[], &mut rng);
        let top = |planes: Vec<f32>| {
            let mut input = template.clone();
            input.planes = planes;
            forward(model, &input).unwrap().top_class
        };
        let base = top(render_shifted(&renderer, &ind, start, (0, 0), &mut rng));
        for s in shifts {
            total += 1;
            if top(render_shifted(&renderer, &ind, start, s, &mut rng)) == base {
                kept += 1;
            }
        }
    }
    let share = kept as f64 / total as f64;
    assert!(share >= 0.95, "top class kept on {kept}/{total}");
}

#[test]
fn warm_start_does_not_raise_loss_on_expert_frames() {
    let base = g2_model();
    // noisier frames stand in for what an expert would be shown
    let expert = training_corpus(
        FusionGroup::G2,
        &CorpusSpec {
            examples: 40,
            noise_sigma: 0.12,
            seed: 8,
            ..CorpusSpec::default()
        },
    )
    .unwrap();
    let before = mean_loss(base, &expert).unwrap();
    let mut batch = corpus(FusionGroup::G2, 60, 9);
    batch.extend(expert.iter().cloned());
    let tuned = train(FusionGroup::G2, &batch, &config(3), Some(base), |_, _| {}).unwrap();
    let after = mean_loss(&tuned, &expert).unwrap();
    assert!(after <= before, "loss rose from {before} to {after}");
    assert_eq!(tuned.training.epochs, base.training.epochs + 3);
}
