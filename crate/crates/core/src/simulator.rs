//! Synthetic defectogram runs with ground truth.
//!
//! Indications are rendered as truncated 2-D Gaussian echoes in
//! position × depth, only on the channels of the class signature. The
//! background is clipped Gaussian noise. Every firing draws its noise from
//! its own counter-based RNG stream, so runs are reproducible and can be
//! rendered out of order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::classifier::TrainingExample;
use crate::decision::DefectClass;
use crate::error::{Error, Result};
use crate::ingest::{
    apparent_depth_mm, AScanColumn, ChannelSpec, ColumnSource, ProbeAngle, StreamHeader,
    DEFAULT_AMPLITUDE_BITS, DEFAULT_DEPTH_SAMPLES, DEFAULT_FRAME_WIDTH, SAMPLE_WINDOW_US,
};
use crate::preprocess::{FusedInput, FusionGroup};

/// Minimum gap between the extents of two indications.
pub const MIN_SEPARATION_M: f64 = 0.5;
/// Indications keep this distance from both run ends.
pub const EDGE_MARGIN_M: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub length_m: f64,
    pub speed_kmh: f64,
    pub pulse_pitch_mm: f64,
    pub depth_samples: usize,
    pub noise_sigma: f64,
    pub defect_density_per_km: f64,
    pub seed: u64,
    pub channels: Vec<ChannelSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            length_m: 100.0,
            speed_kmh: 110.0,
            pulse_pitch_mm: 1.0,
            depth_samples: DEFAULT_DEPTH_SAMPLES,
            noise_sigma: 0.05,
            defect_density_per_km: 20.0,
            seed: 0,
            channels: ChannelSpec::default_layout(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.length_m > 0.0) || !self.length_m.is_finite() {
            return fail(format!("length_m must be > 0, got {}", self.length_m));
        }
        if !(self.speed_kmh > 0.0 && self.speed_kmh <= 110.0) {
            return fail(format!(
                "speed_kmh must be in (0, 110], got {}",
                self.speed_kmh
            ));
        }
        if !(self.pulse_pitch_mm > 0.0) || !self.pulse_pitch_mm.is_finite() {
            return fail(format!(
                "pulse_pitch_mm must be > 0, got {}",
                self.pulse_pitch_mm
            ));
        }
        if self.depth_samples < 16 || self.depth_samples > usize::from(u16::MAX) {
            return fail(format!(
                "depth_samples must be in 16..=65535, got {}",
                self.depth_samples
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if !(self.defect_density_per_km >= 0.0) || !self.defect_density_per_km.is_finite() {
            return fail(format!(
                "defect_density_per_km must be >= 0, got {}",
                self.defect_density_per_km
            ));
        }
        crate::ingest::validate_channels(&self.channels)
    }

    pub fn pulse_pitch_um(&self) -> u32 {
        (self.pulse_pitch_mm * 1000.0).round() as u32
    }

    /// `floor(length_m · 1000 / pulse_pitch_mm)`.
    pub fn firing_count(&self) -> u64 {
        (self.length_m * 1000.0 / self.pulse_pitch_mm + 1e-9).floor() as u64
    }

    pub fn header(&self) -> StreamHeader {
        StreamHeader {
            channels: self.channels.clone(),
            depth_samples: self.depth_samples as u16,
            amplitude_bits: DEFAULT_AMPLITUDE_BITS,
            pulse_pitch_um: self.pulse_pitch_um(),
            sample_window_us: SAMPLE_WINDOW_US,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub class: DefectClass,
    pub start_m: f64,
    pub end_m: f64,
    pub apparent_depth_mm: f64,
    pub responding_angles: Vec<ProbeAngle>,
}

impl GroundTruthRecord {
    pub fn overlaps(&self, start_m: f64, end_m: f64) -> bool {
        self.start_m < end_m && start_m < self.end_m
    }

    pub fn center_m(&self) -> f64 {
        0.5 * (self.start_m + self.end_m)
    }
}

/// Probe angles on which `class` produces an echo.
pub fn class_signature(class: DefectClass) -> Result<Vec<ProbeAngle>> {
    use DefectClass::*;
    use ProbeAngle::*;
    let angles: &[ProbeAngle] = match class {
        NoIndication => {
            return Err(Error::InvalidConfig(
                "NoIndication has no channel signature".into(),
            ))
        }
        HeadHorizontalCrack | HeadDelamination | FootDetachment => &[Zero],
        VerticalCrack => &[Minus70, Plus70],
        BoltHoleIntact | BoltHoleStarCrack => &[Minus70, Minus35, Zero, Plus35, Plus70],
        InclinedCrack => &[Minus35, Zero, Plus35],
        WebCrack => &[Minus55, Plus55],
        WeldVoid => &[Minus55, Zero, Plus55],
        BoltedJoint | RailJoint | Weld => &ProbeAngle::ALL,
    };
    Ok(angles.to_vec())
}

/// Parameter ranges of one class's echo pattern (millimeters).
#[derive(Debug, Clone, Copy)]
struct Shape {
    extent: (f64, f64),
    depth: (f64, f64),
    depth_sigma: (f64, f64),
    tilt: (f64, f64),
}

fn shape(class: DefectClass) -> Shape {
    use DefectClass::*;
    let s = |extent, depth, depth_sigma| Shape {
        extent,
        depth,
        depth_sigma,
        tilt: (0.0, 0.0),
    };
    match class {
        HeadHorizontalCrack => s((20.0, 80.0), (18.0, 35.0), (2.0, 3.0)),
        HeadDelamination => s((100.0, 200.0), (5.0, 12.0), (1.5, 2.5)),
        FootDetachment => s((40.0, 150.0), (158.0, 170.0), (2.0, 3.0)),
        VerticalCrack => s((20.0, 40.0), (15.0, 40.0), (6.0, 10.0)),
        InclinedCrack => Shape {
            tilt: (35.0, 55.0),
            ..s((40.0, 80.0), (55.0, 110.0), (3.0, 4.0))
        },
        BoltHoleIntact => s((20.0, 35.0), (75.0, 95.0), (5.0, 7.0)),
        BoltHoleStarCrack => s((70.0, 120.0), (75.0, 95.0), (11.0, 15.0)),
        BoltedJoint => s((150.0, 200.0), (85.0, 92.0), (45.0, 55.0)),
        RailJoint => s((20.0, 40.0), (85.0, 92.0), (45.0, 55.0)),
        Weld => s((70.0, 110.0), (82.0, 95.0), (8.0, 12.0)),
        WebCrack => s((20.0, 45.0), (65.0, 105.0), (15.0, 20.0)),
        WeldVoid => s((20.0, 40.0), (80.0, 100.0), (3.0, 5.0)),
        NoIndication => s((0.0, 0.0), (0.0, 0.0), (1.0, 1.0)),
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// A rendered echo: where it is and what it looks like.
#[derive(Debug, Clone, PartialEq)]
pub struct Indication {
    pub class: DefectClass,
    pub center_m: f64,
    pub extent_m: f64,
    pub depth_mm: f64,
    pub depth_sigma_mm: f64,
    /// Depth change across the extent, signed.
    pub tilt_mm: f64,
    pub amplitude: f64,
    pub angles: Vec<ProbeAngle>,
}

impl Indication {
    /// Draws a random instance of `class` centered at `center_m`.
    pub fn sample(class: DefectClass, center_m: f64, rng: &mut impl Rng) -> Result<Self> {
        let angles = class_signature(class)?;
        let sh = shape(class);
        let tilt = draw(rng, sh.tilt);
        let tilt = if rng.random_bool(0.5) { tilt } else { -tilt };
        Ok(Self {
            class,
            center_m,
            extent_m: draw(rng, sh.extent) / 1000.0,
            depth_mm: draw(rng, sh.depth),
            depth_sigma_mm: draw(rng, sh.depth_sigma),
            tilt_mm: tilt,
            amplitude: rng.random_range(0.5..=1.0),
            angles,
        })
    }

    pub fn start_m(&self) -> f64 {
        self.center_m - 0.5 * self.extent_m
    }

    pub fn end_m(&self) -> f64 {
        self.center_m + 0.5 * self.extent_m
    }

    pub fn truth(&self) -> GroundTruthRecord {
        GroundTruthRecord {
            class: self.class,
            start_m: self.start_m(),
            end_m: self.end_m(),
            apparent_depth_mm: self.depth_mm,
            responding_angles: self.angles.clone(),
        }
    }

    /// Echo amplitude at track position `x_m` and depth `depth_mm` on
    /// `angle`; zero off-signature and outside the extent.
    pub fn echo(&self, angle: ProbeAngle, x_m: f64, depth_mm: f64) -> f64 {
        if x_m < self.start_m() || x_m > self.end_m() || !self.angles.contains(&angle) {
            return 0.0;
        }
        let u = (x_m - self.center_m) / self.extent_m;
        let center_depth = self.depth_mm + self.tilt_mm * u;
        let dz = (depth_mm - center_depth) / self.depth_sigma_mm;
        if dz.abs() > 3.0 {
            return 0.0;
        }
        // σx = extent / 4
        let dx = 4.0 * u;
        self.amplitude * (-0.5 * (dx * dx + dz * dz)).exp()
    }
}

/// Places indications by a Poisson process, dropping any that come within
/// [`MIN_SEPARATION_M`] of an earlier one.
fn place_indications(config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Indication>> {
    let usable = config.length_m - 2.0 * EDGE_MARGIN_M;
    if config.defect_density_per_km == 0.0 || usable <= 0.0 {
        return Ok(Vec::new());
    }
    let mean = config.defect_density_per_km * config.length_m / 1000.0;
    let count = Poisson::new(mean)
        .map_err(|e| Error::InvalidConfig(format!("poisson rate {mean}: {e}")))?
        .sample(rng) as usize;
    let mut centers: Vec<f64> = (0..count)
        .map(|_| EDGE_MARGIN_M + rng.random_range(0.0..usable))
        .collect();
    centers.sort_by(f64::total_cmp);
    let mut out: Vec<Indication> = Vec::with_capacity(count);
    for center in centers {
        let class = DefectClass::INDICATIONS[rng.random_range(0..DefectClass::INDICATIONS.len())];
        let ind = Indication::sample(class, center, rng)?;
        let clear = out
            .last()
            .is_none_or(|prev| ind.start_m() - prev.end_m() >= MIN_SEPARATION_M);
        if clear {
            out.push(ind);
        }
    }
    Ok(out)
}

fn firing_rng(seed: u64, firing: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e01_5e00_dead_beef);
    rng.set_stream(firing);
    rng
}

/// A generated run, pulled one firing record at a time.
#[derive(Debug, Clone)]
pub struct SimulatedRun {
    config: RunConfig,
    header: StreamHeader,
    indications: Vec<Indication>,
    depths_mm: Vec<f64>,
    next: u64,
    total: u64,
}

impl SimulatedRun {
    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn indications(&self) -> &[Indication] {
        &self.indications
    }

    pub fn total_firings(&self) -> u64 {
        self.total
    }

    pub fn column(&self, firing: u64) -> AScanColumn {
        let pitch_um = u64::from(self.config.pulse_pitch_um());
        let encoder = firing * pitch_um;
        let depth = self.config.depth_samples;
        let max_raw = f64::from(self.header.max_raw());
        let mut rng = firing_rng(self.config.seed, firing);
        let noise = Normal::new(0.0, self.config.noise_sigma.max(0.0)).expect("validated sigma");
        let mut amplitudes = Vec::with_capacity(self.config.channels.len() * depth);
        for ch in &self.config.channels {
            let x = crate::ingest::correct_position(encoder, ch);
            let active: Vec<&Indication> = self
                .nearby(x)
                .filter(|ind| ind.angles.contains(&ch.angle))
                .collect();
            for (d, &depth_mm) in self.depths_mm.iter().enumerate() {
                let _ = d;
                let mut v = if self.config.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                for ind in &active {
                    v += ind.echo(ch.angle, x, depth_mm);
                }
                amplitudes.push(quantize(v, max_raw));
            }
        }
        AScanColumn {
            encoder_position_um: encoder,
            amplitudes,
        }
    }

    fn nearby(&self, x: f64) -> impl Iterator<Item = &Indication> {
        // indications are sorted by center and separated by more than their extents
        let i = self.indications.partition_point(|ind| ind.end_m() < x);
        self.indications[i..]
            .iter()
            .take_while(move |ind| ind.start_m() <= x)
    }
}

fn quantize(v: f64, max_raw: f64) -> u16 {
    (v.clamp(0.0, 1.0) * max_raw).round() as u16
}

impl ColumnSource for SimulatedRun {
    fn header(&self) -> &StreamHeader {
        &self.header
    }

    fn next_column(&mut self) -> Result<Option<AScanColumn>> {
        if self.next >= self.total {
            return Ok(None);
        }
        let col = self.column(self.next);
        self.next += 1;
        Ok(Some(col))
    }
}

/// Builds a run and its ground truth (sorted by `start_m`).
pub fn generate_run(config: &RunConfig) -> Result<(SimulatedRun, Vec<GroundTruthRecord>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let indications = place_indications(config, &mut rng)?;
    Ok(build_run(config, indications))
}

/// A run with explicitly placed indications.
pub fn run_with_indications(
    config: &RunConfig,
    mut indications: Vec<Indication>,
) -> Result<(SimulatedRun, Vec<GroundTruthRecord>)> {
    config.validate()?;
    indications.sort_by(|a, b| a.center_m.total_cmp(&b.center_m));
    Ok(build_run(config, indications))
}

fn build_run(
    config: &RunConfig,
    indications: Vec<Indication>,
) -> (SimulatedRun, Vec<GroundTruthRecord>) {
    let truth = indications.iter().map(Indication::truth).collect();
    let depth = config.depth_samples;
    let depths_mm = (0..depth)
        .map(|d| apparent_depth_mm(d, depth).expect("index within window"))
        .collect();
    let run = SimulatedRun {
        header: config.header(),
        total: config.firing_count(),
        config: config.clone(),
        indications,
        depths_mm,
        next: 0,
    };
    (run, truth)
}

/// Renders group inputs directly on the classifier grid.
///
/// Pixel `(y, x)` of a `size × size` input samples depth row
/// `y · depth_samples / size` and track column `x · frame_width / size` of
/// the full-resolution frame, which is exactly where the integer-ratio
/// affine resampler reads from.
#[derive(Debug, Clone)]
pub struct GridRenderer {
    pub size: usize,
    pub frame_width: usize,
    pub depth_samples: usize,
    pub pulse_pitch_m: f64,
    pub noise_sigma: f64,
    pub max_raw: f64,
}

impl Default for GridRenderer {
    fn default() -> Self {
        Self {
            size: crate::preprocess::INPUT_SIZE,
            frame_width: DEFAULT_FRAME_WIDTH,
            depth_samples: DEFAULT_DEPTH_SAMPLES,
            pulse_pitch_m: 0.001,
            noise_sigma: 0.05,
            max_raw: 4095.0,
        }
    }
}

impl GridRenderer {
    pub fn window_length_m(&self) -> f64 {
        self.frame_width as f64 * self.pulse_pitch_m
    }

    pub fn render(
        &self,
        group: FusionGroup,
        track_start_m: f64,
        indications: &[Indication],
        rng: &mut impl Rng,
    ) -> FusedInput {
        let n = self.size;
        let noise = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
        let mut planes = Vec::with_capacity(group.channel_count() * n * n);
        for &angle in group.angles() {
            for y in 0..n {
                let depth_mm = apparent_depth_mm(y * self.depth_samples / n, self.depth_samples)
                    .unwrap_or(0.0);
                for x in 0..n {
                    let col = x * self.frame_width / n;
                    let pos = track_start_m + col as f64 * self.pulse_pitch_m;
                    let mut v = if self.noise_sigma > 0.0 {
                        noise.sample(rng)
                    } else {
                        0.0
                    };
                    for ind in indications {
                        v += ind.echo(angle, pos, depth_mm);
                    }
                    planes.push(f32::from(quantize(v, self.max_raw)) / self.max_raw as f32);
                }
            }
        }
        FusedInput {
            group,
            window_index: 0,
            track_start_m,
            track_end_m: track_start_m + self.window_length_m(),
            channels: group.channel_count(),
            height: n,
            width: n,
            planes,
        }
    }
}

/// Label a group classifier should produce for a window: the class of an
/// indication centered inside the window that the group owns, otherwise
/// `NoIndication`.
pub fn window_label(
    group: FusionGroup,
    window: (f64, f64),
    truth: &[GroundTruthRecord],
) -> DefectClass {
    truth
        .iter()
        .filter(|t| t.center_m() >= window.0 && t.center_m() < window.1)
        .map(|t| t.class)
        .find(|c| group.class_set().contains(c))
        .unwrap_or(DefectClass::NoIndication)
}

/// Mix of a group training corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub examples: usize,
    /// Share of examples showing one of the group's own classes.
    pub own_share: f64,
    /// Share showing another group's class (labeled `NoIndication`).
    pub foreign_share: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            examples: 600,
            own_share: 0.5,
            foreign_share: 0.35,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// Labeled single-window examples for one group classifier. Each example
/// holds at most one indication whose center lies inside the window.
pub fn training_corpus(group: FusionGroup, spec: &CorpusSpec) -> Result<Vec<TrainingExample>> {
    let renderer = GridRenderer {
        noise_sigma: spec.noise_sigma,
        ..GridRenderer::default()
    };
    let own: Vec<DefectClass> = group.class_set()[1..].to_vec();
    let foreign: Vec<DefectClass> = DefectClass::INDICATIONS
        .into_iter()
        .filter(|c| !own.contains(c))
        .filter(|&c| {
            class_signature(c)
                .map(|s| s.iter().any(|a| group.contains(*a)))
                .unwrap_or(false)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (u64::from(group.id()) << 56));
    let window = renderer.window_length_m();
    let mut out = Vec::with_capacity(spec.examples);
    for k in 0..spec.examples {
        let start = 10.0 + k as f64 * 2.0 * window;
        let roll: f64 = rng.random();
        let class = if roll < spec.own_share {
            Some(own[rng.random_range(0..own.len())])
        } else if roll < spec.own_share + spec.foreign_share && !foreign.is_empty() {
            Some(foreign[rng.random_range(0..foreign.len())])
        } else {
            None
        };
        let indications = match class {
            Some(c) => vec![Indication::sample(
                c,
                start + rng.random_range(0.0..window),
                &mut rng,
            )?],
            None => Vec::new(),
        };
        let mut input = renderer.render(group, start, &indications, &mut rng);
        input.window_index = k as u64;
        let label = class
            .filter(|c| own.contains(c))
            .unwrap_or(DefectClass::NoIndication);
        out.push(TrainingExample { input, label });
    }
    Ok(out)
}
