//! Convolutional classifier bank: one small network per fusion group.

pub mod layers;
mod model_io;
mod network;
mod train;

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decision::DefectClass;
use crate::error::{Error, Result};
use crate::ingest::apparent_depth_mm;
use crate::preprocess::{FusedInput, FusionGroup, INPUT_SIZE};

pub use layers::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, maxpool2, relu, relu_in_place,
    softmax,
};
pub use model_io::{load_bank, load_model, save_bank, save_model};
pub use network::{cross_entropy, ForwardCache, Network, Topology, Workspace, INIT_SCALE};
pub use train::{accuracy, mean_loss, train, TrainConfig, TrainingExample};

/// Floating-point element type of a network: `f64` for gradient checks,
/// `f32` at runtime.
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    fn zero() -> Self;
    fn lift(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn is_finite(self) -> bool;
    /// `self * a + b`, fused when the target has FMA.
    fn mul_add(self, a: Self, b: Self) -> Self;
}

impl Scalar for f32 {
    fn zero() -> Self {
        0.0
    }
    fn lift(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        #[cfg(target_feature = "fma")]
        {
            f32::mul_add(self, a, b)
        }
        #[cfg(not(target_feature = "fma"))]
        {
            self * a + b
        }
    }
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn lift(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        #[cfg(target_feature = "fma")]
        {
            f64::mul_add(self, a, b)
        }
        #[cfg(not(target_feature = "fma"))]
        {
            self * a + b
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub examples: usize,
    pub final_loss: Option<f64>,
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
}

/// A trained (or freshly initialized) group classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub group: FusionGroup,
    pub class_set: Vec<DefectClass>,
    pub network: Network<f32>,
    pub training: TrainingMeta,
}

impl ModelParams {
    /// Reference topology for `group`, initialized from `seed`.
    pub fn init(group: FusionGroup, seed: u64) -> Result<Self> {
        let class_set = group.class_set().to_vec();
        let topology = Topology::reference(group.channel_count(), INPUT_SIZE, class_set.len());
        Ok(Self {
            group,
            class_set,
            network: Network::init(topology, seed)?,
            training: TrainingMeta {
                seed,
                epochs: 0,
                learning_rate: 0.0,
                batch_size: 0,
                momentum: 0.0,
                examples: 0,
                final_loss: None,
                epoch_losses: Vec::new(),
            },
        })
    }

    pub fn class_index(&self, class: DefectClass) -> Option<usize> {
        self.class_set.iter().position(|&c| c == class)
    }
}

/// One group classifier's output for one frame window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub group: FusionGroup,
    pub window_index: u64,
    pub track_start_m: f64,
    pub track_end_m: f64,
    pub class_set: Vec<DefectClass>,
    pub probabilities: Vec<f64>,
    pub top_class: DefectClass,
    pub confidence: f64,
    pub margin: f64,
    /// Depth of the strongest echo row in the group's input.
    pub apparent_depth_mm: f64,
}

impl Verdict {
    pub fn from_probabilities(
        group: FusionGroup,
        window_index: u64,
        extent: (f64, f64),
        class_set: Vec<DefectClass>,
        probabilities: Vec<f64>,
        apparent_depth_mm: f64,
    ) -> Result<Self> {
        if class_set.len() != probabilities.len() || class_set.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for {} classes",
                probabilities.len(),
                class_set.len()
            )));
        }
        let mut order: Vec<usize> = (0..probabilities.len()).collect();
        order.sort_by(|&a, &b| {
            probabilities[b]
                .total_cmp(&probabilities[a])
                .then(a.cmp(&b))
        });
        let confidence = probabilities[order[0]];
        let second = order.get(1).map_or(0.0, |&i| probabilities[i]);
        Ok(Self {
            group,
            window_index,
            track_start_m: extent.0,
            track_end_m: extent.1,
            top_class: class_set[order[0]],
            class_set,
            probabilities,
            confidence,
            margin: confidence - second,
            apparent_depth_mm,
        })
    }

    pub fn probability_of(&self, class: DefectClass) -> f64 {
        self.class_set
            .iter()
            .position(|&c| c == class)
            .map_or(0.0, |i| self.probabilities[i])
    }
}

thread_local! {
    static WORKSPACE: RefCell<Workspace<f32>> = RefCell::new(Workspace::default());
}

/// Classifies one group input.
pub fn forward(params: &ModelParams, input: &FusedInput) -> Result<Verdict> {
    if input.group != params.group {
        return Err(Error::ShapeMismatch(format!(
            "{} input given to the {} classifier",
            input.group, params.group
        )));
    }
    let t = params.network.topology();
    if (input.channels, input.height, input.width) != (t.in_channels, t.height, t.width) {
        return Err(Error::ShapeMismatch(format!(
            "input {}x{}x{} does not match topology {}x{}x{}",
            input.channels, input.height, input.width, t.in_channels, t.height, t.width
        )));
    }
    let probabilities =
        WORKSPACE.with_borrow_mut(|ws| params.network.probabilities_with(&input.planes, ws))?;
    Verdict::from_probabilities(
        params.group,
        input.window_index,
        (input.track_start_m, input.track_end_m),
        params.class_set.clone(),
        probabilities,
        peak_depth_mm(input),
    )
}

/// Apparent depth of the row holding the strongest amplitude.
pub fn peak_depth_mm(input: &FusedInput) -> f64 {
    let mut best = (0usize, f32::MIN);
    for c in 0..input.channels {
        for (y, row) in input.plane(c).chunks_exact(input.width).enumerate() {
            let m = row.iter().copied().fold(f32::MIN, f32::max);
            if m > best.1 {
                best = (y, m);
            }
        }
    }
    apparent_depth_mm(best.0, input.height).unwrap_or(0.0)
}

/// The five group classifiers.
#[derive(Debug, Clone)]
pub struct ClassifierBank {
    models: Vec<ModelParams>,
}

impl ClassifierBank {
    pub fn new(mut models: Vec<ModelParams>) -> Result<Self> {
        models.sort_by_key(|m| m.group);
        let groups: Vec<FusionGroup> = models.iter().map(|m| m.group).collect();
        if groups != FusionGroup::ALL {
            return Err(Error::ModelFormat(format!(
                "bank needs exactly one model per group, got {groups:?}"
            )));
        }
        Ok(Self { models })
    }

    pub fn init(seed: u64) -> Result<Self> {
        Self::new(
            FusionGroup::ALL
                .into_iter()
                .map(|g| ModelParams::init(g, seed.wrapping_add(u64::from(g.id()))))
                .collect::<Result<_>>()?,
        )
    }

    pub fn model(&self, group: FusionGroup) -> &ModelParams {
        &self.models[usize::from(group.id() - 1)]
    }

    pub fn model_mut(&mut self, group: FusionGroup) -> &mut ModelParams {
        &mut self.models[usize::from(group.id() - 1)]
    }

    pub fn models(&self) -> &[ModelParams] {
        &self.models
    }

    /// Runs every group classifier concurrently on one window.
    pub fn classify(&self, inputs: &[FusedInput]) -> Result<Vec<Verdict>> {
        if rayon::current_num_threads() < 2 {
            return self.classify_serial(inputs);
        }
        inputs
            .par_iter()
            .map(|input| forward(self.model(input.group), input))
            .collect()
    }

    pub fn classify_serial(&self, inputs: &[FusedInput]) -> Result<Vec<Verdict>> {
        inputs
            .iter()
            .map(|input| forward(self.model(input.group), input))
            .collect()
    }
}
