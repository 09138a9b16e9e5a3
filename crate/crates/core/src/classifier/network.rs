use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::{
    conv2d_backward, conv2d_forward, conv2d_forward_into, dense_backward, dense_forward, maxpool2,
    maxpool2_relu_into, relu_in_place, softmax, ConvScratch,
};
use super::Scalar;

/// conv(c1)→relu→pool→conv(c2)→relu→pool→flatten→dense(hidden)→relu→dense(classes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden: usize,
    pub classes: usize,
}

/// Scale applied on top of He-uniform bounds for the dense layers.
pub const INIT_SCALE: f64 = 0.1;

impl Topology {
    /// The runtime topology: 16 and 32 conv channels, 64 hidden units.
    pub fn reference(in_channels: usize, size: usize, classes: usize) -> Self {
        Self {
            in_channels,
            height: size,
            width: size,
            conv1_channels: 16,
            conv2_channels: 32,
            hidden: 64,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.conv1_channels,
            self.conv2_channels,
            self.hidden,
            self.classes,
        ];
        if dims.contains(&0) || self.height < 4 || self.width < 4 {
            return Err(Error::ShapeMismatch(format!(
                "degenerate topology {self:?}"
            )));
        }
        if self.classes < 2 {
            return Err(Error::ShapeMismatch("at least two classes required".into()));
        }
        Ok(())
    }

    fn pooled1(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    fn pooled2(&self) -> (usize, usize) {
        let (h, w) = self.pooled1();
        (h / 2, w / 2)
    }

    pub fn flat_len(&self) -> usize {
        let (h, w) = self.pooled2();
        self.conv2_channels * h * w
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Parameter tensors in storage order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            (
                "conv1.weight",
                vec![self.conv1_channels, self.in_channels, 3, 3],
            ),
            ("conv1.bias", vec![self.conv1_channels]),
            (
                "conv2.weight",
                vec![self.conv2_channels, self.conv1_channels, 3, 3],
            ),
            ("conv2.bias", vec![self.conv2_channels]),
            ("dense1.weight", vec![self.hidden, self.flat_len()]),
            ("dense1.bias", vec![self.hidden]),
            ("dense2.weight", vec![self.classes, self.hidden]),
            ("dense2.bias", vec![self.classes]),
        ]
    }

    fn offsets(&self) -> [usize; 9] {
        let mut out = [0; 9];
        for (i, (_, shape)) in self.tensors().iter().enumerate() {
            out[i + 1] = out[i] + shape.iter().product::<usize>();
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.offsets()[8]
    }
}

/// Intermediate activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    relu1: Vec<T>,
    pool1: Vec<T>,
    arg1: Vec<u32>,
    relu2: Vec<T>,
    arg2: Vec<u32>,
    flat: Vec<T>,
    hidden: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Which ReLUs fired and which input each max-pool picked. Passes with
    /// equal patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> (Vec<bool>, Vec<u32>) {
        let fired = self
            .relu1
            .iter()
            .chain(&self.relu2)
            .chain(&self.hidden)
            .map(|v| v.as_f64() > 0.0)
            .collect();
        let picked = self.arg1.iter().chain(&self.arg2).copied().collect();
        (fired, picked)
    }
}

/// Activation buffers reused across inference calls.
#[derive(Debug, Default, Clone)]
pub struct Workspace<T> {
    scratch: ConvScratch<T>,
    conv1: Vec<T>,
    pool1: Vec<T>,
    conv2: Vec<T>,
    flat: Vec<T>,
}

/// A convolutional classifier with all parameters in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    topology: Topology,
    params: Vec<T>,
}

impl<T: Scalar> Network<T> {
    /// He-uniform initialization, dense layers scaled by [`INIT_SCALE`];
    /// biases start at 0.
    pub fn init(topology: Topology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(topology.param_count());
        for (name, shape) in topology.tensors() {
            let n: usize = shape.iter().product();
            if name.ends_with("bias") {
                params.extend(std::iter::repeat_n(T::zero(), n));
                continue;
            }
            let fan_in: usize = shape[1..].iter().product();
            let scale = if name.starts_with("dense") {
                INIT_SCALE
            } else {
                1.0
            };
            let bound = (6.0 / fan_in as f64).sqrt() * scale;
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            params.extend((0..n).map(|_| T::lift(dist.sample(&mut rng))));
        }
        Ok(Self { topology, params })
    }

    pub fn from_params(topology: Topology, params: Vec<T>) -> Result<Self> {
        topology.validate()?;
        if params.len() != topology.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters given, topology needs {}",
                params.len(),
                topology.param_count()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(Self { topology, params })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            topology: self.topology,
            params: self.params.iter().map(|&p| U::lift(p.as_f64())).collect(),
        }
    }

    fn slice(&self, tensor: usize) -> &[T] {
        let off = self.topology.offsets();
        &self.params[off[tensor]..off[tensor + 1]]
    }

    /// Runs the network and keeps the activations needed by [`backward`].
    ///
    /// [`backward`]: Network::backward
    pub fn forward_cached(&self, input: &[T]) -> Result<ForwardCache<T>> {
        let t = &self.topology;
        self.check_input(input)?;
        let mut relu1 = conv2d_forward(
            input,
            t.in_channels,
            t.height,
            t.width,
            self.slice(0),
            self.slice(1),
        )?;
        relu_in_place(&mut relu1);
        let (pool1, arg1) = maxpool2(&relu1, t.conv1_channels, t.height, t.width);
        let (h1, w1) = t.pooled1();
        let mut relu2 = conv2d_forward(
            &pool1,
            t.conv1_channels,
            h1,
            w1,
            self.slice(2),
            self.slice(3),
        )?;
        relu_in_place(&mut relu2);
        let (flat, arg2) = maxpool2(&relu2, t.conv2_channels, h1, w1);
        let mut hidden = dense_forward(&flat, self.slice(4), self.slice(5))?;
        relu_in_place(&mut hidden);
        let logits = dense_forward(&hidden, self.slice(6), self.slice(7))?;
        Ok(ForwardCache {
            relu1,
            pool1,
            arg1,
            relu2,
            arg2,
            flat,
            hidden,
            logits,
        })
    }

    pub fn logits(&self, input: &[T]) -> Result<Vec<T>> {
        self.logits_with(input, &mut Workspace::default())
    }

    /// Inference-only forward pass; same result as [`forward_cached`].
    ///
    /// [`forward_cached`]: Network::forward_cached
    pub fn logits_with(&self, input: &[T], ws: &mut Workspace<T>) -> Result<Vec<T>> {
        let t = &self.topology;
        self.check_input(input)?;
        conv2d_forward_into(
            input,
            t.in_channels,
            t.height,
            t.width,
            self.slice(0),
            self.slice(1),
            &mut ws.scratch,
            &mut ws.conv1,
        )?;
        maxpool2_relu_into(
            &ws.conv1,
            t.conv1_channels,
            t.height,
            t.width,
            &mut ws.pool1,
        );
        let (h1, w1) = t.pooled1();
        conv2d_forward_into(
            &ws.pool1,
            t.conv1_channels,
            h1,
            w1,
            self.slice(2),
            self.slice(3),
            &mut ws.scratch,
            &mut ws.conv2,
        )?;
        maxpool2_relu_into(&ws.conv2, t.conv2_channels, h1, w1, &mut ws.flat);
        let mut hidden = dense_forward(&ws.flat, self.slice(4), self.slice(5))?;
        relu_in_place(&mut hidden);
        dense_forward(&hidden, self.slice(6), self.slice(7))
    }

    pub fn probabilities(&self, input: &[T]) -> Result<Vec<f64>> {
        self.probabilities_with(input, &mut Workspace::default())
    }

    pub fn probabilities_with(&self, input: &[T], ws: &mut Workspace<T>) -> Result<Vec<f64>> {
        let logits: Vec<f64> = self
            .logits_with(input, ws)?
            .iter()
            .map(|v| v.as_f64())
            .collect();
        softmax(&logits)
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        let t = &self.topology;
        if input.len() != t.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} values, topology expects {}x{}x{}",
                input.len(),
                t.in_channels,
                t.height,
                t.width
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier input"));
        }
        Ok(())
    }

    /// Cross-entropy of the softmax output against `label`.
    pub fn loss(&self, input: &[T], label: usize) -> Result<f64> {
        let logits = self.logits(input)?;
        Ok(cross_entropy(&logits, label))
    }

    /// Adds `∂loss/∂θ` for one example into `grads` and returns the loss.
    pub fn backward(
        &self,
        input: &[T],
        cache: &ForwardCache<T>,
        label: usize,
        grads: &mut [T],
    ) -> f64 {
        let t = &self.topology;
        let off = t.offsets();
        let (g01, rest) = grads.split_at_mut(off[2]);
        let (g_c1w, g_c1b) = g01.split_at_mut(off[1]);
        let (g23, rest) = rest.split_at_mut(off[4] - off[2]);
        let (g_c2w, g_c2b) = g23.split_at_mut(off[3] - off[2]);
        let (g45, g67) = rest.split_at_mut(off[6] - off[4]);
        let (g_d1w, g_d1b) = g45.split_at_mut(off[5] - off[4]);
        let (g_d2w, g_d2b) = g67.split_at_mut(off[7] - off[6]);

        // softmax + cross-entropy
        let logits: Vec<f64> = cache.logits.iter().map(|v| v.as_f64()).collect();
        let loss = cross_entropy(&cache.logits, label);
        let probs = softmax(&logits).expect("finite logits");
        let grad_logits: Vec<T> = probs
            .iter()
            .enumerate()
            .map(|(k, &p)| T::lift(if k == label { p - 1.0 } else { p }))
            .collect();

        let mut grad_hidden =
            dense_backward(&cache.hidden, self.slice(6), &grad_logits, g_d2w, g_d2b);
        for (g, &h) in grad_hidden.iter_mut().zip(&cache.hidden) {
            if h <= T::zero() {
                *g = T::zero();
            }
        }
        let grad_flat = dense_backward(&cache.flat, self.slice(4), &grad_hidden, g_d1w, g_d1b);

        let (h1, w1) = t.pooled1();
        let mut grad_relu2 = vec![T::zero(); cache.relu2.len()];
        for (&idx, &g) in cache.arg2.iter().zip(&grad_flat) {
            grad_relu2[idx as usize] += g;
        }
        for (g, &a) in grad_relu2.iter_mut().zip(&cache.relu2) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        let grad_pool1 = conv2d_backward(
            &cache.pool1,
            t.conv1_channels,
            h1,
            w1,
            self.slice(2),
            &grad_relu2,
            g_c2w,
            g_c2b,
            true,
        )
        .expect("input gradient requested");

        let mut grad_relu1 = vec![T::zero(); cache.relu1.len()];
        for (&idx, &g) in cache.arg1.iter().zip(&grad_pool1) {
            grad_relu1[idx as usize] += g;
        }
        for (g, &a) in grad_relu1.iter_mut().zip(&cache.relu1) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        conv2d_backward(
            input,
            t.in_channels,
            t.height,
            t.width,
            self.slice(0),
            &grad_relu1,
            g_c1w,
            g_c1b,
            false,
        );
        loss
    }
}

/// `logsumexp(z) − z[label]`.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> f64 {
    let z: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[label]
}
