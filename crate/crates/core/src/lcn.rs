//! Lightweight counting network: nine convolutions and three 2x2 max pools
//! producing a density map at 1/8 of the input resolution.
//!
//! | layer | kernel | channels | pooled after |
//! |-------|--------|----------|--------------|
//! | conv1 | 3x3    | 8        | yes          |
//! | conv2 | 3x3    | 16       |              |
//! | conv3 | 3x3    | 16       | yes          |
//! | conv4 | 3x3    | 32       |              |
//! | conv5 | 3x3    | 32       |              |
//! | conv6 | 3x3    | 32       | yes          |
//! | conv7 | 3x3    | 16       |              |
//! | conv8 | 3x3    | 8        |              |
//! | conv9 | 1x1    | 1        |              |
//!
//! ReLU follows conv1 through conv8; conv9 is linear, so predicted densities
//! may be negative unless [`LcnModel::clamp_output`] is set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::optim::{adam_step, gaussian_from, AdamState, WeightInit};
use crate::tensor::{Scalar, Tensor};

/// Output grid stride relative to the input image.
pub const OUTPUT_STRIDE: usize = 8;

/// Static description of one convolution in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub kernel: usize,
    pub out_channels: usize,
    pub pool_after: bool,
    pub relu: bool,
}

pub const LAYERS: [LayerSpec; 9] = [
    LayerSpec { name: "conv1", kernel: 3, out_channels: 8, pool_after: true, relu: true },
    LayerSpec { name: "conv2", kernel: 3, out_channels: 16, pool_after: false, relu: true },
    LayerSpec { name: "conv3", kernel: 3, out_channels: 16, pool_after: true, relu: true },
    LayerSpec { name: "conv4", kernel: 3, out_channels: 32, pool_after: false, relu: true },
    LayerSpec { name: "conv5", kernel: 3, out_channels: 32, pool_after: false, relu: true },
    LayerSpec { name: "conv6", kernel: 3, out_channels: 32, pool_after: true, relu: true },
    LayerSpec { name: "conv7", kernel: 3, out_channels: 16, pool_after: false, relu: true },
    LayerSpec { name: "conv8", kernel: 3, out_channels: 8, pool_after: false, relu: true },
    LayerSpec { name: "conv9", kernel: 1, out_channels: 1, pool_after: false, relu: false },
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Scalar> {
    pub spec: LayerSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn pad(&self) -> usize {
        self.spec.kernel / 2
    }
}

/// Parameters of the counting network in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct LcnModel<T: Scalar = f32> {
    pub in_channels: usize,
    pub layers: Vec<ConvLayer<T>>,
    /// Apply a ReLU to the output map. Off by default.
    pub clamp_output: bool,
}

/// Weight and bias shapes per layer for a given input channel count.
pub fn layer_shapes(in_channels: usize) -> Vec<(LayerSpec, [usize; 4], usize)> {
    let mut cin = in_channels;
    LAYERS
        .iter()
        .map(|&spec| {
            let shape = [spec.kernel, spec.kernel, cin, spec.out_channels];
            cin = spec.out_channels;
            (spec, shape, spec.out_channels)
        })
        .collect()
}

/// Exact number of weights and biases for the given input channel count.
pub fn param_count_for(in_channels: usize) -> usize {
    layer_shapes(in_channels).iter().map(|(_, w, b)| w.iter().product::<usize>() + b).sum()
}

impl<T: Scalar> LcnModel<T> {
    /// All-zero parameters.
    pub fn zeros(in_channels: usize) -> Self {
        let layers = layer_shapes(in_channels)
            .into_iter()
            .map(|(spec, w, b)| ConvLayer { spec, weight: Tensor::zeros(&w), bias: Tensor::zeros(&[b]) })
            .collect();
        LcnModel { in_channels, layers, clamp_output: false }
    }

    /// Weights drawn from N(0, std^2), biases zero.
    pub fn gaussian(in_channels: usize, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(LAYERS.len());
        for (spec, w, b) in layer_shapes(in_channels) {
            layers.push(ConvLayer { spec, weight: gaussian_from(&w, std, &mut rng)?, bias: Tensor::zeros(&[b]) });
        }
        Ok(LcnModel { in_channels, layers, clamp_output: false })
    }

    /// Kernels drawn per `init`, biases zero.
    pub fn with_init(in_channels: usize, init: &WeightInit, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(LAYERS.len());
        for (spec, w, b) in layer_shapes(in_channels) {
            let std = init.std_for(w[0] * w[1] * w[2]);
            layers.push(ConvLayer { spec, weight: gaussian_from(&w, std, &mut rng)?, bias: Tensor::zeros(&[b]) });
        }
        Ok(LcnModel { in_channels, layers, clamp_output: false })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> LcnModel<U> {
        LcnModel {
            in_channels: self.in_channels,
            clamp_output: self.clamp_output,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer { spec: l.spec, weight: l.weight.cast(), bias: l.bias.cast() })
                .collect(),
        }
    }

    /// Parameter tensors in layer order: weight, bias, weight, bias, ...
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|l| [(format!("{}.weight", l.spec.name), &l.weight), (format!("{}.bias", l.spec.name), &l.bias)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    fn check_input(&self, frame: &Tensor<T>) -> Result<()> {
        frame.expect_rank("lcn_forward", 3)?;
        let s = frame.shape();
        if s[2] != self.in_channels {
            return Err(Error::shape("lcn_forward", format!("frame has {} channels, model expects {}", s[2], self.in_channels)));
        }
        if s[0] < OUTPUT_STRIDE || s[1] < OUTPUT_STRIDE {
            return Err(Error::shape("lcn_forward", format!("frame {}x{} is smaller than 8x8", s[0], s[1])));
        }
        Ok(())
    }

    /// Inference forward pass of one `H x W x C` frame.
    pub fn forward(&self, frame: &Tensor<T>) -> Result<DensityMap<T>> {
        self.check_input(frame)?;
        let mut x = std::borrow::Cow::Borrowed(frame);
        for layer in &self.layers {
            let mut y = ops::conv2d(&x, &layer.weight, &layer.bias, layer.pad())?;
            if layer.spec.relu {
                y.data_mut().iter_mut().for_each(|v| {
                    if !(*v > T::zero()) {
                        *v = T::zero()
                    }
                });
            }
            if layer.spec.pool_after {
                y = ops::maxpool2(&y)?.0;
            }
            x = std::borrow::Cow::Owned(y);
        }
        let mut y = x.into_owned();
        if self.clamp_output {
            y.data_mut().iter_mut().for_each(|v| {
                if !(*v > T::zero()) {
                    *v = T::zero()
                }
            });
        }
        let (h, w) = (y.shape()[0], y.shape()[1]);
        DensityMap::new(y.reshape(&[h, w])?, OUTPUT_STRIDE)
    }

    /// Registers every parameter on `graph`.
    pub fn register(&self, graph: &mut Graph<T>) -> LcnVars {
        LcnVars {
            layers: self
                .layers
                .iter()
                .map(|l| (graph.param(l.weight.clone()), graph.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Recorded forward pass; returns the `M x N` output map variable.
    pub fn forward_graph(&self, graph: &mut Graph<T>, vars: &LcnVars, frame: Var) -> Result<Var> {
        self.check_input(graph.value(frame))?;
        let mut x = frame;
        for (layer, &(w, b)) in self.layers.iter().zip(&vars.layers) {
            x = graph.conv2d(x, w, b, layer.pad())?;
            if layer.spec.relu {
                x = graph.relu(x)?;
            }
            if layer.spec.pool_after {
                x = graph.maxpool2(x)?;
            }
        }
        if self.clamp_output {
            x = graph.relu(x)?;
        }
        let s = graph.value(x).shape().to_vec();
        graph.reshape(x, &[s[0], s[1]])
    }
}

/// Graph handles for each layer's (weight, bias).
#[derive(Debug, Clone)]
pub struct LcnVars {
    pub layers: Vec<(Var, Var)>,
}

impl LcnVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// `(1 / 2N) * sum_i ||pred_i - gt_i||^2` over a batch of `N` maps.
pub fn lcn_loss<T: Scalar>(preds: &[DensityMap<T>], gts: &[DensityMap<T>]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::shape("lcn_loss", format!("{} predictions for {} targets", preds.len(), gts.len())));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        if p.grid.shape() != g.grid.shape() {
            return Err(Error::shape("lcn_loss", format!("{:?} vs {:?}", p.grid.shape(), g.grid.shape())));
        }
        total += p.grid.data().iter().zip(g.grid.data()).map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>();
    }
    Ok(total / (2.0 * preds.len() as f64))
}

/// Graph form of [`lcn_loss`], with optional region masks applied to the
/// predictions before the comparison.
pub fn lcn_loss_graph<T: Scalar>(
    graph: &mut Graph<T>,
    preds: &[Var],
    gts: &[Tensor<T>],
    masks: &[Option<Tensor<T>>],
) -> Result<Var> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::shape("lcn_loss", format!("{} predictions for {} targets", preds.len(), gts.len())));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (i, (&p, gt)) in preds.iter().zip(gts).enumerate() {
        if graph.value(p).shape() != gt.shape() {
            return Err(Error::shape("lcn_loss", format!("{:?} vs {:?}", graph.value(p).shape(), gt.shape())));
        }
        let p = match masks.get(i).and_then(|m| m.clone()) {
            Some(mask) => graph.mul_const(p, mask)?,
            None => p,
        };
        let g = graph.constant(gt.clone());
        let d = graph.sub(p, g)?;
        terms.push(graph.sum_squares(d));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = graph.add(total, t)?;
    }
    Ok(graph.scale(total, T::of(1.0 / (2.0 * preds.len() as f64))))
}

/// One training image with its ground truth on the output grid.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor<f32>,
    pub gt: DensityMap<f32>,
    /// Region mask on the output grid; cells outside are excluded from the loss.
    pub roi: Option<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LcnTrainConfig {
    pub lr: f64,
    pub init: WeightInit,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Emit a checkpoint event every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Sets [`LcnModel::clamp_output`] on the trained model.
    pub clamp_output: bool,
}

impl Default for LcnTrainConfig {
    fn default() -> Self {
        LcnTrainConfig { lr: 1e-5, init: WeightInit::default(), batch_size: 1, iterations: 10_000, seed: 0, checkpoint_every: 0, clamp_output: false }
    }
}

/// Adam moments for every parameter tensor of a model, in tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub tensors: Vec<AdamState>,
}

impl OptimizerState {
    pub fn for_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        OptimizerState { tensors: lengths.into_iter().map(AdamState::new).collect() }
    }

    pub fn step(&self) -> u64 {
        self.tensors.first().map_or(0, |s| s.step)
    }
}

/// Progress notifications emitted by the training loops.
pub enum TrainEvent<'a, M> {
    Step { iteration: usize, loss: f64 },
    Checkpoint { iteration: usize, model: &'a M, optimizer: &'a OptimizerState },
    Diverged { iteration: usize, last_good: &'a M },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub optimizer: OptimizerState,
    pub losses: Vec<f64>,
}

/// Trains the network with Adam on `samples`.
///
/// Starts from `resume` when given, otherwise from a Gaussian initialization
/// seeded by `cfg.seed`. Samples are visited in a seeded shuffled order.
pub fn lcn_train(
    samples: &[TrainSample],
    cfg: &LcnTrainConfig,
    resume: Option<(LcnModel<f32>, OptimizerState)>,
    mut on_event: impl FnMut(TrainEvent<'_, LcnModel<f32>>),
) -> Result<TrainOutcome<LcnModel<f32>>> {
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be non-negative, got {}", cfg.lr)));
    }
    let batch = cfg.batch_size.max(1);
    let in_channels = samples[0].image.shape().get(2).copied().unwrap_or(0);
    let (mut model, mut opt) = match resume {
        Some(r) => r,
        None => {
            let m = LcnModel::with_init(in_channels, &cfg.init, cfg.seed)?;
            let opt = OptimizerState::for_lengths(m.tensors().iter().map(|(_, t)| t.len()));
            (m, opt)
        }
    };
    model.clamp_output = cfg.clamp_output;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.iterations);

    for iteration in 1..=cfg.iterations {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }

        let mut graph = Graph::<f32>::new();
        let vars = model.register(&mut graph);
        let mut preds = Vec::with_capacity(batch);
        let mut gts = Vec::with_capacity(batch);
        let mut masks = Vec::with_capacity(batch);
        for &i in &picked {
            let s = &samples[i];
            let x = graph.constant(s.image.clone());
            preds.push(model.forward_graph(&mut graph, &vars, x)?);
            gts.push(s.gt.grid.clone());
            masks.push(s.roi.clone());
        }
        let loss = lcn_loss_graph(&mut graph, &preds, &gts, &masks)?;
        let loss_value = graph.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            on_event(TrainEvent::Diverged { iteration, last_good: &model });
            return Err(Error::Diverged { iteration });
        }
        let grads = graph.backward(loss)?;
        let all = vars.all();
        for ((param, state), var) in model.tensors_mut().into_iter().zip(&mut opt.tensors).zip(all) {
            let g = grads.get_or_zeros(var, param.shape());
            adam_step(param, &g, state, cfg.lr)?;
        }
        losses.push(loss_value);
        on_event(TrainEvent::Step { iteration, loss: loss_value });
        if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
            on_event(TrainEvent::Checkpoint { iteration, model: &model, optimizer: &opt });
        }
    }
    Ok(TrainOutcome { model, optimizer: opt, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(param_count_for(3), 32_641);
        assert_eq!(param_count_for(1), 32_497);
        assert_eq!(LcnModel::<f32>::zeros(3).param_count(), 32_641);
        let conv9 = &LcnModel::<f32>::zeros(3).layers[8];
        assert_eq!(conv9.weight.len() + conv9.bias.len(), 9);
    }

    #[test]
    fn output_shapes() {
        let m = LcnModel::<f32>::zeros(3);
        let out = m.forward(&Tensor::zeros(&[240, 320, 3])).unwrap();
        assert_eq!(out.grid.shape(), &[30, 40]);
        assert_eq!(out.scale, 8);
        let out = m.forward(&Tensor::zeros(&[158, 238, 3])).unwrap();
        assert_eq!(out.grid.shape(), &[19, 29]);
        assert!(m.forward(&Tensor::zeros(&[7, 64, 3])).is_err());
        assert!(m.forward(&Tensor::zeros(&[64, 64, 1])).is_err());
    }

    #[test]
    fn clamped_output_is_the_relu_of_the_raw_map() {
        let mut m = LcnModel::<f64>::gaussian(3, 0.3, 4).unwrap();
        m.layers[8].bias.data_mut()[0] = -0.5;
        let frame = crate::optim::gaussian_init::<f64>(&[24, 32, 3], 1.0, 2).unwrap();
        let raw = m.forward(&frame).unwrap();
        assert!(raw.grid.data().iter().any(|&v| v < 0.0));
        m.clamp_output = true;
        let clamped = m.forward(&frame).unwrap();
        for (c, r) in clamped.grid.data().iter().zip(raw.grid.data()) {
            assert_eq!(*c, r.max(0.0));
        }
        let mut g = Graph::new();
        let vars = m.register(&mut g);
        let x = g.constant(frame);
        let out = m.forward_graph(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(out), &clamped.grid);
    }

    #[test]
    fn zero_model_predicts_nothing() {
        let m = LcnModel::<f32>::zeros(3);
        let frame = Tensor::full(&[32, 48, 3], 0.7);
        assert_eq!(m.forward(&frame).unwrap().count(), 0.0);
    }

    #[test]
    fn loss_values() {
        let a = DensityMap::<f64>::new(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), 8).unwrap();
        assert_eq!(lcn_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let mut b = a.clone();
        b.grid.data_mut()[2] += 2.0;
        assert_eq!(lcn_loss(&[a.clone()], &[b]).unwrap(), 2.0);
        let c = DensityMap::<f64>::zeros(3, 2, 8);
        assert!(lcn_loss(&[a], &[c]).is_err());
    }

    #[test]
    fn graph_forward_matches_inference() {
        let m = LcnModel::<f64>::gaussian(3, 0.2, 9).unwrap();
        let frame = crate::optim::gaussian_init::<f64>(&[24, 40, 3], 1.0, 1).unwrap();
        let direct = m.forward(&frame).unwrap();
        let mut g = Graph::new();
        let vars = m.register(&mut g);
        let x = g.constant(frame);
        let out = m.forward_graph(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(out), &direct.grid);
    }

    #[test]
    fn activations_are_wired() {
        let mut m = LcnModel::<f64>::gaussian(3, 0.3, 4).unwrap();
        for l in &mut m.layers {
            l.bias = crate::optim::gaussian_init(l.bias.shape(), 0.3, 77).unwrap();
        }
        let frame = crate::optim::gaussian_init::<f64>(&[16, 16, 3], 1.0, 2).unwrap();
        let a = m.forward(&frame).unwrap();
        let b = m.forward(&frame.map(|v| 2.0 * v)).unwrap();
        let diff: f64 = a.grid.data().iter().zip(b.grid.data()).map(|(x, y)| (2.0 * x - y).abs()).sum();
        assert!(diff > 1e-6);
    }
}
