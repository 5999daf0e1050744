//! Temporal fusion over a window of per-frame density maps.
//!
//! The `2k + 1` maps of a window are flattened row-major and concatenated in
//! temporal order into one `L x 1` column, `L = (2k + 1) * M * N`. Each block
//! lifts the column to `H` channels with a pointwise convolution, applies
//! three dilated residual layers with dilations 1, 2 and 4, and projects back
//! to one channel. Blocks are chained. The L1 norm of each frame's segment in
//! a block's output, normalized over the window, gives that frame's fusion
//! weight; the fused map is the weighted sum of the window's maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lcn::{LcnModel, OptimizerState, TrainEvent, TrainOutcome};
use crate::ops;
use crate::optim::{adam_step, gaussian_from};
use crate::tensor::{Scalar, Tensor};

pub const LAYERS_PER_BLOCK: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TanConfig {
    /// Frames on each side of the center frame.
    pub k: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub lr: f64,
    pub init_std: f64,
    pub iterations: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TanConfig {
    fn default() -> Self {
        TanConfig {
            k: 2,
            blocks: 3,
            hidden: 20,
            lambda: 0.15,
            lr: 5e-4,
            init_std: 0.01,
            iterations: 2_000,
            batch_size: 1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.blocks < 1 || self.hidden < 1 {
            return Err(Error::invalid("k, blocks and hidden must all be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        2 * self.k + 1
    }
}

/// Dilation of residual layer `i` (1-based): `2^(i-1)`.
pub fn dilation(i: usize) -> usize {
    1 << (i - 1)
}

/// Closed-form TAN parameter count: per block `12H^2 + 9H + 1`.
pub fn param_count_for(blocks: usize, hidden: usize) -> usize {
    blocks * (12 * hidden * hidden + 9 * hidden + 1)
}

/// The `2k + 1` density maps around a center frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow<T: Scalar = f32> {
    pub maps: Vec<DensityMap<T>>,
    pub center: usize,
}

impl<T: Scalar> FrameWindow<T> {
    pub fn new(maps: Vec<DensityMap<T>>, center: usize) -> Result<Self> {
        if maps.is_empty() || maps.len() % 2 == 0 {
            return Err(Error::invalid(format!("window needs an odd number of maps, got {}", maps.len())));
        }
        let shape = maps[0].grid.shape().to_vec();
        if maps.iter().any(|m| m.grid.shape() != shape.as_slice()) {
            return Err(Error::shape("frame_window", "maps in a window must share one shape"));
        }
        Ok(FrameWindow { maps, center })
    }

    pub fn k(&self) -> usize {
        self.maps.len() / 2
    }

    pub fn cells(&self) -> usize {
        self.maps[0].grid.len()
    }
}

/// Flattens each map row-major and concatenates them in temporal order.
pub fn reshape_concat<T: Scalar>(window: &FrameWindow<T>) -> Tensor<T> {
    let mut data = Vec::with_capacity(window.maps.len() * window.cells());
    for m in &window.maps {
        data.extend_from_slice(m.grid.data());
    }
    let l = data.len();
    Tensor::from_vec(&[l, 1], data).expect("length matches")
}

/// Inverse of [`reshape_concat`].
pub fn split_concat<T: Scalar>(v: &Tensor<T>, rows: usize, cols: usize, scale: usize) -> Result<Vec<DensityMap<T>>> {
    let cells = rows * cols;
    if cells == 0 || v.len() % cells != 0 {
        return Err(Error::shape("split_concat", format!("length {} vs {rows}x{cols} maps", v.len())));
    }
    v.data()
        .chunks_exact(cells)
        .map(|c| DensityMap::new(Tensor::from_vec(&[rows, cols], c.to_vec())?, scale))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLayer<T: Scalar> {
    /// `3 x H x H` dilated kernel.
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// `1 x H x H` pointwise kernel.
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TanBlock<T: Scalar> {
    pub in_w: Tensor<T>,
    pub in_b: Tensor<T>,
    pub layers: Vec<ResidualLayer<T>>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TanModel<T: Scalar = f32> {
    pub k: usize,
    pub hidden: usize,
    pub blocks: Vec<TanBlock<T>>,
}

impl<T: Scalar> TanModel<T> {
    pub fn zeros(k: usize, blocks: usize, hidden: usize) -> Self {
        let h = hidden;
        let block = || TanBlock {
            in_w: Tensor::zeros(&[1, 1, h]),
            in_b: Tensor::zeros(&[h]),
            layers: (0..LAYERS_PER_BLOCK)
                .map(|_| ResidualLayer {
                    w1: Tensor::zeros(&[3, h, h]),
                    b1: Tensor::zeros(&[h]),
                    w2: Tensor::zeros(&[1, h, h]),
                    b2: Tensor::zeros(&[h]),
                })
                .collect(),
            out_w: Tensor::zeros(&[1, h, 1]),
            out_b: Tensor::zeros(&[1]),
        };
        TanModel { k, hidden, blocks: (0..blocks).map(|_| block()).collect() }
    }

    /// Kernels drawn from N(0, std^2); biases zero.
    pub fn gaussian(k: usize, blocks: usize, hidden: usize, std: f64, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(k, blocks, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut model.blocks {
            block.in_w = gaussian_from(block.in_w.shape(), std, &mut rng)?;
            for layer in &mut block.layers {
                layer.w1 = gaussian_from(layer.w1.shape(), std, &mut rng)?;
                layer.w2 = gaussian_from(layer.w2.shape(), std, &mut rng)?;
            }
            block.out_w = gaussian_from(block.out_w.shape(), std, &mut rng)?;
        }
        Ok(model)
    }

    pub fn from_config(cfg: &TanConfig) -> Result<Self> {
        cfg.validate()?;
        Self::gaussian(cfg.k, cfg.blocks, cfg.hidden, cfg.init_std, cfg.seed)
    }

    pub fn window_len(&self) -> usize {
        2 * self.k + 1
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> TanModel<U> {
        TanModel {
            k: self.k,
            hidden: self.hidden,
            blocks: self
                .blocks
                .iter()
                .map(|b| TanBlock {
                    in_w: b.in_w.cast(),
                    in_b: b.in_b.cast(),
                    layers: b
                        .layers
                        .iter()
                        .map(|l| ResidualLayer { w1: l.w1.cast(), b1: l.b1.cast(), w2: l.w2.cast(), b2: l.b2.cast() })
                        .collect(),
                    out_w: b.out_w.cast(),
                    out_b: b.out_b.cast(),
                })
                .collect(),
        }
    }

    /// Parameter tensors in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (s, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{s}.in.weight"), &b.in_w));
            out.push((format!("block{s}.in.bias"), &b.in_b));
            for (i, l) in b.layers.iter().enumerate() {
                out.push((format!("block{s}.layer{i}.w1"), &l.w1));
                out.push((format!("block{s}.layer{i}.b1"), &l.b1));
                out.push((format!("block{s}.layer{i}.w2"), &l.w2));
                out.push((format!("block{s}.layer{i}.b2"), &l.b2));
            }
            out.push((format!("block{s}.out.weight"), &b.out_w));
            out.push((format!("block{s}.out.bias"), &b.out_b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.in_w);
            out.push(&mut b.in_b);
            for l in &mut b.layers {
                out.push(&mut l.w1);
                out.push(&mut l.b1);
                out.push(&mut l.w2);
                out.push(&mut l.b2);
            }
            out.push(&mut b.out_w);
            out.push(&mut b.out_b);
        }
        out
    }

    pub fn register(&self, graph: &mut Graph<T>) -> TanVars {
        let params = self.tensors().into_iter().map(|(_, t)| graph.param(t.clone())).collect();
        TanVars { params, blocks: self.blocks.len() }
    }

    /// Recorded forward pass over a window of map variables; returns one
    /// output per block.
    pub fn forward_graph(&self, graph: &mut Graph<T>, vars: &TanVars, maps: &[Var]) -> Result<Vec<BlockOutput>> {
        if maps.len() != self.window_len() {
            return Err(Error::shape("tan_forward", format!("{} maps for a window of {}", maps.len(), self.window_len())));
        }
        let per_block = 4 + 4 * LAYERS_PER_BLOCK;
        let mut y = graph.concat(maps)?;
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for s in 0..self.blocks.len() {
            let p = &vars.params[s * per_block..(s + 1) * per_block];
            let mut h = graph.conv1d(y, p[0], p[1], 1)?;
            for i in 0..LAYERS_PER_BLOCK {
                let q = &p[2 + 4 * i..6 + 4 * i];
                let z = graph.conv1d(h, q[0], q[1], dilation(i + 1))?;
                let z = graph.relu(z)?;
                let z = graph.conv1d(z, q[2], q[3], 1)?;
                h = graph.add(h, z)?;
            }
            y = graph.conv1d(h, p[per_block - 2], p[per_block - 1], 1)?;
            let weights = graph.segment_weights(y, maps.len())?;
            let fused = graph.weighted_sum(weights, maps)?;
            outputs.push(BlockOutput { y, weights, fused });
        }
        Ok(outputs)
    }
}

#[derive(Debug, Clone)]
pub struct TanVars {
    pub params: Vec<Var>,
    pub blocks: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub y: Var,
    pub weights: Var,
    pub fused: Var,
}

/// `v + W2 * relu(dilated_conv(v, W1, b1, 2^(i-1))) + b2` for layer `i` (1-based).
pub fn dilated_residual_layer<T: Scalar>(v: &Tensor<T>, layer: &ResidualLayer<T>, i: usize) -> Result<Tensor<T>> {
    if i == 0 {
        return Err(Error::invalid("layer index is 1-based"));
    }
    let z = ops::dilated_conv1d(v, &layer.w1, &layer.b1, dilation(i))?;
    let z = ops::relu(&z);
    let mut z = ops::dilated_conv1d(&z, &layer.w2, &layer.b2, 1)?;
    if z.shape() != v.shape() {
        return Err(Error::shape("dilated_residual_layer", format!("{:?} vs {:?}", z.shape(), v.shape())));
    }
    for (a, &b) in z.data_mut().iter_mut().zip(v.data()) {
        *a = b + *a;
    }
    Ok(z)
}

/// One block: pointwise lift to `H` channels, the residual layers, and a
/// pointwise projection back to one channel. Maps `L x 1` to `L x 1`.
pub fn dilated_residual_block<T: Scalar>(v: &Tensor<T>, block: &TanBlock<T>) -> Result<Tensor<T>> {
    let mut h = ops::dilated_conv1d(v, &block.in_w, &block.in_b, 1)?;
    for (i, layer) in block.layers.iter().enumerate() {
        h = dilated_residual_layer(&h, layer, i + 1)?;
    }
    ops::dilated_conv1d(&h, &block.out_w, &block.out_b, 1)
}

/// Normalized per-segment L1 norms of a block output; uniform when the
/// output is identically zero.
pub fn fusion_weights<T: Scalar>(v_out: &Tensor<T>, k: usize, cells: usize) -> Result<Vec<f64>> {
    let n = 2 * k + 1;
    if cells == 0 || v_out.len() != n * cells {
        return Err(Error::shape("fusion_weights", format!("length {} vs {n} segments of {cells}", v_out.len())));
    }
    let norms: Vec<f64> =
        v_out.data().chunks_exact(cells).map(|s| s.iter().map(|v| v.as_f64().abs()).sum()).collect();
    let total: f64 = norms.iter().sum();
    Ok(if total > 0.0 { norms.iter().map(|x| x / total).collect() } else { vec![1.0 / n as f64; n] })
}

/// `sum_dt w_dt * f(x_{t+dt})`.
pub fn fuse_density<T: Scalar>(weights: &[f64], window: &FrameWindow<T>) -> Result<DensityMap<T>> {
    if weights.len() != window.maps.len() {
        return Err(Error::shape("fuse_density", format!("{} weights for {} maps", weights.len(), window.maps.len())));
    }
    let first = &window.maps[0];
    let mut acc = vec![T::zero(); first.grid.len()];
    for (&w, m) in weights.iter().zip(&window.maps) {
        let w = T::of(w);
        for (a, &v) in acc.iter_mut().zip(m.grid.data()) {
            *a += w * v;
        }
    }
    DensityMap::new(Tensor::from_vec(first.grid.shape(), acc)?, first.scale)
}

/// Components of the per-block loss averaged over a set of frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockLoss {
    /// Mean squared count error.
    pub mse: f64,
    /// Mean over frames of the pixel-mean Smooth-L1 penalty.
    pub smooth_l1: f64,
    pub total: f64,
}

pub fn smooth_l1(r: f64) -> f64 {
    if r.abs() < 1.0 {
        0.5 * r * r
    } else {
        r.abs() - 0.5
    }
}

/// `L_mse + lambda * L_SL1` over fused maps and their ground truth.
pub fn block_loss<T: Scalar>(fused: &[DensityMap<T>], gt: &[DensityMap<T>], lambda: f64) -> Result<BlockLoss> {
    if fused.len() != gt.len() || fused.is_empty() {
        return Err(Error::shape("block_loss", format!("{} fused maps for {} targets", fused.len(), gt.len())));
    }
    let n = fused.len() as f64;
    let (mut mse, mut sl1) = (0.0, 0.0);
    for (f, g) in fused.iter().zip(gt) {
        if f.grid.shape() != g.grid.shape() {
            return Err(Error::shape("block_loss", format!("{:?} vs {:?}", f.grid.shape(), g.grid.shape())));
        }
        mse += (f.count() - g.count()).powi(2);
        let px: f64 = f.grid.data().iter().zip(g.grid.data()).map(|(&a, &b)| smooth_l1(a.as_f64() - b.as_f64())).sum();
        sl1 += px / f.grid.len() as f64;
    }
    let (mse, sl1) = (mse / n, sl1 / n);
    Ok(BlockLoss { mse, smooth_l1: sl1, total: mse + lambda * sl1 })
}

/// Graph form of the training objective: the block loss of every block's
/// fused map, summed over blocks and averaged over the windows.
pub fn tan_loss_graph<T: Scalar>(graph: &mut Graph<T>, per_window: &[(Vec<BlockOutput>, Tensor<T>)], lambda: f64) -> Result<Var> {
    if per_window.is_empty() {
        return Err(Error::invalid("no windows in batch"));
    }
    let mut total: Option<Var> = None;
    for (outputs, gt) in per_window {
        let gt_count = graph.constant(Tensor::scalar(T::of(gt.sum())));
        let gt_map = graph.constant(gt.clone());
        for out in outputs {
            let c = graph.sum(out.fused);
            let d = graph.sub(c, gt_count)?;
            let mut term = graph.sum_squares(d);
            if lambda > 0.0 {
                let s = graph.smooth_l1_mean(out.fused, gt_map)?;
                let s = graph.scale(s, T::of(lambda));
                term = graph.add(term, s)?;
            }
            total = Some(match total {
                None => term,
                Some(t) => graph.add(t, term)?,
            });
        }
    }
    let total = total.expect("at least one block");
    Ok(graph.scale(total, T::of(1.0 / per_window.len() as f64)))
}

/// Result of a TAN pass over one window.
#[derive(Debug, Clone)]
pub struct TanOutput<T: Scalar = f32> {
    pub fused: DensityMap<T>,
    pub count: f64,
    /// Fusion weights of the final block, used for the fused map.
    pub weights: Vec<f64>,
    /// Fusion weights produced by every block, in order.
    pub block_weights: Vec<Vec<f64>>,
}

/// TAN over a window of precomputed per-frame maps.
pub fn tan_forward_maps<T: Scalar>(window: &FrameWindow<T>, tan: &TanModel<T>) -> Result<TanOutput<T>> {
    if window.maps.len() != tan.window_len() {
        return Err(Error::shape("tan_forward", format!("{} maps for a window of {}", window.maps.len(), tan.window_len())));
    }
    let cells = window.cells();
    let mut y = reshape_concat(window);
    let mut block_weights = Vec::with_capacity(tan.blocks.len());
    for block in &tan.blocks {
        y = dilated_residual_block(&y, block)?;
        block_weights.push(fusion_weights(&y, tan.k, cells)?);
    }
    let weights = block_weights.last().cloned().ok_or_else(|| Error::invalid("model has no blocks"))?;
    let fused = fuse_density(&weights, window)?;
    let count = fused.count();
    Ok(TanOutput { fused, count, weights, block_weights })
}

/// Full pipeline for one window of frames: per-frame network maps, then TAN.
pub fn tan_forward<T: Scalar>(frames: &[Tensor<T>], lcn: &LcnModel<T>, tan: &TanModel<T>) -> Result<TanOutput<T>> {
    if frames.len() != tan.window_len() {
        return Err(Error::shape("tan_forward", format!("{} frames for a window of {}", frames.len(), tan.window_len())));
    }
    let maps = frames.iter().map(|f| lcn.forward(f)).collect::<Result<Vec<_>>>()?;
    let window = FrameWindow::new(maps, tan.k)?;
    tan_forward_maps(&window, tan)
}

/// One training window: frozen per-frame maps and the center ground truth on
/// the same grid.
#[derive(Debug, Clone)]
pub struct TanSample {
    pub window: FrameWindow<f32>,
    pub gt: DensityMap<f32>,
}

/// Optimizes the TAN parameters with Adam on windows whose per-frame maps
/// come from a frozen counting network.
pub fn tan_train(
    samples: &[TanSample],
    cfg: &TanConfig,
    resume: Option<(TanModel<f32>, OptimizerState)>,
    mut on_event: impl FnMut(TrainEvent<'_, TanModel<f32>>),
) -> Result<TrainOutcome<TanModel<f32>>> {
    cfg.validate()?;
    let (mut model, mut opt) = match resume {
        Some(r) => r,
        None => {
            let m = TanModel::from_config(cfg)?;
            let opt = OptimizerState::for_lengths(m.tensors().iter().map(|(_, t)| t.len()));
            (m, opt)
        }
    };
    if cfg.iterations > 0 && samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(s) = samples.iter().find(|s| s.window.maps.len() != model.window_len()) {
        return Err(Error::shape("tan_train", format!("window of {} maps, model expects {}", s.window.maps.len(), model.window_len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.max(1);
    let mut losses = Vec::with_capacity(cfg.iterations);

    for iteration in 1..=cfg.iterations {
        let mut graph = Graph::<f32>::new();
        let vars = model.register(&mut graph);
        let mut per_window = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                cursor = 0;
            }
            let s = &samples[order[cursor]];
            cursor += 1;
            let maps: Vec<Var> = s.window.maps.iter().map(|m| graph.constant(m.grid.clone())).collect();
            let outs = model.forward_graph(&mut graph, &vars, &maps)?;
            per_window.push((outs, s.gt.grid.clone()));
        }
        let loss = tan_loss_graph(&mut graph, &per_window, cfg.lambda)?;
        let loss_value = graph.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            on_event(TrainEvent::Diverged { iteration, last_good: &model });
            return Err(Error::Diverged { iteration });
        }
        let grads = graph.backward(loss)?;
        for ((param, state), &var) in model.tensors_mut().into_iter().zip(&mut opt.tensors).zip(&vars.params) {
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


/// One window of raw frames for joint training, with the centre frame's
/// ground truth on the output grid.
#[derive(Debug, Clone)]
pub struct JointSample {
    pub frames: Vec<std::sync::Arc<Tensor<f32>>>,
    pub gt: DensityMap<f32>,
    /// Region mask on the output grid, applied to every frame's map.
    pub roi: Option<Tensor<f32>>,
}

/// Counting and fusion networks trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub lcn: LcnModel<f32>,
    pub tan: TanModel<f32>,
}

impl JointModel {
    /// Number of leading optimizer entries that belong to the counting network.
    pub fn lcn_tensors(&self) -> usize {
        self.lcn.tensors().len()
    }
}

/// Fine-tunes the counting network together with the fusion network.
///
/// The counting network is updated with `lcn_lr`, the fusion network with
/// `cfg.lr`. The optimizer state lists the counting network's tensors first.
pub fn joint_train(
    samples: &[JointSample],
    cfg: &TanConfig,
    lcn_lr: f64,
    start: JointModel,
    optimizer: Option<OptimizerState>,
    mut on_event: impl FnMut(TrainEvent<'_, JointModel>),
) -> Result<TrainOutcome<JointModel>> {
    cfg.validate()?;
    if !(lcn_lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be non-negative, got {lcn_lr}")));
    }
    let mut model = start;
    if model.tan.window_len() != cfg.window_len() {
        return Err(Error::shape("joint_train", format!("model window {} vs config window {}", model.tan.window_len(), cfg.window_len())));
    }
    let lengths: Vec<usize> = model.lcn.tensors().iter().chain(model.tan.tensors().iter()).map(|(_, t)| t.len()).collect();
    let mut opt = optimizer.unwrap_or_else(|| OptimizerState::for_lengths(lengths.iter().copied()));
    if opt.tensors.len() != lengths.len() {
        return Err(Error::invalid(format!("optimizer tracks {} tensors, models have {}", opt.tensors.len(), lengths.len())));
    }
    if cfg.iterations > 0 && samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(s) = samples.iter().find(|s| s.frames.len() != cfg.window_len()) {
        return Err(Error::shape("joint_train", format!("window of {} frames, model expects {}", s.frames.len(), cfg.window_len())));
    }
    let n_lcn = model.lcn_tensors();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0003);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.max(1);
    let mut losses = Vec::with_capacity(cfg.iterations);

    for iteration in 1..=cfg.iterations {
        let mut graph = Graph::<f32>::new();
        let lcn_vars = model.lcn.register(&mut graph);
        let tan_vars = model.tan.register(&mut graph);
        let mut per_window = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                cursor = 0;
            }
            let s = &samples[order[cursor]];
            cursor += 1;
            let mut maps = Vec::with_capacity(s.frames.len());
            for f in &s.frames {
                let x = graph.constant((**f).clone());
                let m = model.lcn.forward_graph(&mut graph, &lcn_vars, x)?;
                maps.push(match &s.roi {
                    Some(mask) => graph.mul_const(m, mask.clone())?,
                    None => m,
                });
            }
            let outs = model.tan.forward_graph(&mut graph, &tan_vars, &maps)?;
            per_window.push((outs, s.gt.grid.clone()));
        }
        let loss = tan_loss_graph(&mut graph, &per_window, cfg.lambda)?;
        let loss_value = graph.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            on_event(TrainEvent::Diverged { iteration, last_good: &model });
            return Err(Error::Diverged { iteration });
        }
        let grads = graph.backward(loss)?;
        let vars: Vec<Var> = lcn_vars.all().into_iter().chain(tan_vars.params.iter().copied()).collect();
        let params = model.lcn.tensors_mut().into_iter().chain(model.tan.tensors_mut());
        for (i, ((param, state), var)) in params.zip(&mut opt.tensors).zip(vars).enumerate() {
            let g = grads.get_or_zeros(var, param.shape());
            adam_step(param, &g, state, if i < n_lcn { lcn_lr } else { cfg.lr })?;
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

    fn map(rows: usize, cols: usize, vals: &[f64]) -> DensityMap<f64> {
        DensityMap::new(Tensor::from_f64(&[rows, cols], vals).unwrap(), 8).unwrap()
    }

    #[test]
    fn parameter_budget() {
        assert_eq!(param_count_for(3, 20), 14_943);
        assert_eq!(TanModel::<f32>::zeros(2, 3, 20).param_count(), 14_943);
        for h in [1, 5, 20, 33] {
            assert_eq!(param_count_for(3, h), 36 * h * h + 27 * h + 3);
        }
    }

    #[test]
    fn concat_layout_and_inverse() {
        let maps = vec![map(2, 2, &[1., 2., 3., 4.]), map(2, 2, &[5., 6., 7., 8.]), map(2, 2, &[9., 10., 11., 12.])];
        let w = FrameWindow::new(maps.clone(), 1).unwrap();
        let v = reshape_concat(&w);
        assert_eq!(v.shape(), &[12, 1]);
        assert_eq!(v.data(), &(1..=12).map(|x| x as f64).collect::<Vec<_>>()[..]);
        assert_eq!(split_concat(&v, 2, 2, 8).unwrap(), maps);
        let ucsd = FrameWindow::new(vec![DensityMap::<f32>::zeros(19, 29, 8); 5], 2).unwrap();
        assert_eq!(reshape_concat(&ucsd).len(), 2_755);
    }

    #[test]
    fn zero_layer_is_pure_residual() {
        let layer = TanModel::<f64>::zeros(2, 1, 4).blocks[0].layers[0].clone();
        let v = crate::optim::gaussian_init::<f64>(&[17, 4], 1.0, 3).unwrap();
        assert_eq!(dilated_residual_layer(&v, &layer, 3).unwrap(), v);
    }

    #[test]
    fn zero_projection_gives_zero_output() {
        let mut m = TanModel::<f64>::gaussian(2, 1, 4, 0.5, 1).unwrap();
        m.blocks[0].out_w = Tensor::zeros(&[1, 4, 1]);
        let v = crate::optim::gaussian_init::<f64>(&[30, 1], 1.0, 2).unwrap();
        let y = dilated_residual_block(&v, &m.blocks[0]).unwrap();
        assert!(y.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fusion_weight_cases() {
        let v = Tensor::<f64>::from_f64(&[10, 1], &[1., 0., 2., 0., 3., 0., 0., 2., -1., 1.]).unwrap();
        let w = fusion_weights(&v, 2, 2).unwrap();
        for (a, e) in w.iter().zip([0.1, 0.2, 0.3, 0.2, 0.2]) {
            assert!((a - e).abs() < 1e-15);
        }
        let eq = Tensor::<f64>::full(&[10, 1], -0.3);
        assert!(fusion_weights(&eq, 2, 2).unwrap().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let z = Tensor::<f64>::zeros(&[10, 1]);
        assert_eq!(fusion_weights(&z, 2, 2).unwrap(), vec![0.2; 5]);
        assert!(fusion_weights(&z, 2, 3).is_err());
    }

    #[test]
    fn fuse_selects_and_averages() {
        let maps: Vec<_> = (0..5).map(|i| map(1, 2, &[i as f64, 2.0 * i as f64])).collect();
        let w = FrameWindow::new(maps, 2).unwrap();
        let f = fuse_density(&[0., 0., 1., 0., 0.], &w).unwrap();
        assert_eq!(f, w.maps[2]);
        let same = FrameWindow::new(vec![map(1, 2, &[0.3, 0.7]); 5], 2).unwrap();
        let f = fuse_density(&[0.1, 0.3, 0.2, 0.25, 0.15], &same).unwrap();
        for (a, b) in f.grid.data().iter().zip(same.maps[0].grid.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn block_loss_terms() {
        let a = map(1, 2, &[1.0, 2.0]);
        assert_eq!(block_loss(&[a.clone()], &[a.clone()], 0.15).unwrap().total, 0.0);
        let b = map(1, 2, &[2.0, 3.0]);
        let l = block_loss(&[b], &[a.clone()], 0.0).unwrap();
        assert_eq!(l.mse, 4.0);
        assert_eq!(l.total, 4.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(3.0), 2.5);
        assert_eq!(smooth_l1(-3.0), 2.5);
        let c = map(1, 2, &[1.5, 5.0]);
        let l = block_loss(&[c], &[a], 1.0).unwrap();
        assert!((l.smooth_l1 - (0.125 + 2.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_model_averages_maps() {
        let tan = TanModel::<f64>::zeros(2, 3, 4);
        let maps: Vec<_> = (0..5).map(|i| map(2, 2, &[i as f64, 1.0, 0.5, 2.0 * i as f64])).collect();
        let w = FrameWindow::new(maps.clone(), 2).unwrap();
        let out = tan_forward_maps(&w, &tan).unwrap();
        assert_eq!(out.weights, vec![0.2; 5]);
        let mean: f64 = maps.iter().map(|m| m.count()).sum::<f64>() / 5.0;
        assert!((out.count - mean).abs() < 1e-12);
        assert_eq!(out.block_weights.len(), 3);
    }

    #[test]
    fn graph_matches_direct_forward() {
        let tan = TanModel::<f64>::gaussian(2, 2, 3, 0.4, 5).unwrap();
        let maps: Vec<_> = (0..5)
            .map(|i| DensityMap::new(crate::optim::gaussian_init(&[3, 4], 1.0, i).unwrap(), 8).unwrap())
            .collect();
        let w = FrameWindow::new(maps.clone(), 2).unwrap();
        let direct = tan_forward_maps(&w, &tan).unwrap();
        let mut g = Graph::new();
        let vars = tan.register(&mut g);
        let mv: Vec<_> = maps.iter().map(|m| g.constant(m.grid.clone())).collect();
        let outs = tan.forward_graph(&mut g, &vars, &mv).unwrap();
        let last = outs.last().unwrap();
        for (a, b) in g.value(last.weights).data().iter().zip(&direct.weights) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((g.value(last.fused).sum() - direct.count).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_return_initial_model() {
        let cfg = TanConfig { iterations: 0, hidden: 4, ..TanConfig::default() };
        let out = tan_train(&[], &cfg, None, |_| {}).unwrap();
        assert_eq!(out.model, TanModel::from_config(&cfg).unwrap());
    }

    fn joint_fixture() -> (Vec<JointSample>, LcnModel<f32>) {
        let lcn = LcnModel::<f32>::with_init(3, &crate::optim::WeightInit::He, 3).unwrap();
        let frames: Vec<_> = (0..5).map(|i| std::sync::Arc::new(crate::optim::gaussian_init::<f32>(&[16, 24, 3], 1.0, 40 + i).unwrap())).collect();
        let gt = DensityMap::new(Tensor::full(&[2, 3], 0.4f32), 8).unwrap();
        (vec![JointSample { frames, gt, roi: None }], lcn)
    }

    #[test]
    fn joint_training_with_frozen_counter_matches_tan_training() {
        let (samples, lcn) = joint_fixture();
        let cfg = TanConfig { iterations: 5, init_std: 0.1, ..Default::default() };
        let start = JointModel { lcn: lcn.clone(), tan: TanModel::from_config(&cfg).unwrap() };
        let joint = joint_train(&samples, &cfg, 0.0, start, None, |_| {}).unwrap();
        assert_eq!(joint.model.lcn, lcn);
        let maps = samples[0].frames.iter().map(|f| lcn.forward(f).unwrap()).collect();
        let tan_samples = vec![TanSample { window: FrameWindow::new(maps, 2).unwrap(), gt: samples[0].gt.clone() }];
        let alone = tan_train(&tan_samples, &cfg, None, |_| {}).unwrap();
        for (a, b) in joint.losses.iter().zip(&alone.losses) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-6), "{a} vs {b}");
        }
        for ((_, a), (_, b)) in joint.model.tan.tensors().iter().zip(alone.model.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn joint_training_moves_both_networks() {
        let (samples, lcn) = joint_fixture();
        let cfg = TanConfig { iterations: 30, init_std: 0.1, ..Default::default() };
        let start = JointModel { lcn: lcn.clone(), tan: TanModel::from_config(&cfg).unwrap() };
        let out = joint_train(&samples, &cfg, 1e-3, start.clone(), None, |_| {}).unwrap();
        assert_ne!(out.model.lcn, lcn);
        assert_ne!(out.model.tan, start.tan);
        assert!(out.losses.last().unwrap() < &out.losses[0]);
        assert_eq!(out.optimizer.tensors.len(), 18 + out.model.tan.tensors().len());
        let bad = vec![JointSample { frames: samples[0].frames[..3].to_vec(), ..samples[0].clone() }];
        assert!(joint_train(&bad, &cfg, 1e-3, start, None, |_| {}).is_err());
    }
}
