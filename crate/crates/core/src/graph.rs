//! Tape-based reverse-mode differentiation over the primitive op set.
//!
//! A [`Graph`] records every op applied to its variables during the forward
//! pass; [`Graph::backward`] then walks the tape in reverse. Piecewise ops
//! (ReLU, max pooling, absolute value, the Smooth-L1 branch) record which
//! branch each element took as a [`KinkPattern`]. A graph built with
//! [`Graph::replaying`] reuses a recorded pattern instead of re-deciding the
//! branches, which evaluates the same smooth piece at nearby parameters.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Branch decisions taken by the piecewise ops of one forward pass, in
/// recording order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KinkPattern(Vec<Kink>);

#[derive(Debug, Clone, PartialEq)]
enum Kink {
    Relu(Vec<bool>),
    MaxPool(Vec<u32>),
    Sign(Vec<i8>),
    SmoothL1(Vec<bool>),
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Relu { x: Var, mask: Vec<bool> },
    Conv1d { x: Var, w: Var, b: Var, dilation: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    MulConst { x: Var, factor: Tensor<T> },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    SumSquares { x: Var },
    SmoothL1Mean { a: Var, b: Var, quadratic: Vec<bool> },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    SegmentWeights { x: Var, segments: usize, signs: Vec<i8>, norms: Vec<f64>, total: f64 },
    WeightedSum { weights: Var, maps: Vec<Var> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape for one forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    recorded: Vec<Kink>,
    replay: Option<(Vec<Kink>, usize)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), recorded: Vec::new(), replay: None }
    }

    /// A graph whose piecewise ops follow `pattern` instead of their inputs.
    pub fn replaying(pattern: &KinkPattern) -> Self {
        Graph { nodes: Vec::new(), recorded: Vec::new(), replay: Some((pattern.0.clone(), 0)) }
    }

    /// Branch decisions recorded so far.
    pub fn pattern(&self) -> KinkPattern {
        KinkPattern(self.recorded.clone())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Graph(format!("variable {} has no forward record on this graph", v.0)))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn next_replay(&mut self) -> Result<Option<Kink>> {
        match &mut self.replay {
            None => Ok(None),
            Some((kinks, pos)) => {
                let k = kinks
                    .get(*pos)
                    .cloned()
                    .ok_or_else(|| Error::Graph("replay pattern is shorter than the forward pass".into()))?;
                *pos += 1;
                Ok(Some(k))
            }
        }
    }

    /// A constant input; no gradient is propagated to it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), pad)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(y, Op::Conv2d { x, w, b, pad }, ng))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let y = ops::dilated_conv1d(self.value(x), self.value(w), self.value(b), dilation)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(y, Op::Conv1d { x, w, b, dilation }, ng))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = match self.next_replay()? {
            None => ops::maxpool2(self.value(x))?,
            Some(Kink::MaxPool(arg)) => {
                let (shape, _) = ops::maxpool2(self.value(x))?;
                let src = self.value(x).data();
                let data = arg.iter().map(|&i| src[i as usize]).collect();
                (Tensor::from_vec(shape.shape(), data)?, arg)
            }
            Some(_) => return Err(Error::Graph("replay pattern diverged at maxpool2".into())),
        };
        self.recorded.push(Kink::MaxPool(argmax.clone()));
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::MaxPool2 { x, argmax }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mask: Vec<bool> = match self.next_replay()? {
            None => self.value(x).data().iter().map(|&v| v > T::zero()).collect(),
            Some(Kink::Relu(m)) if m.len() == self.value(x).len() => m,
            Some(_) => return Err(Error::Graph("replay pattern diverged at relu".into())),
        };
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &on)| if on { v } else { T::zero() }).collect();
        let y = Tensor::from_vec(src.shape(), data)?;
        self.recorded.push(Kink::Relu(mask.clone()));
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::Relu { x, mask }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::from_vec(va.shape(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let y = Tensor::from_vec(va.shape(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::Sub { a, b }, ng))
    }

    /// Elementwise product with a constant tensor (e.g. a region mask).
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != factor.len() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", vx.shape(), factor.shape())));
        }
        let data = vx.data().iter().zip(factor.data()).map(|(&a, &b)| a * b).collect();
        let y = Tensor::from_vec(vx.shape(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::MulConst { x, factor }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        let ng = self.needs(&[x]);
        self.push(y, Op::Scale { x, factor }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(T::of(self.value(x).sum()));
        let ng = self.needs(&[x]);
        self.push(y, Op::Sum { x }, ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(T::of(s)), Op::SumSquares { x }, ng)
    }

    /// Mean over elements of the Smooth-L1 penalty of `a - b`:
    /// `0.5 r^2` where `|r| < 1`, `|r| - 0.5` elsewhere.
    pub fn smooth_l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() || va.is_empty() {
            return Err(Error::shape("smooth_l1", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let residuals: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).as_f64()).collect();
        let quadratic = match self.next_replay()? {
            None => residuals.iter().map(|r| r.abs() < 1.0).collect(),
            Some(Kink::SmoothL1(q)) if q.len() == residuals.len() => q,
            Some(_) => return Err(Error::Graph("replay pattern diverged at smooth_l1".into())),
        };
        let total: f64 = residuals
            .iter()
            .zip(&quadratic)
            .map(|(&r, &q)| if q { 0.5 * r * r } else { r.abs() - 0.5 })
            .sum();
        let y = Tensor::scalar(T::of(total / residuals.len() as f64));
        self.recorded.push(Kink::SmoothL1(quadratic.clone()));
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::SmoothL1Mean { a, b, quadratic }, ng))
    }

    /// Flattens each part row-major and stacks them into an `L x 1` column.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero parts"));
        }
        let mut data = Vec::new();
        for &p in parts {
            self.node(p)?;
            data.extend_from_slice(self.value(p).data());
        }
        let l = data.len();
        let y = Tensor::from_vec(&[l, 1], data)?;
        let ng = self.needs(parts);
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::Reshape { x }, ng))
    }

    /// L1 norm of each of `segments` equal slices of `x`, normalized to sum
    /// to one. An all-zero input yields uniform weights with zero gradient.
    pub fn segment_weights(&mut self, x: Var, segments: usize) -> Result<Var> {
        let len = self.value(x).len();
        if segments == 0 || len % segments != 0 || len == 0 {
            return Err(Error::shape(
                "segment_weights",
                format!("length {len} is not divisible into {segments} segments"),
            ));
        }
        let signs: Vec<i8> = match self.next_replay()? {
            None => self.value(x).data().iter().map(|&v| sign_of(v)).collect(),
            Some(Kink::Sign(s)) if s.len() == len => s,
            Some(_) => return Err(Error::Graph("replay pattern diverged at segment_weights".into())),
        };
        let vx = self.value(x);
        let seg = vx.len() / segments;
        let norms: Vec<f64> = vx
            .data()
            .chunks_exact(seg)
            .zip(signs.chunks_exact(seg))
            .map(|(vals, sg)| vals.iter().zip(sg).map(|(&v, &s)| s as f64 * v.as_f64()).sum())
            .collect();
        let total: f64 = norms.iter().sum();
        let weights: Vec<T> = if total > 0.0 {
            norms.iter().map(|n| T::of(n / total)).collect()
        } else {
            vec![T::of(1.0 / segments as f64); segments]
        };
        self.recorded.push(Kink::Sign(signs.clone()));
        let y = Tensor::from_vec(&[segments], weights)?;
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::SegmentWeights { x, segments, signs, norms, total }, ng))
    }

    /// `sum_j weights[j] * maps[j]` over same-shaped maps.
    pub fn weighted_sum(&mut self, weights: Var, maps: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        if w.len() != maps.len() || maps.is_empty() {
            return Err(Error::shape("weighted_sum", format!("{} weights for {} maps", w.len(), maps.len())));
        }
        let shape = self.value(maps[0]).shape().to_vec();
        let mut acc = vec![T::zero(); self.value(maps[0]).len()];
        for (j, &m) in maps.iter().enumerate() {
            let vm = self.value(m);
            if vm.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", format!("{:?} vs {:?}", vm.shape(), shape)));
            }
            let wj = self.value(weights).data()[j];
            for (a, &v) in acc.iter_mut().zip(vm.data()) {
                *a += wj * v;
            }
        }
        let y = Tensor::from_vec(&shape, acc)?;
        let mut deps = maps.to_vec();
        deps.push(weights);
        let ng = self.needs(&deps);
        Ok(self.push(y, Op::WeightedSum { weights, maps: maps.to_vec() }, ng))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every
    /// variable that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(Error::Graph(format!("backward needs a scalar output, got shape {:?}", node.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let need_x = self.nodes[x.0].needs_grad;
                let r = ops::conv2d_backward(self.value(*x), self.value(*w), self.value(*b), *pad, g, need_x)?;
                if let Some(gx) = r.input {
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *w, r.weights);
                self.accumulate(grads, *b, r.bias);
            }
            Op::Conv1d { x, w, b, dilation } => {
                let r = ops::dilated_conv1d_backward(self.value(*x), self.value(*w), self.value(*b), *dilation, g)?;
                self.accumulate(grads, *x, r.input);
                self.accumulate(grads, *w, r.weights);
                self.accumulate(grads, *b, r.bias);
            }
            Op::MaxPool2 { x, argmax } => {
                let gx = ops::maxpool2_backward(self.value(*x).shape(), argmax, g)?;
                self.accumulate(grads, *x, gx);
            }
            Op::Relu { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&v, &on)| if on { v } else { T::zero() }).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone().reshape(self.value(*a).shape())?);
                self.accumulate(grads, *b, g.map(|v| -v).reshape(self.value(*b).shape())?);
            }
            Op::MulConst { x, factor } => {
                let data = g.data().iter().zip(factor.data()).map(|(&a, &b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data)?);
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.map(|v| v * *factor));
            }
            Op::Sum { x } => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::SumSquares { x } => {
                let s = g.data()[0] + g.data()[0];
                self.accumulate(grads, *x, self.value(*x).map(|v| v * s));
            }
            Op::SmoothL1Mean { a, b, quadratic } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = g.data()[0].as_f64() / va.len() as f64;
                let da: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .zip(quadratic)
                    .map(|((&x, &y), &q)| {
                        let r = (x - y).as_f64();
                        let d = if q { r } else { r.signum() * (r != 0.0) as i32 as f64 };
                        T::of(d * scale)
                    })
                    .collect();
                let da = Tensor::from_vec(va.shape(), da)?;
                let db = da.map(|v| -v).reshape(vb.shape())?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).len();
                    let part = Tensor::from_vec(&shape, g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    self.accumulate(grads, p, part);
                }
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.clone().reshape(self.value(*x).shape())?);
            }
            Op::SegmentWeights { x, segments, signs, norms, total } => {
                if *total > 0.0 {
                    let seg = self.value(*x).len() / segments;
                    // d w_j / d n_i = (delta_ij * Z - n_j) / Z^2
                    let dot: f64 = g.data().iter().zip(norms).map(|(&gw, &n)| gw.as_f64() * n).sum();
                    let dn: Vec<f64> = g.data().iter().map(|&gw| (gw.as_f64() - dot / total) / total).collect();
                    let data = signs
                        .iter()
                        .enumerate()
                        .map(|(p, &s)| T::of(s as f64 * dn[p / seg]))
                        .collect();
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), data)?);
                }
            }
            Op::WeightedSum { weights, maps } => {
                let w = self.value(*weights).data().to_vec();
                let mut gw = Vec::with_capacity(maps.len());
                for (j, &m) in maps.iter().enumerate() {
                    let vm = self.value(m);
                    let dot: f64 = vm.data().iter().zip(g.data()).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum();
                    gw.push(T::of(dot));
                    if self.nodes[m.0].needs_grad {
                        self.accumulate(grads, m, g.map(|v| v * w[j]));
                    }
                }
                self.accumulate(grads, *weights, Tensor::from_vec(&[maps.len()], gw)?);
            }
        }
        Ok(())
    }
}

fn sign_of<T: Scalar>(v: T) -> i8 {
    if v > T::zero() {
        1
    } else if v < T::zero() {
        -1
    } else {
        0
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// depend on any parameter or lies after the loss on the tape.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros of the variable's shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
