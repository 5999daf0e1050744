//! Shared helpers for the integration tests: a kink-aware finite-difference
//! gradient checker and the gradient cases it runs over.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tancount_core::graph::{Graph, Var};
use tancount_core::lcn::{lcn_loss_graph, LcnModel, LcnVars};
use tancount_core::optim::{gaussian_init, WeightInit};
use tancount_core::tan::{tan_loss_graph, TanModel, TanVars};
use tancount_core::{Result, Tensor};

pub const FD_STEP: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub params: Vec<Tensor<f64>>,
    pub build: Build,
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub checked: usize,
    /// Entries whose branch pattern changed within `+-h`, evaluated on the
    /// frozen pattern instead.
    pub replayed: usize,
    pub max_rel: f64,
}

fn eval(case: &GradCase, params: &[Tensor<f64>], replay: Option<&tancount_core::graph::KinkPattern>) -> Result<(f64, tancount_core::graph::KinkPattern)> {
    let mut g = match replay {
        Some(p) => Graph::replaying(p),
        None => Graph::new(),
    };
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = (case.build)(&mut g, &vars)?;
    Ok((g.value(loss).data()[0], g.pattern()))
}

/// Compares analytic gradients with central differences on up to
/// `per_tensor` entries of every parameter tensor.
pub fn check(case: &GradCase, per_tensor: usize, seed: u64) -> Result<GradReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.params.iter().map(|p| g.param(p.clone())).collect();
    let loss = (case.build)(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let base = g.pattern();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport { checked: 0, replayed: 0, max_rel: 0.0 };
    for (ti, p) in case.params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ti], p.shape());
        let picks: Vec<usize> =
            if p.len() <= per_tensor { (0..p.len()).collect() } else { (0..per_tensor).map(|_| rng.gen_range(0..p.len())).collect() };
        for i in picks {
            let mut plus = case.params.clone();
            plus[ti].data_mut()[i] += FD_STEP;
            let mut minus = case.params.clone();
            minus[ti].data_mut()[i] -= FD_STEP;
            let (mut fp, pp) = eval(case, &plus, None)?;
            let (mut fm, pm) = eval(case, &minus, None)?;
            if pp != base || pm != base {
                fp = eval(case, &plus, Some(&base))?.0;
                fm = eval(case, &minus, Some(&base))?.0;
                report.replayed += 1;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel = report.max_rel.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn lcn_vars(flat: &[Var]) -> LcnVars {
    LcnVars { layers: flat.chunks_exact(2).map(|c| (c[0], c[1])).collect() }
}

fn rand_t(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    gaussian_init(shape, std, seed).unwrap()
}

/// `sum(out * r)` for a fixed random `r`, so every output entry gets a
/// distinct upstream gradient.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = rand_t(g.value(out).shape(), 1.0, seed);
    let m = g.mul_const(out, r)?;
    Ok(g.sum(m))
}

fn case(name: &str, params: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase { name: name.to_string(), params, build: Box::new(build) }
}

/// One case per primitive op, on 32x32 inputs where the op takes images.
pub fn primitive_cases() -> Vec<GradCase> {
    let mut v = Vec::new();
    for (k, pad) in [(3usize, 1usize), (3, 0), (5, 2), (1, 0)] {
        v.push(case(
            &format!("conv2d k{k} pad{pad}"),
            vec![rand_t(&[32, 32, 3], 1.0, 1), rand_t(&[k, k, 3, 4], 0.3, 2), rand_t(&[4], 0.3, 3)],
            move |g, p| {
                let y = g.conv2d(p[0], p[1], p[2], pad)?;
                probe(g, y, 10)
            },
        ));
    }
    v.push(case("maxpool2", vec![rand_t(&[32, 32, 4], 1.0, 4)], |g, p| {
        let y = g.maxpool2(p[0])?;
        probe(g, y, 11)
    }));
    v.push(case("maxpool2 odd", vec![rand_t(&[31, 33, 2], 1.0, 5)], |g, p| {
        let y = g.maxpool2(p[0])?;
        probe(g, y, 12)
    }));
    v.push(case("relu", vec![rand_t(&[32, 32, 2], 1.0, 6)], |g, p| {
        let y = g.relu(p[0])?;
        probe(g, y, 13)
    }));
    for d in [1usize, 2, 4] {
        v.push(case(
            &format!("dilated conv1d d{d}"),
            vec![rand_t(&[1024, 3], 1.0, 7), rand_t(&[3, 3, 5], 0.3, 8), rand_t(&[5], 0.3, 9)],
            move |g, p| {
                let y = g.conv1d(p[0], p[1], p[2], d)?;
                probe(g, y, 14)
            },
        ));
    }
    v.push(case("add", vec![rand_t(&[32, 32], 1.0, 20), rand_t(&[32, 32], 1.0, 21)], |g, p| {
        let y = g.add(p[0], p[1])?;
        probe(g, y, 15)
    }));
    v.push(case("sub", vec![rand_t(&[32, 32], 1.0, 22), rand_t(&[32, 32], 1.0, 23)], |g, p| {
        let y = g.sub(p[0], p[1])?;
        probe(g, y, 16)
    }));
    v.push(case("mul_const", vec![rand_t(&[32, 32], 1.0, 24)], |g, p| {
        let m = g.mul_const(p[0], rand_t(&[32, 32], 1.0, 25))?;
        let y = g.sum_squares(m);
        Ok(y)
    }));
    v.push(case("scale", vec![rand_t(&[32, 32], 1.0, 26)], |g, p| {
        let y = g.scale(p[0], -1.7);
        probe(g, y, 17)
    }));
    v.push(case("sum", vec![rand_t(&[32, 32], 1.0, 27)], |g, p| {
        let s = g.sum(p[0]);
        Ok(g.sum_squares(s))
    }));
    v.push(case("sum_squares", vec![rand_t(&[32, 32], 1.0, 28)], |g, p| Ok(g.sum_squares(p[0]))));
    v.push(case("smooth_l1_mean", vec![rand_t(&[32, 32], 1.5, 29), rand_t(&[32, 32], 1.5, 30)], |g, p| {
        g.smooth_l1_mean(p[0], p[1])
    }));
    v.push(case("concat", vec![rand_t(&[4, 4], 1.0, 31), rand_t(&[4, 4], 1.0, 32), rand_t(&[4, 4], 1.0, 33)], |g, p| {
        let y = g.concat(p)?;
        probe(g, y, 18)
    }));
    v.push(case("reshape", vec![rand_t(&[32, 32], 1.0, 34)], |g, p| {
        let y = g.reshape(p[0], &[1024, 1])?;
        probe(g, y, 19)
    }));
    v.push(case("segment_weights", vec![rand_t(&[80, 1], 1.0, 35)], |g, p| {
        let w = g.segment_weights(p[0], 5)?;
        probe(g, w, 40)
    }));
    v.push(case(
        "weighted_sum",
        vec![Tensor::from_f64(&[3], &[0.2, 0.5, 0.3]).unwrap(), rand_t(&[4, 4], 1.0, 36), rand_t(&[4, 4], 1.0, 37), rand_t(&[4, 4], 1.0, 38)],
        |g, p| {
            let y = g.weighted_sum(p[0], &p[1..])?;
            probe(g, y, 41)
        },
    ));
    v
}

/// Counting-network loss on a 32x32 frame against a random 4x4 target.
pub fn lcn_case() -> GradCase {
    let model = LcnModel::<f64>::with_init(3, &WeightInit::He, 5).unwrap();
    let mut params: Vec<Tensor<f64>> = model.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    // Nonzero biases so every bias gradient path is exercised.
    for (i, p) in params.iter_mut().enumerate().filter(|(i, _)| i % 2 == 1) {
        *p = rand_t(p.shape(), 0.05, 100 + i as u64);
    }
    let frame = rand_t(&[32, 32, 3], 1.0, 6).map(|v| v.abs());
    let gt = rand_t(&[4, 4], 0.5, 7).map(|v| v.abs());
    case("lcn loss end-to-end", params, move |g, p| {
        let x = g.constant(frame.clone());
        let y = model.forward_graph(g, &lcn_vars(p), x)?;
        lcn_loss_graph(g, &[y], &[gt.clone()], &[None])
    })
}

/// Temporal-network training loss over one window of five 4x4 maps from
/// 32x32 frames. With `joint`, the counting-network parameters are included.
pub fn tan_case(blocks: usize, hidden: usize, joint: bool) -> GradCase {
    let lcn = LcnModel::<f64>::with_init(3, &WeightInit::He, 11).unwrap();
    let mut tan = TanModel::<f64>::gaussian(2, blocks, hidden, 0.3, 12).unwrap();
    for (i, t) in tan.tensors_mut().into_iter().enumerate() {
        if t.rank() == 1 {
            *t = rand_t(t.shape(), 0.1, 200 + i as u64);
        }
    }
    let frames: Vec<Tensor<f64>> = (0..5).map(|i| rand_t(&[32, 32, 3], 1.0, 50 + i).map(|v| v.abs())).collect();
    let gt = rand_t(&[4, 4], 0.3, 60).map(|v| v.abs());
    let lcn_params: Vec<Tensor<f64>> = lcn.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let n_lcn = lcn_params.len();
    let mut params: Vec<Tensor<f64>> = tan.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    if joint {
        params.extend(lcn_params.iter().cloned());
    }
    let name = format!("tan loss S={blocks} H={hidden}{}", if joint { " joint" } else { "" });
    case(&name, params, move |g, p| {
        let n_tan = p.len() - if joint { n_lcn } else { 0 };
        let tv = TanVars { params: p[..n_tan].to_vec(), blocks: tan.blocks.len() };
        let lcn_vars_flat: Vec<Var> = if joint { p[n_tan..].to_vec() } else { lcn_params.iter().map(|q| g.constant(q.clone())).collect() };
        let lv = lcn_vars(&lcn_vars_flat);
        let mut maps = Vec::new();
        for f in &frames {
            let x = g.constant(f.clone());
            maps.push(lcn.forward_graph(g, &lv, x)?);
        }
        let outs = tan.forward_graph(g, &tv, &maps)?;
        tan_loss_graph(g, &[(outs, gt.clone())], 0.15)
    })
}
