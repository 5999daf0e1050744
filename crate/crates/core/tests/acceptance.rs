//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=5,6` restricts the run to the listed criteria.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tancount_core::dataio::{
    apply_split, lcn_samples, synth_video, tan_samples, Dataset, Frame, FrameSource, Sequence, SplitSpec, SynthSpec,
};
use tancount_core::density::{downsample_gt, render_with_mode};
use tancount_core::eval::{count_params, evaluate, mae, mse, Predictor};
use tancount_core::lcn::{lcn_train, LcnTrainConfig};
use tancount_core::optim::{gaussian_init, WeightInit};
use tancount_core::stream::fps_bench;
use tancount_core::tan::{
    dilated_residual_block, dilated_residual_layer, tan_forward_maps, tan_train, FrameWindow, TanConfig, TanModel,
};
use tancount_core::{DensityMap, HeadAnnotations, LcnModel, SigmaMode, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_parameter_counts() -> Outcome {
    let lcn = LcnModel::<f32>::zeros(3);
    let tan = TanModel::<f32>::from_config(&TanConfig::default()).map_err(|e| e.to_string())?;
    let r = count_params(&lcn, Some(&tan));
    let off = (r.combined as f64 - 47_000.0).abs() / 47_000.0;
    ensure(
        r.lcn == 32_641 && r.tan == 14_943 && r.combined == 47_584 && off < 0.05,
        format!("lcn {} tan {} combined {} ({:.2}% from 0.047e6)", r.lcn, r.tan, r.combined, 100.0 * off),
    )
}

fn c2_gradient_fidelity() -> Outcome {
    let mut cases = common::primitive_cases();
    cases.push(common::lcn_case());
    cases.push(common::tan_case(1, 20, false));
    cases.push(common::tan_case(3, 20, false));
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for c in &cases {
        let r = common::check(c, 16, 2024).map_err(|e| format!("{}: {e}", c.name))?;
        checked += r.checked;
        if r.max_rel >= worst.0 {
            worst = (r.max_rel, c.name.clone());
        }
    }
    ensure(
        worst.0 < 1e-4,
        format!("{} cases, {checked} entries, max rel err {:.2e} ({})", cases.len(), worst.0, worst.1),
    )
}

fn c3_count_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (256usize, 192usize);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let n = rng.gen_range(1..80);
        // Interior: at least four spreads of the widest kernel from every border.
        let margin = 60.0;
        let pts: Vec<[f64; 2]> =
            (0..n).map(|_| [rng.gen_range(margin..w as f64 - margin), rng.gen_range(margin..h as f64 - margin)]).collect();
        let ann = HeadAnnotations::new(pts, w, h).map_err(|e| e.to_string())?;
        for mode in [SigmaMode::Fixed { sigma: 15.0 }, SigmaMode::Adaptive { beta: 0.3, knn: 3, fallback: 15.0 }] {
            let map = render_with_mode::<f64>(&ann, &mode).map_err(|e| e.to_string())?;
            let pooled = downsample_gt(&map, 8).map_err(|e| e.to_string())?;
            for c in [map.count(), pooled.count()] {
                let rel = (c - n as f64).abs() / n as f64;
                worst = worst.max(rel);
                if rel >= 1e-3 {
                    return Err(format!("trial {trial}, {mode:?}: integral {c} for {n} heads"));
                }
            }
        }
    }
    Ok(format!("100 sets x 2 modes, max |integral - n| / n = {worst:.2e}"))
}

/// Width of the support of `block(e_c) - block(0)` in the given prefix.
fn impulse_span(f: &dyn Fn(&Tensor<f64>) -> Tensor<f64>, len: usize) -> usize {
    let base = f(&Tensor::zeros(&[len, 1]));
    let mut x = Tensor::<f64>::zeros(&[len, 1]);
    x.data_mut()[len / 2] = 1.0;
    let y = f(&x);
    let rows = y.shape()[0];
    let ch = y.shape()[1];
    let hit: Vec<usize> = (0..rows)
        .filter(|&r| (0..ch).any(|c| (y.data()[r * ch + c] - base.data()[r * ch + c]).abs() > 1e-12))
        .collect();
    match (hit.first(), hit.last()) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    }
}

fn c4_receptive_field() -> Outcome {
    let mut tan = TanModel::<f64>::gaussian(2, 1, 6, 0.5, 4).map_err(|e| e.to_string())?;
    // Positive kernels keep every ReLU open, so the span is the structural one.
    for t in tan.tensors_mut() {
        *t = t.map(|v| v.abs() + 0.01);
    }
    let block = tan.blocks[0].clone();
    let len = 101;
    let mut spans = Vec::new();
    for upto in 1..=3 {
        let b = block.clone();
        let f = move |v: &Tensor<f64>| {
            let mut h = tancount_core::ops::dilated_conv1d(v, &b.in_w, &b.in_b, 1).unwrap();
            for i in 1..=upto {
                h = dilated_residual_layer(&h, &b.layers[i - 1], i).unwrap();
            }
            h
        };
        spans.push(impulse_span(&f, len));
    }
    let b = block.clone();
    let full = impulse_span(&move |v: &Tensor<f64>| dilated_residual_block(v, &b).unwrap(), len);
    let law: Vec<usize> = (1..=3).map(|i| (1usize << (i + 1)) - 1).collect();
    ensure(spans == law && full == 15, format!("per-layer spans {spans:?} (law {law:?}), block span {full}"))
}

fn overfit_frames() -> Vec<tancount_core::lcn::TrainSample> {
    let mode = SigmaMode::Fixed { sigma: 4.0 };
    (0..8)
        .flat_map(|i| {
            let ds = synth_video(&SynthSpec {
                walkers: 4 + 3 * i,
                frames: 1,
                width: 128,
                height: 128,
                seed: 100 + i as u64,
                ..Default::default()
            });
            lcn_samples(&ds.sequences[0], &mode).unwrap()
        })
        .collect()
}

fn c5_overfit() -> Outcome {
    let samples = overfit_frames();
    let cfg = LcnTrainConfig { lr: 1e-4, iterations: 2_000, seed: 7, init: WeightInit::He, ..Default::default() };
    let t = Instant::now();
    let model = lcn_train(&samples, &cfg, None, |_| {}).map_err(|e| e.to_string())?.model;
    let secs = t.elapsed().as_secs_f64();
    let preds: Vec<f64> = samples.iter().map(|s| model.forward(&s.image).unwrap().count()).collect();
    let gts: Vec<f64> = samples.iter().map(|s| s.gt.count()).collect();
    let m = mae(&preds, &gts).map_err(|e| e.to_string())?;
    let mean = gts.iter().sum::<f64>() / gts.len() as f64;
    ensure(m < 0.1 * mean, format!("train MAE {m:.3} vs mean count {mean:.2} ({:.1}%), {secs:.0}s", 100.0 * m / mean))
}

fn noisy_videos(seed: u64, base: u64, frames: usize, corrupt: bool) -> Vec<Dataset> {
    (0..4)
        .map(|i| {
            synth_video(&SynthSpec {
                walkers: 4 + 4 * i,
                frames,
                width: 96,
                height: 96,
                speed: 1.5,
                seed: seed * 1000 + base + i as u64,
                noise: 0.02,
                flicker: 0.05,
                corrupt_prob: if corrupt { 0.15 } else { 0.0 },
                corrupt_noise: 0.2,
                ..Default::default()
            })
        })
        .collect()
}

/// Returns (single-frame MAE, uniform-average MAE, fused MAE) on held-out video.
fn temporal_trial(seed: u64) -> Result<[f64; 3], String> {
    let mode = SigmaMode::Fixed { sigma: 4.0 };
    let err = |e: tancount_core::Error| e.to_string();
    let clean = noisy_videos(seed, 0, 30, false);
    let mut samples = Vec::new();
    for d in &clean {
        samples.extend(lcn_samples(&d.sequences[0], &mode).map_err(err)?);
    }
    let cfg = LcnTrainConfig { lr: 1e-4, iterations: 2_000, seed, init: WeightInit::He, ..Default::default() };
    let lcn = lcn_train(&samples, &cfg, None, |_| {}).map_err(err)?.model;

    let mut windows = Vec::new();
    for d in &noisy_videos(seed, 200, 30, true) {
        windows.extend(tan_samples(&d.sequences[0], &lcn, 2, &mode).map_err(err)?);
    }
    let tcfg = TanConfig { seed, ..Default::default() };
    let tan = tan_train(&windows, &tcfg, None, |_| {}).map_err(err)?.model;

    let test = noisy_videos(seed, 500, 40, true);
    let mut out = [0.0; 3];
    for d in &test {
        let preds = [
            Predictor::SingleFrame(&lcn),
            Predictor::UniformAverage { lcn: &lcn, k: 2 },
            Predictor::Temporal { lcn: &lcn, tan: &tan },
        ];
        for (o, p) in out.iter_mut().zip(&preds) {
            *o += evaluate(d, p, "", "").map_err(err)?.mae / test.len() as f64;
        }
    }
    Ok(out)
}

fn c6_temporal_benefit() -> Outcome {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3 {
        let [single, avg, fused] = temporal_trial(seed)?;
        ok &= fused <= single && fused <= avg;
        lines.push(format!("seed {seed}: lcn {single:.3} avg {avg:.3} tan {fused:.3}"));
    }
    ensure(ok, format!("{}; {:.0}s", lines.join("; "), t.elapsed().as_secs_f64()))
}

fn c7_throughput() -> Outcome {
    let lcn = LcnModel::<f32>::with_init(3, &WeightInit::He, 1).map_err(|e| e.to_string())?;
    let tan = TanModel::<f32>::from_config(&TanConfig::default()).map_err(|e| e.to_string())?;
    let cores = rayon::current_num_threads();
    let r = fps_bench(&lcn, Some(&tan), [320, 240], 200, 10, cores).map_err(|e| e.to_string())?;
    let target = if cores >= 4 && r.fps >= 25.0 { "25 FPS target met" } else if cores >= 4 { "25 FPS target missed" } else { "25 FPS target needs >= 4 cores" };
    ensure(
        r.fps >= 10.0,
        format!("{:.1} FPS over {} frames at 320x240 f32 on {} core(s); floor 10; {target}", r.fps, r.frames, r.cores),
    )
}

fn c8_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let preds: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..500.0)).collect();
    let gts: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..500.0)).collect();
    let (mut abs, mut sq) = (0.0, 0.0);
    for i in 0..preds.len() {
        let d = preds[i] - gts[i];
        abs += if d < 0.0 { -d } else { d };
        sq += d * d;
    }
    let (bm, bs) = (abs / 1000.0, (sq / 1000.0).sqrt());
    let (m, s) = (mae(&preds, &gts).unwrap(), mse(&preds, &gts).unwrap());
    let mut ordered = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        ordered += usize::from(mae(&p, &g).unwrap() <= mse(&p, &g).unwrap());
    }
    ensure(
        (m - bm).abs() < 1e-12 && (s - bs).abs() < 1e-12 && ordered == 1000,
        format!("|dMAE| {:.1e}, |dMSE| {:.1e}, MAE <= MSE in {ordered}/1000 trials", (m - bm).abs(), (s - bs).abs()),
    )
}

fn c9_fusion_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut outputs = 0;
    for model_seed in 0..100u64 {
        let tan = TanModel::<f64>::gaussian(2, 3, 4, rng.gen_range(0.05..1.0), model_seed).map_err(|e| e.to_string())?;
        for _ in 0..100 {
            let maps: Vec<DensityMap<f64>> = (0..5)
                .map(|_| {
                    let gain = rng.gen_range(0.0..2.0);
                    let t = gaussian_init::<f64>(&[3, 4], 1.0, rng.gen()).unwrap().map(|v| v.abs() * gain);
                    DensityMap::new(t, 8).unwrap()
                })
                .collect();
            let counts: Vec<f64> = maps.iter().map(|m| m.count()).collect();
            let out = tan_forward_maps(&FrameWindow::new(maps, 2).unwrap(), &tan).map_err(|e| e.to_string())?;
            for w in &out.block_weights {
                if w.iter().any(|&x| x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(format!("bad weights {w:?}"));
                }
            }
            let lo = counts.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = counts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if out.count < lo - 1e-9 || out.count > hi + 1e-9 {
                return Err(format!("fused count {} outside [{lo}, {hi}]", out.count));
            }
            outputs += 1;
        }
    }
    let zero = TanModel::<f64>::zeros(2, 3, 20);
    let maps = vec![DensityMap::<f64>::zeros(3, 4, 8); 5];
    let w = tan_forward_maps(&FrameWindow::new(maps, 2).unwrap(), &zero).map_err(|e| e.to_string())?.weights;
    ensure(w.iter().all(|&x| (x - 0.2).abs() < 1e-15), format!("{outputs} outputs checked; zero-output fallback {w:?}"))
}

fn c10_split_fidelity() -> Outcome {
    let pixel = std::sync::Arc::new(Tensor::<f32>::zeros(&[8, 8, 3]));
    let frames: Vec<Frame> = (0..2000)
        .map(|i| Frame {
            name: format!("{i:06}.png"),
            annotations: HeadAnnotations::new(vec![], 8, 8).unwrap(),
            source: FrameSource::Memory(pixel.clone()),
        })
        .collect();
    let ds = Dataset { name: "s".into(), sequences: vec![Sequence { name: "seq".into(), width: 8, height: 8, fps: None, frames, roi: None }] };
    let mut parts = Vec::new();
    for (name, spec, first_train) in [("MALL_PAPER", SplitSpec::mall_paper(), "000000.png"), ("UCSD_PAPER", SplitSpec::ucsd_paper(), "000600.png")] {
        let (train, test) = apply_split(&ds, &spec).map_err(|e| e.to_string())?;
        let (a, b) = (train.frame_count(), test.frame_count());
        if a != 800 || b != 1200 || train.sequences[0].frames[0].name != first_train {
            return Err(format!("{name}: {a}/{b}, first train frame {}", train.sequences[0].frames[0].name));
        }
        parts.push(format!("{name} {a}/{b}"));
    }
    Ok(parts.join(", "))
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "parameter counts", c1_parameter_counts),
        (2, "gradient fidelity", c2_gradient_fidelity),
        (3, "count conservation", c3_count_conservation),
        (4, "receptive-field law", c4_receptive_field),
        (5, "overfit sanity", c5_overfit),
        (6, "temporal benefit", c6_temporal_benefit),
        (7, "throughput", c7_throughput),
        (8, "metric oracle", c8_metric_oracle),
        (9, "fusion invariants", c9_fusion_invariants),
        (10, "split fidelity", c10_split_fidelity),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:>2} {name:<20} PASS  {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} {name:<20} FAIL  {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
