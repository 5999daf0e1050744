use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Frame, FrameSource, Sequence};
use crate::density::HeadAnnotations;
use crate::tensor::Tensor;

/// Parameters of a synthetic crowd video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub walkers: usize,
    /// Pixels per frame.
    pub speed: f64,
    /// Std of additive per-pixel Gaussian noise, redrawn every frame.
    pub noise: f64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Std of a walker's Gaussian blob in pixels.
    pub blob_sigma: f64,
    /// Std of a per-frame global gain, `gain ~ N(1, flicker)`.
    pub flicker: f64,
    /// Probability that a frame is heavily corrupted.
    pub corrupt_prob: f64,
    /// Std of the extra pixel noise on corrupted frames.
    pub corrupt_noise: f64,
    /// Distance walkers keep from the image border.
    pub margin: f64,
    pub fps: f64,
    pub name: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            walkers: 10,
            speed: 1.0,
            noise: 0.0,
            frames: 50,
            width: 128,
            height: 128,
            seed: 0,
            blob_sigma: 3.0,
            flicker: 0.0,
            corrupt_prob: 0.0,
            corrupt_noise: 0.3,
            margin: 4.0,
            fps: 25.0,
            name: "synth".into(),
        }
    }
}

struct Walker {
    pos: [f64; 2],
    vel: [f64; 2],
    color: [f32; 3],
}

fn bounce(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        *p = (lo + hi) / 2.0;
        *v = 0.0;
        return;
    }
    *p += *v;
    // Reflect until inside; a large step may cross the box more than once.
    while *p < lo || *p > hi {
        if *p < lo {
            *p = 2.0 * lo - *p;
        } else {
            *p = 2.0 * hi - *p;
        }
        *v = -*v;
    }
}

fn background(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (w, h) = (spec.width, spec.height);
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.gen_range(0.02..0.12),
                rng.gen_range(0.02..0.12),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.03..0.08),
            ]
        })
        .collect();
    let tint: [f64; 3] = [rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1)];
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.55;
            for &[fx, fy, ph, amp] in &waves {
                v += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
            }
            v += rng.gen_range(-0.02..0.02);
            for t in tint {
                out.push((v * t) as f32);
            }
        }
    }
    out
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders a single-sequence video of Gaussian blobs bouncing inside the
/// frame. Annotations are the exact blob centres, so every frame's count is
/// `walkers`. Pixels are quantised to 8 bits, so writing the dataset to PNG
/// and reading it back is lossless. The same spec always yields the same
/// pixels.
pub fn synth_video(spec: &SynthSpec) -> Dataset {
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg = background(spec, &mut rng);
    let (lo_x, hi_x) = (spec.margin, w as f64 - 1.0 - spec.margin);
    let (lo_y, hi_y) = (spec.margin, h as f64 - 1.0 - spec.margin);
    let clamp_in = |v: f64, lo: f64, hi: f64| if hi <= lo { ((lo + hi) / 2.0).max(0.0) } else { v };
    let mut walkers: Vec<Walker> = (0..spec.walkers)
        .map(|_| {
            let x = clamp_in(rng.gen_range(lo_x..hi_x.max(lo_x + 1e-9)), lo_x, hi_x);
            let y = clamp_in(rng.gen_range(lo_y..hi_y.max(lo_y + 1e-9)), lo_y, hi_y);
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let shade = rng.gen_range(0.05..0.25);
            Walker {
                pos: [x, y],
                vel: [spec.speed * a.cos(), spec.speed * a.sin()],
                color: [shade, shade * rng.gen_range(0.6..1.4), shade * rng.gen_range(0.6..1.4)],
            }
        })
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let s = spec.blob_sigma.max(0.1);
    let reach = (3.0 * s).ceil() as isize;
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            for wk in &mut walkers {
                bounce(&mut wk.pos[0], &mut wk.vel[0], lo_x, hi_x);
                bounce(&mut wk.pos[1], &mut wk.vel[1], lo_y, hi_y);
            }
        }
        let mut px = bg.clone();
        for wk in &walkers {
            let (cx, cy) = (wk.pos[0], wk.pos[1]);
            let (ix, iy) = (cx.round() as isize, cy.round() as isize);
            for y in (iy - reach).max(0)..(iy + reach + 1).min(h as isize) {
                for x in (ix - reach).max(0)..(ix + reach + 1).min(w as isize) {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let g = (-d2 / (2.0 * s * s)).exp() as f32;
                    let base = (y as usize * w + x as usize) * 3;
                    for c in 0..3 {
                        // Blend toward the walker's colour.
                        px[base + c] += g * (wk.color[c] - px[base + c]);
                    }
                }
            }
        }
        let mut frng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(t as u64 + 1)));
        let gain = 1.0 + spec.flicker * unit.sample(&mut frng);
        let corrupt = spec.corrupt_prob > 0.0 && frng.gen_bool(spec.corrupt_prob.min(1.0));
        let sd = if corrupt { (spec.noise.powi(2) + spec.corrupt_noise.powi(2)).sqrt() } else { spec.noise };
        for v in &mut px {
            let mut x = *v as f64 * gain;
            if sd > 0.0 {
                x += sd * unit.sample(&mut frng);
            }
            *v = quantize(x as f32);
        }
        let points = walkers.iter().map(|wk| wk.pos).collect();
        frames.push(Frame {
            name: format!("{t:06}.png"),
            annotations: HeadAnnotations { points, width: w, height: h },
            source: FrameSource::Memory(Arc::new(Tensor::from_vec(&[h, w, 3], px).expect("frame extents"))),
        });
    }
    Dataset {
        name: spec.name.clone(),
        sequences: vec![Sequence { name: "seq0".into(), width: w, height: h, fps: Some(spec.fps), frames, roi: None }],
    }
}
