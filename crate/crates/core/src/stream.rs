//! Streaming inference and throughput measurement.
//!
//! [`StreamingCounter`] keeps the counting-network maps of the most recent
//! frames, so each pushed frame costs one network forward plus one temporal
//! pass. Outputs lag the input by `k` frames because a window needs its
//! future frames; [`StreamingCounter::finish`] flushes the tail by repeating
//! the last map, the same boundary rule as [`crate::dataio::make_window`].

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{apply_roi, apply_roi_image, DensityMap, RoiMask};
use crate::error::{Error, Result};
use crate::lcn::LcnModel;
use crate::tan::{tan_forward_maps, FrameWindow, TanModel};
use crate::tensor::{Precision, Tensor};

/// Count for one frame of a stream.
#[derive(Debug, Clone)]
pub struct FrameCount {
    /// Position of the frame in the stream, from 0.
    pub index: usize,
    pub count: f64,
    /// Fusion weights over the window; absent in single-frame mode.
    pub weights: Option<Vec<f64>>,
    pub map: DensityMap<f32>,
}

/// Online per-frame counting over a video.
pub struct StreamingCounter<'a> {
    lcn: &'a LcnModel<f32>,
    tan: Option<&'a TanModel<f32>>,
    roi: Option<RoiMask>,
    /// Maps of frames `next_out - k ..= seen - 1`, clamped at the start.
    cache: VecDeque<DensityMap<f32>>,
    seen: usize,
    next_out: usize,
}

impl<'a> StreamingCounter<'a> {
    /// With `tan == None` every frame is counted on its own map.
    pub fn new(lcn: &'a LcnModel<f32>, tan: Option<&'a TanModel<f32>>) -> Self {
        StreamingCounter { lcn, tan, roi: None, cache: VecDeque::new(), seen: 0, next_out: 0 }
    }

    /// Zero pixels outside `roi` before the network and cells outside it after.
    pub fn with_roi(mut self, roi: Option<RoiMask>) -> Self {
        self.roi = roi;
        self
    }

    fn k(&self) -> usize {
        self.tan.map_or(0, |t| t.k)
    }

    fn frame_map(&self, frame: &Tensor<f32>) -> Result<DensityMap<f32>> {
        match &self.roi {
            None => self.lcn.forward(frame),
            Some(r) => apply_roi(&self.lcn.forward(&apply_roi_image(frame, r)?)?, r),
        }
    }

    /// Window for output `next_out`, where `cache[0]` holds frame `next_out - k`
    /// (or the first frame, replicated) and missing future frames repeat the
    /// newest map.
    fn emit(&mut self) -> Result<FrameCount> {
        let index = self.next_out;
        self.next_out += 1;
        let Some(tan) = self.tan else {
            let map = self.cache.pop_front().ok_or_else(|| Error::invalid("no cached frame"))?;
            return Ok(FrameCount { index, count: map.count(), weights: None, map });
        };
        let k = tan.k;
        let last = self.cache.len() - 1;
        let maps: Vec<DensityMap<f32>> = (0..=2 * k).map(|j| self.cache[j.min(last)].clone()).collect();
        let out = tan_forward_maps(&FrameWindow::new(maps, k)?, tan)?;
        self.cache.pop_front();
        Ok(FrameCount { index, count: out.count, weights: Some(out.weights), map: out.fused })
    }

    /// Adds the next frame; returns the count that became available, if any.
    pub fn push(&mut self, frame: &Tensor<f32>) -> Result<Option<FrameCount>> {
        let map = self.frame_map(frame)?;
        if let Some(first) = self.cache.front() {
            if first.grid.shape() != map.grid.shape() {
                return Err(Error::shape("stream", "frame size changed mid-stream"));
            }
        }
        let k = self.k();
        if self.seen == 0 {
            // Leading replicas of the first frame.
            for _ in 0..k {
                self.cache.push_back(map.clone());
            }
        }
        self.cache.push_back(map);
        self.seen += 1;
        if self.seen > self.next_out + k {
            return self.emit().map(Some);
        }
        Ok(None)
    }

    /// Counts for the frames still waiting on future context.
    pub fn finish(&mut self) -> Result<Vec<FrameCount>> {
        let mut out = Vec::new();
        while self.next_out < self.seen {
            out.push(self.emit()?);
        }
        Ok(out)
    }

    /// Counts every frame of `frames` in order.
    pub fn run<'f>(&mut self, frames: impl IntoIterator<Item = &'f Tensor<f32>>) -> Result<Vec<FrameCount>> {
        let mut out = Vec::new();
        for f in frames {
            out.extend(self.push(f)?);
        }
        out.extend(self.finish()?);
        Ok(out)
    }
}

/// Result of a throughput run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    /// `[width, height]`.
    pub resolution: [usize; 2],
    pub frames: usize,
    pub warmup: usize,
    pub wall_seconds: f64,
    pub fps: f64,
    pub cores: usize,
    pub precision: Precision,
}

/// Times steady-state streaming inference on synthetic frames.
///
/// Runs `warmup` untimed frames first, then `n_frames` timed ones. Each
/// timed step is one network forward plus, when `tan` is given, one temporal
/// pass over the cached window. `cores` is the size of the worker pool the
/// caller runs this under.
pub fn fps_bench(
    lcn: &LcnModel<f32>,
    tan: Option<&TanModel<f32>>,
    resolution: [usize; 2],
    n_frames: usize,
    warmup: usize,
    cores: usize,
) -> Result<TimingReport> {
    if n_frames == 0 {
        return Err(Error::invalid("n_frames must be at least 1"));
    }
    let [w, h] = resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c);
    let pool: Vec<Tensor<f32>> = (0..4)
        .map(|_| {
            let data = (0..w * h * lcn.in_channels).map(|_| rng.gen::<f32>()).collect();
            Tensor::from_vec(&[h, w, lcn.in_channels], data)
        })
        .collect::<Result<_>>()?;
    let mut counter = StreamingCounter::new(lcn, tan);
    let k = counter.k();
    // Fill the window so every timed step emits an output.
    for i in 0..warmup.max(k) {
        counter.push(&pool[i % pool.len()])?;
    }
    let start = Instant::now();
    let mut emitted = 0;
    for i in 0..n_frames {
        if counter.push(&pool[i % pool.len()])?.is_some() {
            emitted += 1;
        }
    }
    let wall = start.elapsed().max(Duration::from_nanos(1)).as_secs_f64();
    debug_assert_eq!(emitted, n_frames);
    Ok(TimingReport {
        resolution,
        frames: n_frames,
        warmup: warmup.max(k),
        wall_seconds: wall,
        fps: n_frames as f64 / wall,
        cores,
        precision: Precision::F32,
    })
}
