//! Ground-truth density maps from head annotations.
//!
//! Each annotated head contributes one Gaussian stamp. Stamps are truncated
//! at four standard deviations, clipped to the image, and renormalized to unit
//! mass, so the integral of a rendered map equals the number of heads up to
//! rounding. Pixel centers sit at integer coordinates.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Fixed kernel spread used for UCSD-style data.
pub const UCSD_FIXED_SIGMA: f64 = 17.0;
/// Fixed kernel spread used for every other dataset.
pub const DEFAULT_FIXED_SIGMA: f64 = 15.0;
pub const DEFAULT_BETA: f64 = 0.3;
pub const DEFAULT_KNN: usize = 3;
pub const SIGMA_FLOOR: f64 = 0.5;
/// Stamps are truncated at this many standard deviations.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Head positions for one image, in sub-pixel image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAnnotations {
    pub points: Vec<[f64; 2]>,
    pub width: usize,
    pub height: usize,
}

impl HeadAnnotations {
    /// Validates that every point lies in `[0, width) x [0, height)`.
    pub fn new(points: Vec<[f64; 2]>, width: usize, height: usize) -> Result<Self> {
        let ann = HeadAnnotations { points, width, height };
        ann.validate("<annotations>")?;
        Ok(ann)
    }

    pub fn validate(&self, frame: &str) -> Result<()> {
        for &[x, y] in &self.points {
            let inside = x.is_finite()
                && y.is_finite()
                && x >= 0.0
                && y >= 0.0
                && x < self.width as f64
                && y < self.height as f64;
            if !inside {
                return Err(Error::OutOfBounds { frame: frame.to_string(), x, y, width: self.width, height: self.height });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A density grid and its downsampling factor relative to the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap<T: Scalar = f32> {
    pub grid: Tensor<T>,
    pub scale: usize,
}

impl<T: Scalar> DensityMap<T> {
    pub fn new(grid: Tensor<T>, scale: usize) -> Result<Self> {
        grid.expect_rank("density_map", 2)?;
        Ok(DensityMap { grid, scale })
    }

    pub fn zeros(rows: usize, cols: usize, scale: usize) -> Self {
        DensityMap { grid: Tensor::zeros(&[rows, cols]), scale }
    }

    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    /// Estimated head count: the plain sum of all cells, negative cells
    /// included.
    pub fn count(&self) -> f64 {
        self.grid.sum()
    }

    pub fn cast<U: Scalar>(&self) -> DensityMap<U> {
        DensityMap { grid: self.grid.cast(), scale: self.scale }
    }
}

/// Plain summation of a density map.
pub fn count<T: Scalar>(map: &DensityMap<T>) -> f64 {
    map.count()
}

/// Kernel spread selection for [`render_density`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SigmaMode {
    Fixed { sigma: f64 },
    Adaptive { beta: f64, knn: usize, fallback: f64 },
}

impl Default for SigmaMode {
    fn default() -> Self {
        SigmaMode::Fixed { sigma: DEFAULT_FIXED_SIGMA }
    }
}

impl SigmaMode {
    pub fn sigmas(&self, ann: &HeadAnnotations) -> Result<Vec<f64>> {
        match *self {
            SigmaMode::Fixed { sigma } => Ok(vec![sigma; ann.len()]),
            SigmaMode::Adaptive { beta, knn, fallback } => adaptive_sigmas_with_fallback(ann, knn, beta, fallback),
        }
    }
}

/// Geometry-adaptive spreads `sigma_i = beta * mean distance to the k_nn
/// nearest other heads`, floored at [`SIGMA_FLOOR`]. With fewer than
/// `k_nn + 1` heads every spread falls back to [`DEFAULT_FIXED_SIGMA`].
pub fn adaptive_sigmas(ann: &HeadAnnotations, k_nn: usize, beta: f64) -> Result<Vec<f64>> {
    adaptive_sigmas_with_fallback(ann, k_nn, beta, DEFAULT_FIXED_SIGMA)
}

pub fn adaptive_sigmas_with_fallback(ann: &HeadAnnotations, k_nn: usize, beta: f64, fallback: f64) -> Result<Vec<f64>> {
    if k_nn == 0 {
        return Err(Error::invalid("k_nn must be at least 1"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if ann.is_empty() {
        return Ok(Vec::new());
    }
    if ann.len() < k_nn + 1 {
        return Ok(vec![fallback.max(SIGMA_FLOOR); ann.len()]);
    }
    let index = GridIndex::new(&ann.points);
    Ok((0..ann.len())
        .map(|i| {
            let d = index.nearest_distances(i, k_nn);
            let mean = d.iter().sum::<f64>() / k_nn as f64;
            (beta * mean).max(SIGMA_FLOOR)
        })
        .collect())
}

/// Uniform bucket grid for k-nearest-neighbour queries.
struct GridIndex<'a> {
    points: &'a [[f64; 2]],
    min: [f64; 2],
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    fn new(points: &'a [[f64; 2]]) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent = (max[0] - min[0]).max(max[1] - min[1]).max(1e-9);
        // Roughly two points per occupied cell on a uniform layout.
        let per_axis = ((points.len() as f64 / 2.0).sqrt().ceil() as usize).clamp(1, 1024);
        let cell = extent / per_axis as f64 * (1.0 + 1e-9);
        let cols = (((max[0] - min[0]) / cell) as usize + 1).max(1);
        let rows = (((max[1] - min[1]) / cell) as usize + 1).max(1);
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, p) in points.iter().enumerate() {
            let (cx, cy) = Self::cell_of(min, cell, cols, rows, p);
            buckets[cy * cols + cx].push(i);
        }
        GridIndex { points, min, cell, cols, rows, buckets }
    }

    fn cell_of(min: [f64; 2], cell: f64, cols: usize, rows: usize, p: &[f64; 2]) -> (usize, usize) {
        let cx = (((p[0] - min[0]) / cell) as usize).min(cols - 1);
        let cy = (((p[1] - min[1]) / cell) as usize).min(rows - 1);
        (cx, cy)
    }

    /// The `k` smallest distances from point `i` to the other points, ascending.
    fn nearest_distances(&self, i: usize, k: usize) -> Vec<f64> {
        let p = self.points[i];
        let (cx, cy) = Self::cell_of(self.min, self.cell, self.cols, self.rows, &p);
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let max_ring = self.cols.max(self.rows);
        for ring in 0..=max_ring {
            let x0 = cx as isize - ring as isize;
            let x1 = cx as isize + ring as isize;
            let y0 = cy as isize - ring as isize;
            let y1 = cy as isize + ring as isize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let on_ring = x == x0 || x == x1 || y == y0 || y == y1;
                    if !on_ring || x < 0 || y < 0 || x >= self.cols as isize || y >= self.rows as isize {
                        continue;
                    }
                    for &j in &self.buckets[y as usize * self.cols + x as usize] {
                        if j == i {
                            continue;
                        }
                        let q = self.points[j];
                        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                        if best.len() < k || d < best[k - 1] {
                            let pos = best.partition_point(|&b| b <= d);
                            best.insert(pos, d);
                            best.truncate(k);
                        }
                    }
                }
            }
            // Every unvisited point is at least `ring * cell` away.
            if best.len() == k && best[k - 1] <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Renders the sum of unit-mass truncated Gaussian stamps, one per head, on
/// a `rows x cols` grid at source resolution.
pub fn render_density<T: Scalar>(ann: &HeadAnnotations, sigmas: &[f64], rows: usize, cols: usize) -> Result<DensityMap<T>> {
    if sigmas.len() != ann.len() {
        return Err(Error::shape("render_density", format!("{} sigmas for {} points", sigmas.len(), ann.len())));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::shape("render_density", "empty output grid"));
    }
    let mut acc = vec![0.0f64; rows * cols];
    for (&[x, y], &sigma) in ann.points.iter().zip(sigmas) {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("kernel spread must be positive, got {sigma}")));
        }
        stamp(&mut acc, rows, cols, x, y, sigma);
    }
    let grid = Tensor::from_vec(&[rows, cols], acc.into_iter().map(T::of).collect())?;
    DensityMap::new(grid, 1)
}

/// Convenience wrapper: spreads from `mode`, grid at the annotation's size.
pub fn render_with_mode<T: Scalar>(ann: &HeadAnnotations, mode: &SigmaMode) -> Result<DensityMap<T>> {
    let sigmas = mode.sigmas(ann)?;
    render_density(ann, &sigmas, ann.height, ann.width)
}

fn axis_weights(center: f64, sigma: f64, len: usize) -> (usize, Vec<f64>) {
    let radius = TRUNCATE_SIGMAS * sigma;
    let lo = (center - radius).ceil().max(0.0) as usize;
    let hi = ((center + radius).floor() as isize).min(len as isize - 1);
    if hi < lo as isize {
        // Spread far below one pixel: fall back to the nearest cell.
        let c = (center.round() as usize).min(len - 1);
        return (c, vec![1.0]);
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let w = (lo..=hi as usize).map(|i| (-(i as f64 - center).powi(2) * inv).exp()).collect();
    (lo, w)
}

fn stamp(acc: &mut [f64], rows: usize, cols: usize, x: f64, y: f64, sigma: f64) {
    let (x0, wx) = axis_weights(x, sigma, cols);
    let (y0, wy) = axis_weights(y, sigma, rows);
    let total = wx.iter().sum::<f64>() * wy.iter().sum::<f64>();
    if !(total > 0.0) {
        let (cx, cy) = ((x.round() as usize).min(cols - 1), (y.round() as usize).min(rows - 1));
        acc[cy * cols + cx] += 1.0;
        return;
    }
    let inv = 1.0 / total;
    for (dy, &gy) in wy.iter().enumerate() {
        let row = &mut acc[(y0 + dy) * cols + x0..(y0 + dy) * cols + x0 + wx.len()];
        let gy = gy * inv;
        for (cell, &gx) in row.iter_mut().zip(&wx) {
            *cell += gx * gy;
        }
    }
}

/// Binary region-of-interest mask at source resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    mask: Vec<u8>,
    width: usize,
    height: usize,
}

impl RoiMask {
    pub fn new(mask: Vec<u8>, width: usize, height: usize) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::shape("roi", format!("{} values for {width}x{height}", mask.len())));
        }
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::invalid("roi mask values must be 0 or 1"));
        }
        Ok(RoiMask { mask, width, height })
    }

    pub fn full(width: usize, height: usize) -> Self {
        RoiMask { mask: vec![1; width * height], width, height }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.mask
    }

    /// Loads an 8-bit image; nonzero pixels are inside the region.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let mask = img.into_raw().into_iter().map(|v| (v != 0) as u8).collect();
        RoiMask::new(mask, w as usize, h as usize)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.mask.iter().map(|&v| v * 255).collect())
            .ok_or_else(|| Error::invalid("roi buffer size"))?;
        img.save(path)?;
        Ok(())
    }

    /// Nearest-neighbour resampling onto a grid whose cells span `scale`
    /// source pixels each.
    pub fn resample(&self, rows: usize, cols: usize, scale: usize) -> Result<Vec<u8>> {
        let scale = scale.max(1);
        if rows == 0 || cols == 0 || (rows - 1) * scale >= self.height || (cols - 1) * scale >= self.width {
            return Err(Error::shape(
                "apply_roi",
                format!("{rows}x{cols} grid at scale {scale} does not fit a {}x{} mask", self.height, self.width),
            ));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let sy = (r * scale + scale / 2).min(self.height - 1);
            for c in 0..cols {
                let sx = (c * scale + scale / 2).min(self.width - 1);
                out.push(self.mask[sy * self.width + sx]);
            }
        }
        Ok(out)
    }

    /// The mask on the grid of `map`, as a 0/1 tensor.
    pub fn grid_for<T: Scalar>(&self, rows: usize, cols: usize, scale: usize) -> Result<Tensor<T>> {
        let m = self.resample(rows, cols, scale)?;
        Tensor::from_vec(&[rows, cols], m.into_iter().map(|v| T::of(v as f64)).collect())
    }
}

/// Zeroes every cell of `map` outside the region.
pub fn apply_roi<T: Scalar>(map: &DensityMap<T>, roi: &RoiMask) -> Result<DensityMap<T>> {
    let m = roi.resample(map.rows(), map.cols(), map.scale)?;
    let data = map.grid.data().iter().zip(&m).map(|(&v, &k)| if k == 1 { v } else { T::zero() }).collect();
    DensityMap::new(Tensor::from_vec(map.grid.shape(), data)?, map.scale)
}

/// Zeroes every pixel of an `H x W x C` image outside the region.
pub fn apply_roi_image<T: Scalar>(image: &Tensor<T>, roi: &RoiMask) -> Result<Tensor<T>> {
    image.expect_rank("apply_roi", 3)?;
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let m = roi.resample(h, w, 1)?;
    let mut out = image.clone();
    for (px, &k) in out.data_mut().chunks_exact_mut(c).zip(&m) {
        if k == 0 {
            px.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(out)
}

/// Sum-pools a source-resolution map onto the network's output grid.
pub fn downsample_gt<T: Scalar>(map: &DensityMap<T>, factor: usize) -> Result<DensityMap<T>> {
    let grid = ops::sum_pool(&map.grid, factor)?;
    DensityMap::new(grid, map.scale * factor)
}

/// Renders `map` as an 8-bit false-colour heatmap normalized to its maximum.
pub fn heatmap<T: Scalar>(map: &DensityMap<T>) -> RgbImage {
    let (rows, cols) = (map.rows(), map.cols());
    let peak = map.grid.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64()));
    let mut img = RgbImage::new(cols as u32, rows as u32);
    for (i, v) in map.grid.data().iter().enumerate() {
        let t = if peak > 0.0 { (v.as_f64() / peak).clamp(0.0, 1.0) } else { 0.0 };
        img.put_pixel((i % cols) as u32, (i / cols) as u32, colormap(t));
    }
    img
}

fn colormap(t: f64) -> Rgb<u8> {
    // Piecewise-linear blue -> cyan -> yellow -> red.
    let (r, g, b) = if t < 1.0 / 3.0 {
        let s = t * 3.0;
        (0.0, s, 1.0)
    } else if t < 2.0 / 3.0 {
        let s = (t - 1.0 / 3.0) * 3.0;
        (s, 1.0, 1.0 - s)
    } else {
        let s = (t - 2.0 / 3.0) * 3.0;
        (1.0, 1.0 - s, 0.0)
    };
    Rgb([(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8])
}
