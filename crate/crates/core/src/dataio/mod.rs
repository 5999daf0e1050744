//! Datasets on disk and in memory.
//!
//! Canonical layout, one directory per sequence:
//!
//! ```text
//! root/<sequence>/frames/000000.png
//! root/<sequence>/annotations.jsonl   {"frame": "000000.png", "points": [[x, y], ...]}
//! root/<sequence>/roi.png             optional, nonzero = inside
//! root/<sequence>/meta.json           optional, {"fps": 25.0}
//! ```

mod augment;
mod split;
mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::density::{downsample_gt, render_with_mode, HeadAnnotations, RoiMask, SigmaMode};
use crate::error::{Error, Result};
use crate::lcn::{LcnModel, TrainSample, OUTPUT_STRIDE};
use crate::tan::{FrameWindow, JointSample, TanSample};
use crate::tensor::Tensor;

pub use augment::{augment_patches, Patch};
pub use split::{apply_split, SplitSpec};
pub use synth::{synth_video, SynthSpec};

/// Where a frame's pixels live.
#[derive(Debug, Clone)]
pub enum FrameSource {
    File(PathBuf),
    Memory(Arc<Tensor<f32>>),
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub name: String,
    pub annotations: HeadAnnotations,
    pub source: FrameSource,
}

impl Frame {
    /// Pixels as `H x W x 3` in `[0, 1]`; grayscale is replicated to three channels.
    pub fn image(&self) -> Result<Tensor<f32>> {
        match &self.source {
            FrameSource::Memory(t) => Ok((**t).clone()),
            FrameSource::File(p) => load_image(p),
        }
    }

    pub fn count(&self) -> usize {
        self.annotations.len()
    }
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub fps: Option<f64>,
    pub frames: Vec<Frame>,
    pub roi: Option<RoiMask>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn counts(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.count() as f64).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }
}

/// On-disk dataset formats understood by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Canonical,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(DatasetFormat::Canonical),
            other => Err(Error::invalid(format!("unknown dataset format {other:?}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    frame: String,
    points: Vec<[f64; 2]>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct SequenceMeta {
    #[serde(default)]
    fps: Option<f64>,
}

/// Reads a float RGB image in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    if !path.exists() {
        return Err(Error::MissingFrame(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::from_vec(&[h as usize, w as usize, 3], data)
}

/// Writes an `H x W x 3` float image in `[0, 1]` as 8-bit PNG.
pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    image.expect_rank("save_image", 3)?;
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(Error::shape("save_image", format!("expected 3 channels, got {c}")));
    }
    let raw = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::invalid("image buffer size"))?;
    img.save(path)?;
    Ok(())
}

fn frame_key(name: &str) -> (Option<u64>, &str) {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    (stem.parse().ok(), name)
}

/// Loads and validates a dataset rooted at `root`.
pub fn load_dataset(root: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let DatasetFormat::Canonical = format;
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::NoSequences(root.to_path_buf()));
    }
    let sequences = dirs.iter().map(|d| load_sequence(d)).collect::<Result<Vec<_>>>()?;
    let name = root.file_name().map_or_else(|| "dataset".into(), |n| n.to_string_lossy().into_owned());
    Ok(Dataset { name, sequences })
}

fn load_sequence(dir: &Path) -> Result<Sequence> {
    let name = dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let ann_path = dir.join("annotations.jsonl");
    if !ann_path.is_file() {
        return Err(Error::MissingAnnotations(ann_path));
    }
    let reader = BufReader::new(fs::File::open(&ann_path)?);
    let mut frames: Vec<Frame> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedAnnotation {
            path: ann_path.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let path = dir.join("frames").join(&rec.frame);
        if !path.is_file() {
            return Err(Error::MissingFrame(path));
        }
        let (w, h) = image::image_dimensions(&path)?;
        let (w, h) = (w as usize, h as usize);
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::MalformedAnnotation {
                    path: ann_path.clone(),
                    line: lineno + 1,
                    msg: format!("frame {} is {w}x{h}, sequence is {}x{}", rec.frame, d.0, d.1),
                })
            }
            Some(_) => {}
        }
        if let Some(prev) = frames.last() {
            if frame_key(&prev.name) >= frame_key(&rec.frame) {
                return Err(Error::FrameOrder { sequence: name.clone(), frame: rec.frame });
            }
        }
        let annotations = HeadAnnotations { points: rec.points, width: w, height: h };
        annotations.validate(&rec.frame)?;
        frames.push(Frame { name: rec.frame, annotations, source: FrameSource::File(path) });
    }
    let (width, height) = dims.unwrap_or((0, 0));
    let roi_path = dir.join("roi.png");
    let roi = if roi_path.is_file() {
        let roi = RoiMask::load(&roi_path)?;
        if !frames.is_empty() && (roi.width(), roi.height()) != (width, height) {
            return Err(Error::shape("roi", format!("roi.png is {}x{}, frames are {width}x{height}", roi.width(), roi.height())));
        }
        Some(roi)
    } else {
        None
    };
    let meta_path = dir.join("meta.json");
    let meta: SequenceMeta = if meta_path.is_file() {
        serde_json::from_str(&fs::read_to_string(&meta_path)?)?
    } else {
        SequenceMeta::default()
    };
    Ok(Sequence { name, width, height, fps: meta.fps, frames, roi })
}

/// Writes `ds` in the canonical layout under `root`.
pub fn write_dataset(ds: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for seq in &ds.sequences {
        let dir = root.join(&seq.name);
        fs::create_dir_all(dir.join("frames"))?;
        let mut ann = std::io::BufWriter::new(fs::File::create(dir.join("annotations.jsonl"))?);
        for frame in &seq.frames {
            let dst = dir.join("frames").join(&frame.name);
            match &frame.source {
                FrameSource::Memory(t) => save_image(t, &dst)?,
                FrameSource::File(src) => {
                    if src != &dst {
                        fs::copy(src, &dst)?;
                    }
                }
            }
            let rec = AnnotationRecord { frame: frame.name.clone(), points: frame.annotations.points.clone() };
            serde_json::to_writer(&mut ann, &rec)?;
            ann.write_all(b"\n")?;
        }
        ann.flush()?;
        if let Some(roi) = &seq.roi {
            roi.save(dir.join("roi.png"))?;
        }
        if seq.fps.is_some() {
            fs::write(dir.join("meta.json"), serde_json::to_string(&SequenceMeta { fps: seq.fps })?)?;
        }
    }
    Ok(())
}

/// Frame indices of the `2k + 1` window centred on `t`, replicating the
/// first and last frame at sequence boundaries.
pub fn make_window(len: usize, t: usize, k: usize) -> Result<Vec<usize>> {
    if t >= len {
        return Err(Error::invalid(format!("frame {t} outside a sequence of {len}")));
    }
    Ok((0..=2 * k).map(|j| (t + j).saturating_sub(k).min(len - 1)).collect())
}

/// Ground truth for one frame on the counting network's output grid.
pub fn frame_ground_truth(frame: &Frame, mode: &SigmaMode, roi: Option<&RoiMask>) -> Result<crate::DensityMap<f32>> {
    let full = render_with_mode::<f64>(&frame.annotations, mode)?;
    let full = match roi {
        Some(r) => crate::density::apply_roi(&full, r)?,
        None => full,
    };
    Ok(downsample_gt(&full, OUTPUT_STRIDE)?.cast())
}

/// Images and output-grid ground truth for every frame of a sequence.
pub fn lcn_samples(seq: &Sequence, mode: &SigmaMode) -> Result<Vec<TrainSample>> {
    seq.frames
        .iter()
        .map(|f| {
            let mut image = f.image()?;
            let gt = frame_ground_truth(f, mode, seq.roi.as_ref())?;
            let roi = match &seq.roi {
                Some(r) => {
                    image = crate::density::apply_roi_image(&image, r)?;
                    Some(r.grid_for(gt.rows(), gt.cols(), OUTPUT_STRIDE)?)
                }
                None => None,
            };
            Ok(TrainSample { image, gt, roi })
        })
        .collect()
}

/// Raw-frame windows for joint training of both networks.
pub fn joint_samples(seq: &Sequence, k: usize, mode: &SigmaMode) -> Result<Vec<JointSample>> {
    let roi = seq.roi.as_ref();
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let img = f.image()?;
            Ok(Arc::new(match roi {
                Some(r) => crate::density::apply_roi_image(&img, r)?,
                None => img,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    (0..seq.len())
        .map(|t| {
            let gt = frame_ground_truth(&seq.frames[t], mode, roi)?;
            let mask = roi.map(|r| r.grid_for(gt.rows(), gt.cols(), OUTPUT_STRIDE)).transpose()?;
            let idx = make_window(seq.len(), t, k)?;
            Ok(JointSample { frames: idx.iter().map(|&i| frames[i].clone()).collect(), gt, roi: mask })
        })
        .collect()
}

/// Temporal training windows for a sequence: frozen network maps of the
/// `2k + 1` frames around each frame, with the centre frame's ground truth.
pub fn tan_samples(seq: &Sequence, lcn: &LcnModel<f32>, k: usize, mode: &SigmaMode) -> Result<Vec<TanSample>> {
    use rayon::prelude::*;
    let roi = seq.roi.as_ref();
    let maps = seq
        .frames
        .par_iter()
        .map(|f| {
            let img = f.image()?;
            match roi {
                Some(r) => crate::density::apply_roi(&lcn.forward(&crate::density::apply_roi_image(&img, r)?)?, r),
                None => lcn.forward(&img),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    (0..seq.len())
        .map(|t| {
            let idx = make_window(seq.len(), t, k)?;
            let window = FrameWindow::new(idx.iter().map(|&i| maps[i].clone()).collect(), k)?;
            Ok(TanSample { window, gt: frame_ground_truth(&seq.frames[t], mode, roi)? })
        })
        .collect()
}
