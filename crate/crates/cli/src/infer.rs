use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tancount_core::checkpoint::{load_lcn, load_tan, Manifest};
use tancount_core::dataio::load_image;
use tancount_core::density::heatmap;
use tancount_core::stream::FrameCount;
use tancount_core::{LcnModel, RoiMask, StreamingCounter, TanModel};

use crate::config::{is_false, parse_resolution, write_json, Globals};

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    /// Directory of frames, or a sequence directory holding `frames/`.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lcn: Option<PathBuf>,
    #[arg(long)]
    tan: Option<PathBuf>,
    /// Count each frame on its own, without temporal fusion.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    single_frame: bool,
    /// Region mask PNG; defaults to `roi.png` beside `frames/` when present.
    #[arg(long)]
    roi: Option<PathBuf>,
    /// Sequence name written to the CSV; defaults to the directory name.
    #[arg(long)]
    sequence: Option<String>,
    /// Expected frame size, `WIDTHxHEIGHT`.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<[usize; 2]>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    heatmaps: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InferRun {
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    lcn: Option<PathBuf>,
    tan: Option<PathBuf>,
    single_frame: bool,
    roi: Option<PathBuf>,
    sequence: Option<String>,
    resolution: Option<[usize; 2]>,
    heatmaps: bool,
}

#[derive(Serialize)]
struct CountRecord<'a> {
    frame: &'a str,
    count: f64,
    weights: Option<&'a [f64]>,
}

#[derive(Serialize)]
struct InferReport {
    model_id: String,
    sequence: String,
    frames: usize,
    mean_count: Option<f64>,
    temporal: bool,
}

/// Short content hash of the checkpoint manifests in use.
pub fn model_id(manifests: &[&Manifest]) -> Result<String> {
    let mut h = Sha256::new();
    for m in manifests {
        h.update(serde_json::to_vec(m)?);
    }
    Ok(format!("{:x}", h.finalize())[..16].to_string())
}

/// Models named by `--lcn` / `--tan`, honouring `--single-frame`.
pub fn load_models(lcn: Option<&Path>, tan: Option<&Path>, single_frame: bool) -> Result<(LcnModel<f32>, Option<TanModel<f32>>, Vec<Manifest>)> {
    let Some(lcn_dir) = lcn else { bail!("--lcn checkpoint is required") };
    let l = load_lcn(lcn_dir).with_context(|| format!("loading {}", lcn_dir.display()))?;
    let mut manifests = vec![l.manifest];
    let tan = match (tan, single_frame) {
        (_, true) => None,
        (Some(dir), false) => {
            let t = load_tan(dir).with_context(|| format!("loading {}", dir.display()))?;
            manifests.push(t.manifest);
            Some(t.model)
        }
        (None, false) => bail!("--tan checkpoint is required unless --single-frame is given"),
    };
    Ok((l.model, tan, manifests))
}

fn frame_key(name: &str) -> (Option<u64>, String) {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    (stem.parse().ok(), name.to_string())
}

/// Image files of a video directory in frame order.
fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort_by_cached_key(|p| frame_key(&p.file_name().unwrap_or_default().to_string_lossy()));
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn run(g: &Globals, args: InferArgs) -> Result<()> {
    let r = g.resolve::<InferRun>("infer", &args)?;
    let c = &r.value;
    let (Some(input), Some(out)) = (&c.input, &c.out) else { bail!("infer needs --input and --out") };
    if !input.is_dir() {
        bail!("input {} is not a directory", input.display());
    }
    let (frames_dir, seq_dir) = if input.join("frames").is_dir() { (input.join("frames"), input.clone()) } else { (input.clone(), input.clone()) };
    let sequence = c.sequence.clone().unwrap_or_else(|| {
        let own = file_name(&seq_dir);
        match seq_dir.parent() {
            Some(parent) if own == "frames" => file_name(parent),
            _ => own,
        }
    });
    let roi_path = c.roi.clone().or_else(|| Some(seq_dir.join("roi.png")).filter(|p| p.is_file()));
    let roi = roi_path.as_ref().map(RoiMask::load).transpose()?;

    let (lcn, tan, manifests) = load_models(c.lcn.as_deref(), c.tan.as_deref(), c.single_frame)?;
    let mut expected: Vec<(String, [usize; 2])> = Vec::new();
    if let Some(res) = c.resolution {
        expected.push(("--resolution".into(), res));
    }
    for m in &manifests {
        if let Some(res) = m.resolution {
            expected.push((format!("{:?} checkpoint", m.kind).to_lowercase(), res));
        }
    }
    let model_id = model_id(&manifests.iter().collect::<Vec<_>>())?;

    fs::create_dir_all(out)?;
    if c.heatmaps {
        fs::create_dir_all(out.join("heatmaps"))?;
    }
    let files = list_frames(&frames_dir)?;
    let names: Vec<String> = files.iter().map(|p| file_name(p)).collect();
    let mut jsonl = BufWriter::new(File::create(out.join("counts.jsonl"))?);
    let mut csv = csv::Writer::from_path(out.join("counts.csv"))?;
    csv.write_record(["sequence", "frame", "count"])?;
    let mut total = 0.0;
    let mut emit = |fc: FrameCount| -> Result<()> {
        let name = &names[fc.index];
        serde_json::to_writer(&mut jsonl, &CountRecord { frame: name, count: fc.count, weights: fc.weights.as_deref() })?;
        jsonl.write_all(b"\n")?;
        csv.write_record([sequence.as_str(), name.as_str(), &fc.count.to_string()])?;
        if c.heatmaps {
            let stem = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s);
            heatmap(&fc.map).save(out.join("heatmaps").join(format!("{stem}.png")))?;
        }
        total += fc.count;
        Ok(())
    };

    let mut counter = StreamingCounter::new(&lcn, tan.as_ref()).with_roi(roi);
    for path in &files {
        let img = load_image(path)?;
        let size = [img.shape()[1], img.shape()[0]];
        for (what, res) in &expected {
            if size != *res {
                bail!("frame {} is {}x{} but the {what} expects {}x{}", path.display(), size[0], size[1], res[0], res[1]);
            }
        }
        if let Some(fc) = counter.push(&img)? {
            emit(fc)?;
        }
    }
    for fc in counter.finish()? {
        emit(fc)?;
    }
    drop(emit);
    jsonl.flush()?;
    csv.flush()?;

    let report = InferReport {
        model_id,
        sequence,
        frames: files.len(),
        mean_count: (!files.is_empty()).then(|| total / files.len() as f64),
        temporal: tan.is_some(),
    };
    write_json(&out.join("infer_report.json"), &r.stamp(&report)?)?;
    match report.mean_count {
        Some(m) => println!("{} frames; mean count {m:.3}", report.frames),
        None => println!("0 frames"),
    }
    Ok(())
}
