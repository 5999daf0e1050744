use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use tancount_core::dataio::{load_dataset, DatasetFormat};
use tancount_core::density::{apply_roi, downsample_gt, heatmap, render_density};

use crate::config::{default_beta, default_knn, default_sigma, is_false, sigma_mode, write_json, Globals};

#[derive(Debug, Args, Serialize)]
pub struct DensityArgs {
    /// Dataset root in the canonical layout.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `fixed:<sigma>`, `fixed` or `adaptive`.
    #[arg(long)]
    sigma: Option<String>,
    /// Adaptive spread factor.
    #[arg(long)]
    beta: Option<f64>,
    /// Neighbours averaged by the adaptive spread.
    #[arg(long)]
    knn: Option<usize>,
    /// Sum-pool the maps by this factor before writing.
    #[arg(long)]
    stride: Option<usize>,
    /// Also write a false-colour PNG per frame.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    heatmaps: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityRun {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    sigma: String,
    beta: f64,
    knn: usize,
    stride: usize,
    heatmaps: bool,
}

impl Default for DensityRun {
    fn default() -> Self {
        DensityRun { data: None, out: None, sigma: default_sigma(), beta: default_beta(), knn: default_knn(), stride: 1, heatmaps: false }
    }
}

#[derive(Debug, Serialize)]
struct FrameRecord {
    frame: String,
    points: usize,
    integral: f64,
    sigmas: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct DensitySummary {
    sequences: usize,
    frames: usize,
    /// Largest `|integral - annotated heads|` over frames without a region mask.
    max_count_error: f64,
}

pub fn run(g: &Globals, args: DensityArgs) -> Result<()> {
    let r = g.resolve::<DensityRun>("gen-density", &args)?;
    let c = &r.value;
    let (Some(data), Some(out)) = (&c.data, &c.out) else { bail!("gen-density needs --data and --out") };
    if c.stride == 0 {
        bail!("--stride must be at least 1");
    }
    let mode = sigma_mode(&c.sigma, c.beta, c.knn)?;
    let ds = load_dataset(data, DatasetFormat::Canonical)?;
    let mut max_err: f64 = 0.0;
    for seq in &ds.sequences {
        let dir = out.join(&seq.name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        if c.heatmaps {
            fs::create_dir_all(dir.join("heatmaps"))?;
        }
        let records = seq
            .frames
            .par_iter()
            .map(|f| -> Result<FrameRecord> {
                let sigmas = mode.sigmas(&f.annotations)?;
                let mut map = render_density::<f64>(&f.annotations, &sigmas, seq.height, seq.width)?;
                if let Some(roi) = &seq.roi {
                    map = apply_roi(&map, roi)?;
                }
                if c.stride > 1 {
                    map = downsample_gt(&map, c.stride)?;
                }
                let stem = f.name.rsplit_once('.').map_or(f.name.as_str(), |(s, _)| s);
                map.grid.save(dir.join(format!("{stem}.tan")))?;
                if c.heatmaps {
                    heatmap(&map).save(dir.join("heatmaps").join(format!("{stem}.png")))?;
                }
                Ok(FrameRecord { frame: f.name.clone(), points: f.annotations.len(), integral: map.count(), sigmas })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut log = std::io::BufWriter::new(fs::File::create(dir.join("frames.jsonl"))?);
        for rec in &records {
            if seq.roi.is_none() {
                max_err = max_err.max((rec.integral - rec.points as f64).abs());
            }
            serde_json::to_writer(&mut log, rec)?;
            log.write_all(b"\n")?;
        }
        log.flush()?;
    }
    let summary = DensitySummary { sequences: ds.sequences.len(), frames: ds.frame_count(), max_count_error: max_err };
    write_json(&out.join("density_report.json"), &r.stamp(&summary)?)?;
    println!("{} frames from {} sequence(s); max |integral - heads| {:.2e}", summary.frames, summary.sequences, max_err);
    Ok(())
}

