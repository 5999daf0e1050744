use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use tancount_core::dataio::{synth_video, write_dataset, Dataset, SynthSpec};

use crate::config::{write_json, Globals};

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Dataset root to create.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of videos; video `i` uses seed `seed + i`.
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    walkers: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Walker speed in pixels per frame.
    #[arg(long)]
    speed: Option<f64>,
    /// Std of per-pixel Gaussian noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Std of the per-frame global gain.
    #[arg(long)]
    flicker: Option<f64>,
    /// Probability that a frame is heavily corrupted.
    #[arg(long = "corrupt")]
    corrupt_prob: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRun {
    out: Option<PathBuf>,
    sequences: usize,
    walkers: usize,
    frames: usize,
    width: usize,
    height: usize,
    speed: f64,
    noise: f64,
    flicker: f64,
    corrupt_prob: f64,
    seed: u64,
}

impl Default for SynthRun {
    fn default() -> Self {
        let s = SynthSpec::default();
        SynthRun {
            out: None,
            sequences: 1,
            walkers: s.walkers,
            frames: s.frames,
            width: s.width,
            height: s.height,
            speed: s.speed,
            noise: s.noise,
            flicker: s.flicker,
            corrupt_prob: s.corrupt_prob,
            seed: s.seed,
        }
    }
}

pub fn run(g: &Globals, args: SynthArgs) -> Result<()> {
    let r = g.resolve::<SynthRun>("synth", &args)?;
    let c = &r.value;
    let Some(out) = &c.out else { bail!("synth needs --out") };
    if c.sequences == 0 {
        bail!("--sequences must be at least 1");
    }
    let mut ds = Dataset { name: "synth".into(), sequences: Vec::new() };
    for i in 0..c.sequences {
        let spec = SynthSpec {
            walkers: c.walkers,
            frames: c.frames,
            width: c.width,
            height: c.height,
            speed: c.speed,
            noise: c.noise,
            flicker: c.flicker,
            corrupt_prob: c.corrupt_prob,
            seed: c.seed.wrapping_add(i as u64),
            ..Default::default()
        };
        let mut seq = synth_video(&spec).sequences.remove(0);
        seq.name = format!("seq{i}");
        ds.sequences.push(seq);
    }
    write_dataset(&ds, out)?;
    write_json(&out.join("synth.json"), &r.stamp(&serde_json::json!({ "frames": ds.frame_count() }))?)?;
    println!("wrote {} sequence(s), {} frames to {}", ds.sequences.len(), ds.frame_count(), out.display());
    Ok(())
}
