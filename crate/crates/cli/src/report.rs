use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tancount_core::dataio::{apply_split, load_dataset, DatasetFormat};
use tancount_core::eval::{count_params, evaluate, EvalReport, ParamReport, Predictor};
use tancount_core::optim::WeightInit;
use tancount_core::stream::fps_bench;
use tancount_core::{lcn, tan, LcnModel, TanConfig, TanModel};

use crate::config::{is_false, parse_resolution, split_spec, write_json, Globals};
use crate::infer::{load_models, model_id};

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for `eval_report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score only the test part of this split.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    lcn: Option<PathBuf>,
    #[arg(long)]
    tan: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    single_frame: bool,
    /// Baseline: plain mean of single-frame counts over `2k + 1` frames.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    average: bool,
    #[arg(long)]
    k: Option<usize>,
    /// CSV with columns `sequence,frame,count` to score instead of a model.
    #[arg(long)]
    counts_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRun {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    split: Option<String>,
    lcn: Option<PathBuf>,
    tan: Option<PathBuf>,
    single_frame: bool,
    average: bool,
    k: usize,
    counts_file: Option<PathBuf>,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            data: None,
            out: None,
            split: None,
            lcn: None,
            tan: None,
            single_frame: false,
            average: false,
            k: TanConfig::default().k,
            counts_file: None,
        }
    }
}

#[derive(Deserialize)]
struct CountRow {
    sequence: String,
    frame: String,
    count: f64,
}

fn read_counts(path: &PathBuf) -> Result<(HashMap<(String, String), f64>, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading counts file {}", path.display()))?;
    let mut table = HashMap::new();
    for row in csv::Reader::from_reader(bytes.as_slice()).deserialize() {
        let row: CountRow = row.with_context(|| format!("parsing {}", path.display()))?;
        table.insert((row.sequence, row.frame), row.count);
    }
    let id = format!("counts:{}", &format!("{:x}", Sha256::digest(&bytes))[..16]);
    Ok((table, id))
}

fn print_table(r: &EvalReport) {
    println!("{:<24} {:>7} {:>10} {:>10}", "scene", "frames", "MAE", "MSE");
    for s in &r.per_scene {
        println!("{:<24} {:>7} {:>10.4} {:>10.4}", s.name, s.frames, s.mae, s.mse);
    }
    println!("{:<24} {:>7} {:>10.4} {:>10.4}", "overall", r.frames.len(), r.mae, r.mse);
}

pub fn run_eval(g: &Globals, args: EvalArgs) -> Result<()> {
    let r = g.resolve::<EvalRun>("eval", &args)?;
    let c = &r.value;
    let Some(data) = &c.data else { bail!("eval needs --data") };
    let mut ds = load_dataset(data, DatasetFormat::Canonical)?;
    if let Some(split) = &c.split {
        ds = apply_split(&ds, &split_spec(split)?)?.1;
    }
    if ds.frame_count() == 0 {
        bail!("nothing to evaluate in {}", data.display());
    }
    let report = if let Some(path) = &c.counts_file {
        let (table, id) = read_counts(path)?;
        evaluate(&ds, &Predictor::Counts(&table), &id, &r.hash)?
    } else {
        let (lcn, tan, manifests) = load_models(c.lcn.as_deref(), c.tan.as_deref(), c.single_frame || c.average)?;
        let id = model_id(&manifests.iter().collect::<Vec<_>>())?;
        let predictor = match (&tan, c.average) {
            (_, true) => Predictor::UniformAverage { lcn: &lcn, k: c.k },
            (Some(tan), false) => Predictor::Temporal { lcn: &lcn, tan },
            (None, false) => Predictor::SingleFrame(&lcn),
        };
        evaluate(&ds, &predictor, &id, &r.hash)?
    };
    print_table(&report);
    if let Some(out) = &c.out {
        write_json(&out.join("eval_report.json"), &r.stamp(&report)?)?;
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Frame size, `WIDTHxHEIGHT`.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<[usize; 2]>,
    /// Timed frames.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Checkpoints to time; random weights of the same shape otherwise.
    #[arg(long)]
    lcn: Option<PathBuf>,
    #[arg(long)]
    tan: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    single_frame: bool,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Directory for `bench_report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchRun {
    resolution: [usize; 2],
    frames: usize,
    warmup: usize,
    lcn: Option<PathBuf>,
    tan: Option<PathBuf>,
    single_frame: bool,
    k: usize,
    blocks: usize,
    hidden: usize,
    out: Option<PathBuf>,
    seed: u64,
}

impl Default for BenchRun {
    fn default() -> Self {
        let t = TanConfig::default();
        BenchRun {
            resolution: [320, 240],
            frames: 200,
            warmup: 10,
            lcn: None,
            tan: None,
            single_frame: false,
            k: t.k,
            blocks: t.blocks,
            hidden: t.hidden,
            out: None,
            seed: 0,
        }
    }
}

pub fn run_bench(g: &Globals, args: BenchArgs) -> Result<()> {
    let r = g.resolve::<BenchRun>("bench", &args)?;
    let c = &r.value;
    let (lcn, tan, id) = if c.lcn.is_some() {
        let (lcn, tan, manifests) = load_models(c.lcn.as_deref(), c.tan.as_deref(), c.single_frame)?;
        let id = model_id(&manifests.iter().collect::<Vec<_>>())?;
        (lcn, tan, id)
    } else {
        let lcn = LcnModel::<f32>::with_init(3, &WeightInit::He, c.seed)?;
        let tan = if c.single_frame {
            None
        } else {
            Some(TanModel::from_config(&TanConfig { k: c.k, blocks: c.blocks, hidden: c.hidden, seed: c.seed, ..Default::default() })?)
        };
        (lcn, tan, "random".to_string())
    };
    let cores = rayon::current_num_threads();
    let timing = fps_bench(&lcn, tan.as_ref(), c.resolution, c.frames, c.warmup, cores)?;
    println!(
        "{:.1} FPS at {}x{} over {} frames on {} core(s), {}",
        timing.fps,
        c.resolution[0],
        c.resolution[1],
        timing.frames,
        timing.cores,
        if tan.is_some() { "with temporal fusion" } else { "single-frame" }
    );
    if let Some(out) = &c.out {
        let mut v = r.stamp(&timing)?;
        v["model_id"] = id.into();
        write_json(&out.join("bench_report.json"), &v)?;
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct ParamsArgs {
    /// Count a saved model instead of the default shapes.
    #[arg(long)]
    lcn: Option<PathBuf>,
    #[arg(long)]
    tan: Option<PathBuf>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Directory for `params.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamsRun {
    lcn: Option<PathBuf>,
    tan: Option<PathBuf>,
    blocks: usize,
    hidden: usize,
    out: Option<PathBuf>,
}

impl Default for ParamsRun {
    fn default() -> Self {
        let t = TanConfig::default();
        ParamsRun { lcn: None, tan: None, blocks: t.blocks, hidden: t.hidden, out: None }
    }
}

pub fn run_params(g: &Globals, args: ParamsArgs) -> Result<()> {
    let r = g.resolve::<ParamsRun>("params", &args)?;
    let c = &r.value;
    let report = match (&c.lcn, &c.tan) {
        (None, None) => {
            let l = lcn::param_count_for(3);
            let t = tan::param_count_for(c.blocks, c.hidden);
            ParamReport { lcn: l, tan: t, combined: l + t }
        }
        _ => {
            let lcn = match &c.lcn {
                Some(dir) => tancount_core::checkpoint::load_lcn(dir)?.model,
                None => LcnModel::zeros(3),
            };
            let tan = c.tan.as_ref().map(tancount_core::checkpoint::load_tan).transpose()?.map(|l| l.model);
            count_params(&lcn, tan.as_ref())
        }
    };
    let v = r.stamp(&report)?;
    println!("lcn {}  tan {}  combined {}", report.lcn, report.tan, report.combined);
    if let Some(out) = &c.out {
        write_json(&out.join("params.json"), &v)?;
    }
    Ok(())
}
