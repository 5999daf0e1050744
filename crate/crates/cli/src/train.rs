use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use tancount_core::checkpoint::{load_lcn, load_tan, save_lcn, save_tan, SaveOptions};
use tancount_core::dataio::{apply_split, augment_patches, joint_samples, lcn_samples, load_dataset, tan_samples, Dataset, DatasetFormat, Sequence};
use tancount_core::density::{apply_roi_image, downsample_gt, render_with_mode, DensityMap, HeadAnnotations};
use tancount_core::lcn::{lcn_train, OptimizerState, TrainEvent, TrainSample, OUTPUT_STRIDE};
use tancount_core::optim::WeightInit;
use tancount_core::tan::{joint_train, tan_forward_maps, tan_train, FrameWindow, JointModel};
use tancount_core::tensor::Tensor;
use tancount_core::{LcnModel, LcnTrainConfig, SigmaMode, TanConfig, TanModel};

use crate::config::{default_beta, default_knn, default_sigma, is_false, sigma_mode, split_spec, write_json, Globals, Resolved};

#[derive(Debug, Args, Serialize)]
pub struct LcnArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the model, loss log and report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// MALL_PAPER, UCSD_PAPER, ALL_TRAIN or a JSON split file.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    knn: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// `he` or a Gaussian std such as `0.01`.
    #[arg(long, value_parser = parse_init)]
    init: Option<WeightInit>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Train on quadrant and random crops plus their mirrors.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    augment: bool,
    /// Pass the output map through a ReLU.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    clamp_output: bool,
    /// Continue from this checkpoint, optimizer state included.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn parse_init(s: &str) -> Result<WeightInit, String> {
    s.parse().map_err(|e: tancount_core::Error| e.to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LcnRun {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    split: String,
    sigma: String,
    beta: f64,
    knn: usize,
    lr: f64,
    iters: usize,
    init: WeightInit,
    batch: usize,
    checkpoint_every: usize,
    augment: bool,
    clamp_output: bool,
    resume: Option<PathBuf>,
    seed: u64,
}

impl Default for LcnRun {
    fn default() -> Self {
        let t = LcnTrainConfig::default();
        LcnRun {
            data: None,
            out: None,
            split: "ALL_TRAIN".into(),
            sigma: default_sigma(),
            beta: default_beta(),
            knn: default_knn(),
            lr: t.lr,
            iters: t.iterations,
            init: t.init,
            batch: t.batch_size,
            checkpoint_every: t.checkpoint_every,
            augment: false,
            clamp_output: t.clamp_output,
            resume: None,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TanArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trained counting network; frozen unless `--joint` is given.
    #[arg(long)]
    lcn: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    knn: Option<usize>,
    /// Frames on each side of the centre frame.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Weight of the count term in the block loss.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    init_std: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Fine-tune the counting network together with the fusion network.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    joint: bool,
    /// Counting network learning rate under `--joint`.
    #[arg(long)]
    lcn_lr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TanRun {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    lcn: Option<PathBuf>,
    split: String,
    sigma: String,
    beta: f64,
    knn: usize,
    k: usize,
    blocks: usize,
    hidden: usize,
    lambda: f64,
    lr: f64,
    iters: usize,
    init_std: f64,
    batch: usize,
    checkpoint_every: usize,
    resume: Option<PathBuf>,
    joint: bool,
    lcn_lr: f64,
    seed: u64,
}

impl Default for TanRun {
    fn default() -> Self {
        let t = TanConfig::default();
        TanRun {
            data: None,
            out: None,
            lcn: None,
            split: "ALL_TRAIN".into(),
            sigma: default_sigma(),
            beta: default_beta(),
            knn: default_knn(),
            k: t.k,
            blocks: t.blocks,
            hidden: t.hidden,
            lambda: t.lambda,
            lr: t.lr,
            iters: t.iterations,
            init_std: t.init_std,
            batch: t.batch_size,
            checkpoint_every: t.checkpoint_every,
            resume: None,
            joint: false,
            lcn_lr: 1e-5,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Serialize)]
struct TrainReport {
    model: &'static str,
    samples: usize,
    iterations: usize,
    final_loss: Option<f64>,
    mean_gt_count: f64,
    /// Count MAE of the trained model on its own training set.
    train_mae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    center_frame_mae: Option<f64>,
}

#[derive(Serialize)]
struct LossRecord {
    iteration: usize,
    loss: f64,
}

fn training_set(data: &Path, split: &str) -> Result<Dataset> {
    let ds = load_dataset(data, DatasetFormat::Canonical)?;
    let (train, _) = apply_split(&ds, &split_spec(split)?)?;
    if train.frame_count() == 0 {
        bail!("split {split} leaves no training frames in {}", data.display());
    }
    Ok(train)
}

/// `[width, height]` shared by every sequence, if there is one.
fn common_resolution(ds: &Dataset) -> Option<[usize; 2]> {
    let mut dims = ds.sequences.iter().filter(|s| !s.is_empty()).map(|s| [s.width, s.height]);
    let first = dims.next()?;
    dims.all(|d| d == first).then_some(first)
}

fn loss_log(out: &Path, append: bool) -> Result<BufWriter<File>> {
    let path = out.join("loss.jsonl");
    let file = if append {
        OpenOptions::new().create(true).append(true).open(&path)
    } else {
        File::create(&path)
    };
    Ok(BufWriter::new(file.with_context(|| format!("opening {}", path.display()))?))
}

fn augmented_samples(seq: &Sequence, mode: &SigmaMode, seed: u64) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for f in &seq.frames {
        let mut image = f.image()?;
        let mut ann = f.annotations.clone();
        if let Some(roi) = &seq.roi {
            image = apply_roi_image(&image, roi)?;
            let inside = |p: &[f64; 2]| roi.values()[p[1] as usize * roi.width() + p[0] as usize] == 1;
            ann = HeadAnnotations { points: ann.points.into_iter().filter(inside).collect(), ..ann };
        }
        for p in augment_patches(&image, &ann, &mut rng) {
            if p.annotations.width < OUTPUT_STRIDE || p.annotations.height < OUTPUT_STRIDE {
                continue;
            }
            let gt = downsample_gt(&render_with_mode::<f64>(&p.annotations, mode)?, OUTPUT_STRIDE)?.cast();
            out.push(TrainSample { image: p.image, gt, roi: None });
        }
    }
    Ok(out)
}

fn save_opts<T>(r: &Resolved<T>, resolution: Option<[usize; 2]>, iteration: usize) -> SaveOptions {
    SaveOptions { resolution, iteration, config: Some(r.effective.clone()) }
}

pub fn run_lcn(g: &Globals, args: LcnArgs) -> Result<()> {
    let r = g.resolve::<LcnRun>("train-lcn", &args)?;
    let c = &r.value;
    let (Some(data), Some(out)) = (&c.data, &c.out) else { bail!("train-lcn needs --data and --out") };
    let mode = sigma_mode(&c.sigma, c.beta, c.knn)?;
    let train = training_set(data, &c.split)?;
    let resolution = common_resolution(&train);
    let mut samples = Vec::new();
    for (i, seq) in train.sequences.iter().enumerate() {
        if c.augment {
            samples.extend(augmented_samples(seq, &mode, c.seed.wrapping_add(i as u64))?);
        } else {
            samples.extend(lcn_samples(seq, &mode)?);
        }
    }
    let (resume, start) = match &c.resume {
        None => (None, 0),
        Some(dir) => {
            let l = load_lcn(dir).with_context(|| format!("resuming from {}", dir.display()))?;
            let opt = l.optimizer.unwrap_or_else(|| OptimizerState::for_lengths(l.model.tensors().iter().map(|(_, t)| t.len())));
            (Some((l.model, opt)), l.manifest.iteration)
        }
    };
    let cfg = LcnTrainConfig {
        lr: c.lr,
        init: c.init,
        batch_size: c.batch,
        iterations: c.iters,
        seed: c.seed,
        checkpoint_every: c.checkpoint_every,
        clamp_output: c.clamp_output,
    };
    fs::create_dir_all(out)?;
    let model_dir = out.join("model");
    let mut log = loss_log(out, c.resume.is_some())?;
    let mut side_err: Option<anyhow::Error> = None;
    let result = lcn_train(&samples, &cfg, resume, |ev| {
        let res = match ev {
            TrainEvent::Step { iteration, loss } => {
                serde_json::to_writer(&mut log, &LossRecord { iteration: start + iteration, loss }).map_err(Into::into).and_then(|_| log.write_all(b"\n").map_err(Into::into))
            }
            TrainEvent::Checkpoint { iteration, model, optimizer } => {
                let dir = out.join("checkpoints").join(format!("iter_{:06}", start + iteration));
                save_lcn(&dir, model, Some(optimizer), &save_opts(&r, resolution, start + iteration)).map(|_| ()).map_err(Into::into)
            }
            TrainEvent::Diverged { iteration, last_good } => {
                eprintln!("train-lcn: loss is not finite at iteration {}; keeping the last good model in {}", start + iteration, model_dir.display());
                save_lcn(&model_dir, last_good, None, &save_opts(&r, resolution, start + iteration - 1)).map(|_| ()).map_err(Into::into)
            }
        };
        if let (Err(e), None) = (res, &side_err) {
            side_err = Some(e);
        }
    });
    log.flush()?;
    if let Some(e) = side_err {
        return Err(e);
    }
    let outcome = result?;
    let iterations = start + c.iters;
    save_lcn(&model_dir, &outcome.model, Some(&outcome.optimizer), &save_opts(&r, resolution, iterations))?;

    let pairs: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| Ok((outcome.model.forward(&s.image)?.count(), s.gt.count())))
        .collect::<tancount_core::Result<_>>()?;
    let report = TrainReport {
        model: "lcn",
        samples: samples.len(),
        iterations,
        final_loss: outcome.losses.last().copied(),
        mean_gt_count: pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64,
        train_mae: pairs.iter().map(|p| (p.0 - p.1).abs()).sum::<f64>() / pairs.len() as f64,
        center_frame_mae: None,
    };
    write_json(&out.join("train_report.json"), &r.stamp(&report)?)?;
    println!(
        "lcn: {} iterations on {} samples; train MAE {:.4} (mean count {:.2}); model in {}",
        iterations,
        report.samples,
        report.train_mae,
        report.mean_gt_count,
        model_dir.display()
    );
    Ok(())
}

pub fn run_tan(g: &Globals, args: TanArgs) -> Result<()> {
    let r = g.resolve::<TanRun>("train-tan", &args)?;
    let c = &r.value;
    let (Some(data), Some(out), Some(lcn_dir)) = (&c.data, &c.out, &c.lcn) else { bail!("train-tan needs --data, --lcn and --out") };
    let mode = sigma_mode(&c.sigma, c.beta, c.knn)?;
    let lcn: LcnModel<f32> = load_lcn(lcn_dir).with_context(|| format!("loading {}", lcn_dir.display()))?.model;
    let train = training_set(data, &c.split)?;
    let resolution = common_resolution(&train);
    let cfg = TanConfig {
        k: c.k,
        blocks: c.blocks,
        hidden: c.hidden,
        lambda: c.lambda,
        lr: c.lr,
        init_std: c.init_std,
        iterations: c.iters,
        batch_size: c.batch,
        seed: c.seed,
        checkpoint_every: c.checkpoint_every,
    };
    if c.joint {
        return run_joint(&r, lcn, &train, &cfg, &mode, resolution, out);
    }
    let mut samples = Vec::new();
    for seq in &train.sequences {
        samples.extend(tan_samples(seq, &lcn, c.k, &mode)?);
    }
    let (resume, start) = match &c.resume {
        None => (None, 0),
        Some(dir) => {
            let l = load_tan(dir).with_context(|| format!("resuming from {}", dir.display()))?;
            if (l.model.k, l.model.blocks.len()) != (c.k, c.blocks) {
                bail!("checkpoint {} has k={} and {} blocks, run asks for k={} and {}", dir.display(), l.model.k, l.model.blocks.len(), c.k, c.blocks);
            }
            let opt = l.optimizer.unwrap_or_else(|| OptimizerState::for_lengths(l.model.tensors().iter().map(|(_, t)| t.len())));
            (Some((l.model, opt)), l.manifest.iteration)
        }
    };
    fs::create_dir_all(out)?;
    let model_dir = out.join("model");
    let mut log = loss_log(out, c.resume.is_some())?;
    let mut side_err: Option<anyhow::Error> = None;
    let result = tan_train(&samples, &cfg, resume, |ev| {
        let res = match ev {
            TrainEvent::Step { iteration, loss } => {
                serde_json::to_writer(&mut log, &LossRecord { iteration: start + iteration, loss }).map_err(Into::into).and_then(|_| log.write_all(b"\n").map_err(Into::into))
            }
            TrainEvent::Checkpoint { iteration, model, optimizer } => {
                let dir = out.join("checkpoints").join(format!("iter_{:06}", start + iteration));
                save_tan(&dir, model, Some(optimizer), &save_opts(&r, resolution, start + iteration)).map(|_| ()).map_err(Into::into)
            }
            TrainEvent::Diverged { iteration, last_good } => {
                eprintln!("train-tan: loss is not finite at iteration {}; keeping the last good model in {}", start + iteration, model_dir.display());
                save_tan(&model_dir, last_good, None, &save_opts(&r, resolution, start + iteration - 1)).map(|_| ()).map_err(Into::into)
            }
        };
        if let (Err(e), None) = (res, &side_err) {
            side_err = Some(e);
        }
    });
    log.flush()?;
    if let Some(e) = side_err {
        return Err(e);
    }
    let outcome = result?;
    let tan: &TanModel<f32> = &outcome.model;
    let iterations = start + c.iters;
    save_tan(&model_dir, tan, Some(&outcome.optimizer), &save_opts(&r, resolution, iterations))?;

    let triples: Vec<(f64, f64, f64)> = samples
        .par_iter()
        .map(|s| Ok((tan_forward_maps(&s.window, tan)?.count, s.window.maps[s.window.k()].count(), s.gt.count())))
        .collect::<tancount_core::Result<_>>()?;
    let n = triples.len().max(1) as f64;
    let report = TrainReport {
        model: "tan",
        samples: samples.len(),
        iterations,
        final_loss: outcome.losses.last().copied(),
        mean_gt_count: triples.iter().map(|t| t.2).sum::<f64>() / n,
        train_mae: triples.iter().map(|t| (t.0 - t.2).abs()).sum::<f64>() / n,
        center_frame_mae: Some(triples.iter().map(|t| (t.1 - t.2).abs()).sum::<f64>() / n),
    };
    write_json(&out.join("train_report.json"), &r.stamp(&report)?)?;
    println!(
        "tan: {} iterations on {} windows; train MAE {:.4} (centre frame alone {:.4}); model in {}",
        iterations,
        report.samples,
        report.train_mae,
        report.center_frame_mae.unwrap_or(f64::NAN),
        model_dir.display()
    );
    Ok(())
}

/// `--joint`: both networks train; the counting network lands in `out/lcn_model`.
fn run_joint(r: &Resolved<TanRun>, lcn: LcnModel<f32>, train: &Dataset, cfg: &TanConfig, mode: &SigmaMode, resolution: Option<[usize; 2]>, out: &Path) -> Result<()> {
    let c = &r.value;
    if c.resume.is_some() {
        bail!("--resume is not supported with --joint");
    }
    let mut samples = Vec::new();
    for seq in &train.sequences {
        samples.extend(joint_samples(seq, c.k, mode)?);
    }
    let start = JointModel { lcn, tan: TanModel::from_config(cfg)? };
    fs::create_dir_all(out)?;
    let model_dir = out.join("model");
    let lcn_dir = out.join("lcn_model");
    let save = |dir: &Path, m: &JointModel, opt: Option<&OptimizerState>, iteration: usize| -> Result<()> {
        let (lo, to) = match opt {
            Some(o) => {
                let (a, b) = o.tensors.split_at(m.lcn_tensors());
                (Some(OptimizerState { tensors: a.to_vec() }), Some(OptimizerState { tensors: b.to_vec() }))
            }
            None => (None, None),
        };
        save_lcn(&dir.join("lcn"), &m.lcn, lo.as_ref(), &save_opts(r, resolution, iteration))?;
        save_tan(&dir.join("tan"), &m.tan, to.as_ref(), &save_opts(r, resolution, iteration))?;
        Ok(())
    };
    let mut log = loss_log(out, false)?;
    let mut side_err: Option<anyhow::Error> = None;
    let result = joint_train(&samples, cfg, c.lcn_lr, start, None, |ev| {
        let res = match ev {
            TrainEvent::Step { iteration, loss } => {
                serde_json::to_writer(&mut log, &LossRecord { iteration, loss }).map_err(Into::into).and_then(|_| log.write_all(b"\n").map_err(Into::into))
            }
            TrainEvent::Checkpoint { iteration, model, optimizer } => save(&out.join("checkpoints").join(format!("iter_{iteration:06}")), model, Some(optimizer), iteration),
            TrainEvent::Diverged { iteration, last_good } => {
                eprintln!("train-tan: loss is not finite at iteration {iteration}; keeping the last good models in {} and {}", model_dir.display(), lcn_dir.display());
                save_tan(&model_dir, &last_good.tan, None, &save_opts(r, resolution, iteration - 1))
                    .and_then(|_| save_lcn(&lcn_dir, &last_good.lcn, None, &save_opts(r, resolution, iteration - 1)))
                    .map(|_| ())
                    .map_err(Into::into)
            }
        };
        if let (Err(e), None) = (res, &side_err) {
            side_err = Some(e);
        }
    });
    log.flush()?;
    if let Some(e) = side_err {
        return Err(e);
    }
    let outcome = result?;
    let (lo, to) = outcome.optimizer.tensors.split_at(outcome.model.lcn_tensors());
    save_tan(&model_dir, &outcome.model.tan, Some(&OptimizerState { tensors: to.to_vec() }), &save_opts(r, resolution, c.iters))?;
    save_lcn(&lcn_dir, &outcome.model.lcn, Some(&OptimizerState { tensors: lo.to_vec() }), &save_opts(r, resolution, c.iters))?;

    let m = &outcome.model;
    let triples: Vec<(f64, f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let maps = s.frames.iter().map(|f| Ok(masked(m.lcn.forward(f)?, s.roi.as_ref()))).collect::<tancount_core::Result<Vec<_>>>()?;
            let window = FrameWindow::new(maps, c.k)?;
            Ok((tan_forward_maps(&window, &m.tan)?.count, window.maps[c.k].count(), s.gt.count()))
        })
        .collect::<tancount_core::Result<_>>()?;
    let n = triples.len().max(1) as f64;
    let report = TrainReport {
        model: "joint",
        samples: samples.len(),
        iterations: c.iters,
        final_loss: outcome.losses.last().copied(),
        mean_gt_count: triples.iter().map(|t| t.2).sum::<f64>() / n,
        train_mae: triples.iter().map(|t| (t.0 - t.2).abs()).sum::<f64>() / n,
        center_frame_mae: Some(triples.iter().map(|t| (t.1 - t.2).abs()).sum::<f64>() / n),
    };
    write_json(&out.join("train_report.json"), &r.stamp(&report)?)?;
    println!(
        "joint: {} iterations on {} windows; train MAE {:.4} (centre frame alone {:.4}); models in {} and {}",
        c.iters,
        report.samples,
        report.train_mae,
        report.center_frame_mae.unwrap_or(f64::NAN),
        model_dir.display(),
        lcn_dir.display()
    );
    Ok(())
}

fn masked(mut map: DensityMap<f32>, mask: Option<&Tensor<f32>>) -> DensityMap<f32> {
    if let Some(mask) = mask {
        map.grid.data_mut().iter_mut().zip(mask.data()).for_each(|(v, m)| *v *= m);
    }
    map
}
