//! Counting metrics and evaluation reports.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{make_window, Dataset, Sequence};
use crate::density::{apply_roi, apply_roi_image, RoiMask};
use crate::error::{Error, Result};
use crate::lcn::LcnModel;
use crate::stream::StreamingCounter;
use crate::tan::TanModel;

fn check_pairs(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("metrics need at least one prediction"));
    }
    if preds.len() != gts.len() {
        return Err(Error::shape("metric", format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    Ok(())
}

/// Mean absolute count error.
pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pairs(preds, gts)?;
    Ok(preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).sum::<f64>() / preds.len() as f64)
}

/// Root of the mean squared count error; reported under the name "MSE" as
/// is conventional in crowd counting.
pub fn mse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_pairs(preds, gts)?;
    Ok((preds.iter().zip(gts).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / preds.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub sequence: String,
    pub frame: String,
    pub pred: f64,
    pub gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub name: String,
    pub frames: usize,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub config_hash: String,
    pub mae: f64,
    pub mse: f64,
    pub per_scene: Vec<SceneResult>,
    pub frames: Vec<FrameResult>,
}

/// Source of per-frame count predictions.
pub enum Predictor<'a> {
    /// Counting network on each frame alone.
    SingleFrame(&'a LcnModel<f32>),
    /// Counting network followed by temporal fusion.
    Temporal { lcn: &'a LcnModel<f32>, tan: &'a TanModel<f32> },
    /// Plain mean of the network counts over a `2k + 1` window.
    UniformAverage { lcn: &'a LcnModel<f32>, k: usize },
    /// Precomputed counts keyed by `(sequence, frame)`.
    Counts(&'a HashMap<(String, String), f64>),
    /// The ground truth itself.
    Oracle,
    Zero,
}

/// Annotated heads inside the region, or all of them without one.
pub fn gt_count(points: &[[f64; 2]], roi: Option<&RoiMask>) -> f64 {
    match roi {
        None => points.len() as f64,
        Some(r) => points
            .iter()
            .filter(|p| {
                let (x, y) = (p[0] as usize, p[1] as usize);
                x < r.width() && y < r.height() && r.values()[y * r.width() + x] == 1
            })
            .count() as f64,
    }
}

fn single_counts(seq: &Sequence, lcn: &LcnModel<f32>) -> Result<Vec<f64>> {
    seq.frames
        .par_iter()
        .map(|f| {
            let mut img = f.image()?;
            if let Some(r) = &seq.roi {
                img = apply_roi_image(&img, r)?;
            }
            let mut map = lcn.forward(&img)?;
            if let Some(r) = &seq.roi {
                map = apply_roi(&map, r)?;
            }
            Ok(map.count())
        })
        .collect()
}

/// Per-frame predicted counts for one sequence.
pub fn predict_sequence(seq: &Sequence, predictor: &Predictor<'_>) -> Result<Vec<f64>> {
    let roi = seq.roi.as_ref();
    match predictor {
        Predictor::SingleFrame(lcn) => single_counts(seq, lcn),
        Predictor::UniformAverage { lcn, k } => {
            let c = single_counts(seq, lcn)?;
            (0..c.len())
                .map(|t| Ok(make_window(c.len(), t, *k)?.iter().map(|&i| c[i]).sum::<f64>() / (2 * k + 1) as f64))
                .collect()
        }
        Predictor::Temporal { lcn, tan } => {
            let mut counter = StreamingCounter::new(lcn, Some(tan)).with_roi(seq.roi.clone());
            let mut out = Vec::with_capacity(seq.len());
            for f in &seq.frames {
                out.extend(counter.push(&f.image()?)?.map(|c| c.count));
            }
            out.extend(counter.finish()?.into_iter().map(|c| c.count));
            Ok(out)
        }
        Predictor::Counts(table) => seq
            .frames
            .iter()
            .map(|f| {
                table
                    .get(&(seq.name.clone(), f.name.clone()))
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("no count for {}/{}", seq.name, f.name)))
            })
            .collect(),
        Predictor::Oracle => Ok(seq.frames.iter().map(|f| gt_count(&f.annotations.points, roi)).collect()),
        Predictor::Zero => Ok(vec![0.0; seq.len()]),
    }
}

/// Evaluates `predictor` on every frame of `ds`.
pub fn evaluate(ds: &Dataset, predictor: &Predictor<'_>, model_id: &str, config_hash: &str) -> Result<EvalReport> {
    let mut frames = Vec::new();
    let mut per_scene = Vec::new();
    for seq in &ds.sequences {
        if seq.is_empty() {
            continue;
        }
        let preds = predict_sequence(seq, predictor)?;
        let gts: Vec<f64> = seq.frames.iter().map(|f| gt_count(&f.annotations.points, seq.roi.as_ref())).collect();
        per_scene.push(SceneResult { name: seq.name.clone(), frames: preds.len(), mae: mae(&preds, &gts)?, mse: mse(&preds, &gts)? });
        for ((f, p), g) in seq.frames.iter().zip(preds).zip(gts) {
            frames.push(FrameResult { sequence: seq.name.clone(), frame: f.name.clone(), pred: p, gt: g });
        }
    }
    let preds: Vec<f64> = frames.iter().map(|f| f.pred).collect();
    let gts: Vec<f64> = frames.iter().map(|f| f.gt).collect();
    Ok(EvalReport {
        model_id: model_id.to_string(),
        config_hash: config_hash.to_string(),
        mae: mae(&preds, &gts)?,
        mse: mse(&preds, &gts)?,
        per_scene,
        frames,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub lcn: usize,
    pub tan: usize,
    pub combined: usize,
}

pub fn count_params(lcn: &LcnModel<f32>, tan: Option<&TanModel<f32>>) -> ParamReport {
    let l = lcn.param_count();
    let t = tan.map_or(0, |t| t.param_count());
    ParamReport { lcn: l, tan: t, combined: l + t }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_video, SynthSpec};

    #[test]
    fn metric_examples() {
        assert_eq!(mae(&[10.0, 20.0], &[12.0, 16.0]).unwrap(), 3.0);
        assert!((mse(&[10.0, 20.0], &[12.0, 16.0]).unwrap() - 10f64.sqrt()).abs() < 1e-15);
        assert_eq!(mse(&[7.0], &[2.0]).unwrap(), 5.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(mae(&[], &[]).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn oracle_and_zero_predictors() {
        let ds = synth_video(&SynthSpec { walkers: 5, frames: 6, width: 48, height: 40, ..Default::default() });
        let r = evaluate(&ds, &Predictor::Oracle, "oracle", "").unwrap();
        assert_eq!((r.mae, r.mse), (0.0, 0.0));
        let r = evaluate(&ds, &Predictor::Zero, "zero", "").unwrap();
        assert_eq!(r.mae, 5.0);
        assert_eq!(r.frames.len(), 6);
    }

    #[test]
    fn counts_table_lookup() {
        let ds = synth_video(&SynthSpec { walkers: 3, frames: 2, width: 32, height: 32, ..Default::default() });
        let mut table = HashMap::new();
        table.insert(("seq0".to_string(), "000000.png".to_string()), 3.0);
        assert!(evaluate(&ds, &Predictor::Counts(&table), "t", "").is_err());
        table.insert(("seq0".to_string(), "000001.png".to_string()), 4.0);
        assert_eq!(evaluate(&ds, &Predictor::Counts(&table), "t", "").unwrap().mae, 0.5);
    }

    #[test]
    fn roi_restricts_ground_truth() {
        let roi = RoiMask::new(vec![1, 0, 1, 1], 2, 2).unwrap();
        assert_eq!(gt_count(&[[0.5, 0.5], [1.2, 0.9], [1.9, 1.9]], Some(&roi)), 2.0);
    }

    #[test]
    fn parameter_report() {
        let r = count_params(&LcnModel::zeros(3), Some(&TanModel::zeros(2, 3, 20)));
        assert_eq!(r, ParamReport { lcn: 32_641, tan: 14_943, combined: 47_584 });
    }
}
