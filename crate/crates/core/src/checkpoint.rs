//! Model checkpoints: one tensor container per parameter plus a JSON manifest.
//!
//! ```text
//! dir/manifest.json
//! dir/<tensor name>.tan
//! dir/optim/<tensor name>.m.tan, .v.tan   (only when optimizer state is saved)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcn::{layer_shapes, LcnModel, OptimizerState};
use crate::optim::AdamState;
use crate::tan::{dilation, TanModel, LAYERS_PER_BLOCK};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lcn,
    Tan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    /// Counting network clamps its output map at zero.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamp_output: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilations: Option<Vec<usize>>,
    /// Frame size `[width, height]` the model was trained on, if fixed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<[usize; 2]>,
    /// Training iterations completed.
    #[serde(default)]
    pub iteration: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerEntry>,
    /// Free-form run configuration recorded by the caller.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Extra fields a caller may attach when saving.
#[derive(Debug, Clone, Default)]
pub struct SaveOptions {
    pub resolution: Option<[usize; 2]>,
    pub iteration: usize,
    pub config: Option<serde_json::Value>,
}

fn write_all(
    dir: &Path,
    mut manifest: Manifest,
    tensors: Vec<(String, &Tensor<f32>)>,
    optimizer: Option<&OptimizerState>,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    for (name, t) in &tensors {
        let file = format!("{name}.tan");
        t.save(dir.join(&file))?;
        manifest.tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), file });
    }
    if let Some(opt) = optimizer {
        if opt.tensors.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer tracks {} tensors, model has {}",
                opt.tensors.len(),
                tensors.len()
            )));
        }
        let odir = dir.join("optim");
        fs::create_dir_all(&odir)?;
        for ((name, t), st) in tensors.iter().zip(&opt.tensors) {
            Tensor::<f64>::from_vec(t.shape(), st.m.clone())?.save(odir.join(format!("{name}.m.tan")))?;
            Tensor::<f64>::from_vec(t.shape(), st.v.clone())?.save(odir.join(format!("{name}.v.tan")))?;
        }
        let first = opt.tensors.first();
        manifest.optimizer = Some(OptimizerEntry {
            step: opt.step(),
            beta1: first.map_or(crate::optim::DEFAULT_BETA1, |s| s.beta1),
            beta2: first.map_or(crate::optim::DEFAULT_BETA2, |s| s.beta2),
            epsilon: first.map_or(crate::optim::DEFAULT_EPSILON, |s| s.epsilon),
        });
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("{} not found", path.display())));
    }
    let m: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Checkpoint(format!("manifest version {} is not supported", m.version)));
    }
    Ok(m)
}

fn fill(dir: &Path, manifest: &Manifest, targets: Vec<(String, &mut Tensor<f32>)>) -> Result<Option<OptimizerState>> {
    if manifest.tensors.len() != targets.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            targets.len()
        )));
    }
    let mut states = Vec::new();
    for (entry, (name, slot)) in manifest.tensors.iter().zip(targets) {
        if entry.name != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, manifest has {}", entry.name)));
        }
        let t = Tensor::<f32>::load(dir.join(&entry.file))?;
        if t.shape() != slot.shape() || entry.shape != slot.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
        if let Some(o) = &manifest.optimizer {
            let odir = dir.join("optim");
            let m = Tensor::<f64>::load(odir.join(format!("{name}.m.tan")))?;
            let v = Tensor::<f64>::load(odir.join(format!("{name}.v.tan")))?;
            if m.len() != slot.len() || v.len() != slot.len() {
                return Err(Error::Checkpoint(format!("{name}: optimizer moments have the wrong length")));
            }
            states.push(AdamState {
                m: m.into_data(),
                v: v.into_data(),
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                epsilon: o.epsilon,
            });
        }
    }
    Ok(manifest.optimizer.as_ref().map(|_| OptimizerState { tensors: states }))
}

fn base(kind: ModelKind, opts: &SaveOptions) -> Manifest {
    Manifest {
        version: MANIFEST_VERSION,
        kind,
        in_channels: None,
        clamp_output: false,
        k: None,
        blocks: None,
        hidden: None,
        dilations: None,
        resolution: opts.resolution,
        iteration: opts.iteration,
        tensors: Vec::new(),
        optimizer: None,
        config: opts.config.clone(),
    }
}

pub fn save_lcn(dir: impl AsRef<Path>, model: &LcnModel<f32>, optimizer: Option<&OptimizerState>, opts: &SaveOptions) -> Result<Manifest> {
    let mut m = base(ModelKind::Lcn, opts);
    m.in_channels = Some(model.in_channels);
    m.clamp_output = model.clamp_output;
    write_all(dir.as_ref(), m, model.tensors(), optimizer)
}

pub fn save_tan(dir: impl AsRef<Path>, model: &TanModel<f32>, optimizer: Option<&OptimizerState>, opts: &SaveOptions) -> Result<Manifest> {
    let mut m = base(ModelKind::Tan, opts);
    m.k = Some(model.k);
    m.blocks = Some(model.blocks.len());
    m.hidden = Some(model.hidden);
    m.dilations = Some((1..=LAYERS_PER_BLOCK).map(dilation).collect());
    write_all(dir.as_ref(), m, model.tensors(), optimizer)
}

/// A loaded model with its manifest and, if saved, its optimizer state.
#[derive(Debug, Clone)]
pub struct Loaded<M> {
    pub model: M,
    pub optimizer: Option<OptimizerState>,
    pub manifest: Manifest,
}

pub fn load_lcn(dir: impl AsRef<Path>) -> Result<Loaded<LcnModel<f32>>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.kind != ModelKind::Lcn {
        return Err(Error::Checkpoint(format!("{} holds a {:?} model, not an LCN", dir.display(), manifest.kind)));
    }
    let in_channels = manifest.in_channels.unwrap_or(3);
    debug_assert_eq!(layer_shapes(in_channels).len(), crate::lcn::LAYERS.len());
    let mut model = LcnModel::zeros(in_channels);
    model.clamp_output = manifest.clamp_output;
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let optimizer = fill(dir, &manifest, names.into_iter().zip(model.tensors_mut()).collect())?;
    Ok(Loaded { model, optimizer, manifest })
}

pub fn load_tan(dir: impl AsRef<Path>) -> Result<Loaded<TanModel<f32>>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.kind != ModelKind::Tan {
        return Err(Error::Checkpoint(format!("{} holds a {:?} model, not a TAN", dir.display(), manifest.kind)));
    }
    let (Some(k), Some(blocks), Some(hidden)) = (manifest.k, manifest.blocks, manifest.hidden) else {
        return Err(Error::Checkpoint("TAN manifest must record k, blocks and hidden".into()));
    };
    let expected: Vec<usize> = (1..=LAYERS_PER_BLOCK).map(dilation).collect();
    if let Some(d) = &manifest.dilations {
        if d != &expected {
            return Err(Error::Checkpoint(format!("dilations {d:?} are not supported, expected {expected:?}")));
        }
    }
    let mut model = TanModel::zeros(k, blocks, hidden);
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let optimizer = fill(dir, &manifest, names.into_iter().zip(model.tensors_mut()).collect())?;
    Ok(Loaded { model, optimizer, manifest })
}
