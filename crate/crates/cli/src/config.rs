//! Layered run configuration: built-in defaults, then a JSON config file,
//! then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use tancount_core::dataio::SplitSpec;
use tancount_core::density::{DEFAULT_BETA, DEFAULT_KNN, DEFAULT_FIXED_SIGMA};
use tancount_core::SigmaMode;

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct Globals {
    pub config: Option<Value>,
    pub seed: Option<u64>,
    pub no_timestamp: bool,
}

impl Globals {
    pub fn load(path: Option<&Path>, seed: Option<u64>, no_timestamp: bool) -> Result<Self> {
        let config = match path {
            None => None,
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                if !v.is_object() {
                    bail!("config {} must hold a JSON object", p.display());
                }
                Some(v)
            }
        };
        Ok(Globals { config, seed, no_timestamp })
    }

    /// Resolves `T` from its defaults, the config file, the non-null fields
    /// of `flags` and the global seed. Only keys `T` knows about are taken from the file,
    /// so one file can serve several commands.
    pub fn resolve<T>(&self, command: &str, flags: &impl Serialize) -> Result<Resolved<T>>
    where
        T: Default + Serialize + DeserializeOwned,
    {
        let defaults = serde_json::to_value(T::default())?;
        eprintln!("{command}: defaults {}", serde_json::to_string(&defaults)?);
        let mut merged = defaults;
        if let Some(Value::Object(file)) = &self.config {
            overlay(&mut merged, file);
        }
        if let Value::Object(cli) = serde_json::to_value(flags)? {
            overlay(&mut merged, &cli);
        }
        if let Some(seed) = self.seed {
            overlay(&mut merged, &Map::from_iter([("seed".to_string(), seed.into())]));
        }
        let value: T = serde_json::from_value(merged.clone()).with_context(|| format!("{command}: invalid configuration"))?;
        // Round-trip so the recorded form is canonical.
        let effective = serde_json::to_value(&value)?;
        let hash = config_hash(&effective);
        eprintln!("{command}: effective {}", serde_json::to_string(&effective)?);
        Ok(Resolved { value, effective, hash, timestamp: self.timestamp() })
    }

    fn timestamp(&self) -> Option<u64> {
        if self.no_timestamp {
            return None;
        }
        SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs())
    }
}

fn overlay(dst: &mut Value, src: &Map<String, Value>) {
    let Value::Object(dst) = dst else { return };
    for (k, v) in src {
        if v.is_null() {
            continue;
        }
        if let Some(slot) = dst.get_mut(k) {
            match (slot.is_object(), v) {
                (true, Value::Object(inner)) if !inner.contains_key("scheme") => overlay(slot, inner),
                _ => *slot = v.clone(),
            }
        }
    }
}

pub fn config_hash(v: &Value) -> String {
    let digest = Sha256::digest(v.to_string().as_bytes());
    format!("{digest:x}")[..16].to_string()
}

/// A resolved configuration and what gets stamped into reports.
#[derive(Debug, Clone)]
pub struct Resolved<T> {
    pub value: T,
    pub effective: Value,
    pub hash: String,
    pub timestamp: Option<u64>,
}

impl<T> Resolved<T> {
    /// `report` with the run configuration, its hash and the timestamp added.
    pub fn stamp(&self, report: &impl Serialize) -> Result<Value> {
        let mut v = serde_json::to_value(report)?;
        let obj = v.as_object_mut().ok_or_else(|| anyhow!("report must serialize to an object"))?;
        obj.insert("config".into(), self.effective.clone());
        obj.insert("config_hash".into(), Value::String(self.hash.clone()));
        if let Some(ts) = self.timestamp {
            obj.insert("timestamp".into(), ts.into());
        }
        Ok(v)
    }
}

pub fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `fixed:<sigma>`, `fixed` or `adaptive`.
pub fn sigma_mode(spec: &str, beta: f64, knn: usize) -> Result<SigmaMode> {
    let (kind, arg) = spec.split_once(':').map_or((spec, None), |(a, b)| (a, Some(b)));
    match (kind, arg) {
        ("fixed", None) => Ok(SigmaMode::Fixed { sigma: DEFAULT_FIXED_SIGMA }),
        ("fixed", Some(s)) => {
            let sigma: f64 = s.parse().map_err(|_| anyhow!("bad sigma {s:?} in --sigma {spec}"))?;
            if !(sigma > 0.0) {
                bail!("--sigma {spec}: sigma must be positive");
            }
            Ok(SigmaMode::Fixed { sigma })
        }
        ("adaptive", None) => Ok(SigmaMode::Adaptive { beta, knn, fallback: DEFAULT_FIXED_SIGMA }),
        _ => bail!("--sigma must be fixed:<sigma>, fixed or adaptive, got {spec:?}"),
    }
}

pub fn default_sigma() -> String {
    format!("fixed:{DEFAULT_FIXED_SIGMA}")
}

pub fn default_beta() -> f64 {
    DEFAULT_BETA
}

pub fn default_knn() -> usize {
    DEFAULT_KNN
}

/// A built-in split name or a JSON file holding a [`SplitSpec`].
pub fn split_spec(name: &str) -> Result<SplitSpec> {
    if let Some(s) = SplitSpec::builtin(name) {
        return Ok(s);
    }
    let path = PathBuf::from(name);
    if !path.is_file() {
        bail!("unknown split {name:?}: not a built-in (MALL_PAPER, UCSD_PAPER, ALL_TRAIN) and no such file");
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading split {}", path.display()))?;
    let spec: SplitSpec = serde_json::from_str(&text).with_context(|| format!("parsing split {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}

/// `WIDTHxHEIGHT`.
pub fn parse_resolution(s: &str) -> Result<[usize; 2], String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err(format!("resolution must be positive, got {s:?}"));
    }
    Ok([w, h])
}

pub fn is_false(b: &bool) -> bool {
    !*b
}
