//! Run configuration: everything one CLI command needs, loaded from JSON.
//!
//! A config file may name any subset of fields. Missing fields keep their
//! desk defaults (nested objects are merged key by key), unknown keys are
//! rejected, and every value is validated after loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bench::SceneSpec;
use crate::io::sha256_hex;
use crate::trainer::{TrainConfig, Variant};
use crate::{Error, Result};

/// Box-noise levels swept by default, as fractions of box height.
pub const DEFAULT_ALPHAS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub out_dir: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub alphas: Vec<f64>,
    pub scene: SceneSpec,
    /// Optimisation, prompt, loss, kernel and network settings. `train.seed`
    /// seeds initialisation and shuffling.
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ddag,
            out_dir: PathBuf::from("out"),
            n_train: 200,
            n_test: 50,
            alphas: DEFAULT_ALPHAS.to_vec(),
            scene: SceneSpec::default(),
            train: TrainConfig::desk(),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Parse a (possibly partial) JSON config over the defaults.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        if !patch.is_object() {
            return Err(Error::schema("$", "config must be a JSON object"));
        }
        let mut merged = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut merged, patch);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::schema("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument("n_train and n_test must be positive".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=0.5).contains(*a)) {
            return Err(Error::InvalidArgument(format!("alpha {a} outside [0, 0.5]")));
        }
        self.scene.validate()?;
        self.train.validate()
    }

    /// Canonical JSON of the resolved config. Field order is fixed by the
    /// struct, so the text does not depend on key order in the input file.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON with `out_dir` cleared: the same
    /// experiment written to two places hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(c.canonical_json().as_bytes())
    }
}
