//! Experiment configuration: a TOML tree describing the data, the shared
//! pretrain run and a sweep of continual-training entries.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use morec::dataset::LoadOptions;
use morec::synth::SynthConfig;
use morec::trainer::{BackboneConfig, CoordinatorMode, PretrainConfig, TargetLoss, TrainConfig};

use crate::RunError;

/// Hex characters kept from a SHA-256 digest.
const DIGEST_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Overrides the `seed` fields of `pretrain` and `train`.
    #[serde(default)]
    pub seed: u64,
    /// Relative to the config file; `--out` is relative to the working
    /// directory.
    pub out_dir: PathBuf,
    /// Where pretrained bases are cached; defaults to `<out_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Template for every sweep entry.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: Vec<SweepEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Generate data instead of reading files.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    /// Interaction TSV; requires `metadata`.
    #[serde(default)]
    pub interactions: Option<PathBuf>,
    /// `item  category  price` TSV.
    #[serde(default)]
    pub metadata: Option<PathBuf>,
    #[serde(default)]
    pub metadata_header: bool,
    #[serde(default)]
    pub load: LoadOptions,
    #[serde(default = "default_kcore")]
    pub kcore: usize,
    #[serde(default = "default_buckets")]
    pub n_buckets: usize,
}

fn default_kcore() -> usize {
    5
}

fn default_buckets() -> usize {
    10
}

/// One continual-training run. Unset fields fall back to `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    #[serde(default)]
    pub label: Option<String>,
    pub rho: Vec<f64>,
    #[serde(default)]
    pub target_loss: Option<TargetLoss>,
    #[serde(default)]
    pub mode: Option<CoordinatorMode>,
}

/// Command-line overrides applied after parsing.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn short_digest(value: &impl Serialize) -> String {
    // serde_json::Value maps are sorted, which makes the encoding canonical.
    let v = serde_json::to_value(value).expect("config values serialize");
    let text = serde_json::to_string(&v).expect("json values serialize");
    sha256_hex(text.as_bytes())[..DIGEST_LEN].to_string()
}

fn file_digest(path: &Path) -> Result<String, RunError> {
    let bytes = fs::read(path).map_err(|e| RunError::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

impl ExperimentConfig {
    /// Parses `path`, resolves relative paths in it against its directory
    /// and applies `overrides`. Does not validate.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, RunError> {
        let text =
            fs::read_to_string(path).map_err(|e| RunError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| RunError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let relative = [&mut cfg.data.interactions, &mut cfg.data.metadata, &mut cfg.cache_dir];
        for p in relative.into_iter().flatten().chain([&mut cfg.out_dir]) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out_dir {
            cfg.out_dir = out.clone();
        }
        cfg.pretrain.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Collects every problem instead of stopping at the first one.
    pub fn validate(&self) -> Result<(), RunError> {
        let mut errs = Vec::new();
        let d = &self.data;
        match (&d.synth, &d.interactions, &d.metadata) {
            (Some(s), None, None) => {
                if let Err(e) = s.validate() {
                    errs.push(format!("data.synth: {e}"));
                }
            }
            (None, Some(i), Some(m)) => {
                for p in [i, m] {
                    if !p.is_file() {
                        errs.push(format!("data file {} does not exist", p.display()));
                    }
                }
            }
            (None, Some(_), None) => errs.push("data.interactions needs data.metadata".into()),
            _ => errs.push("set exactly one of data.synth or data.interactions + data.metadata".into()),
        }
        if d.kcore == 0 {
            errs.push("data.kcore must be >= 1".into());
        }
        if d.n_buckets == 0 {
            errs.push("data.n_buckets must be >= 1".into());
        }
        if self.backbone.dim == 0 {
            errs.push("backbone.dim must be >= 1".into());
        }
        if let Err(e) = self.pretrain.validate() {
            errs.push(format!("pretrain: {e}"));
        }
        if self.sweep.is_empty() {
            errs.push("sweep must contain at least one entry".into());
        }
        let mut labels = BTreeSet::new();
        for i in 0..self.sweep.len() {
            let (label, tc) = self.entry(i);
            if label == "base" || !labels.insert(label.clone()) {
                errs.push(format!("sweep[{i}]: label `{label}` is reserved or repeated"));
            }
            if !label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                errs.push(format!("sweep[{i}]: label `{label}` may only use [A-Za-z0-9._-]"));
            }
            if let Err(e) = tc.validate() {
                errs.push(format!("sweep[{i}] ({label}): {e}"));
            }
            let (TargetLoss::Auto { scale: t } | TargetLoss::Fixed(t)) = tc.target_loss;
            if !(t > 0.0 && t.is_finite()) {
                errs.push(format!("sweep[{i}]: target loss (or its scale) must be finite and > 0"));
            }
        }
        if let Err(e) = check_writable(&self.out_dir) {
            errs.push(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(RunError::Config(errs))
        }
    }

    /// Label and full training config of sweep entry `i`.
    pub fn entry(&self, i: usize) -> (String, TrainConfig) {
        let e = &self.sweep[i];
        let mut tc = self.train.clone();
        tc.preference.rho = e.rho.clone();
        if let Some(t) = e.target_loss {
            tc.target_loss = t;
        }
        if let Some(m) = &e.mode {
            tc.mode = m.clone();
        }
        let label = e.label.clone().unwrap_or_else(|| {
            let mode = match tc.mode {
                CoordinatorMode::Pi => "pi",
                CoordinatorMode::Static { .. } => "static",
            };
            let rho: Vec<String> = e.rho.iter().map(|r| format!("{r}")).collect();
            format!("{i:02}-{mode}-{}", rho.join("_"))
        });
        (label, tc)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    /// Digest of everything that affects the results. The output and cache
    /// locations are left out.
    pub fn digest(&self) -> Result<String, RunError> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("out_dir");
        obj.remove("cache_dir");
        obj.insert("data_files".into(), serde_json::to_value(self.data_file_digests()?).expect("strings"));
        Ok(short_digest(&v))
    }

    /// Key of the pretrained base: data, backbone and pretrain settings only,
    /// so every sweep over the same base shares one cache entry.
    pub fn pretrain_key(&self) -> Result<String, RunError> {
        #[derive(Serialize)]
        struct Key<'a> {
            data: &'a DataConfig,
            data_files: Vec<String>,
            backbone: &'a BackboneConfig,
            pretrain: &'a PretrainConfig,
        }
        let mut data = self.data.clone();
        data.interactions = None;
        data.metadata = None;
        Ok(short_digest(&Key {
            data: &data,
            data_files: self.data_file_digests()?,
            backbone: &self.backbone,
            pretrain: &self.pretrain,
        }))
    }

    fn data_file_digests(&self) -> Result<Vec<String>, RunError> {
        [&self.data.interactions, &self.data.metadata]
            .into_iter()
            .flatten()
            .map(|p| file_digest(p))
            .collect()
    }
}

fn check_writable(dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create output directory {}: {e}", dir.display()))?;
    let probe = dir.join(".morec-write-probe");
    fs::write(&probe, b"").map_err(|e| format!("output directory {} is not writable: {e}", dir.display()))?;
    let _ = fs::remove_file(probe);
    Ok(())
}
