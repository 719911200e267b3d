//! TOML run configuration: sections, defaults, and conversion into the core
//! trainer's [`RunConfig`]. Unknown keys are rejected to catch typos.

use std::path::{Path, PathBuf};

use glrec::distill::LossWeights;
use glrec::trainer::RunConfig;
use glrec::Error;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSection,
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Single interactions TSV, split by the ratios below.
    pub interactions: Option<PathBuf>,
    /// Directory holding pre-split train.tsv / valid.tsv / test.tsv.
    pub presplit_dir: Option<PathBuf>,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    #[serde(default = "default_valid_ratio")]
    pub valid_ratio: f64,
    #[serde(default = "default_test_ratio")]
    pub test_ratio: f64,
}

fn default_train_ratio() -> f64 {
    0.7
}
fn default_valid_ratio() -> f64 {
    0.05
}
fn default_test_ratio() -> f64 {
    0.25
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub teacher_layers: usize,
    pub student_layers: usize,
    pub leaky_slope: f64,
    pub layer_average: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = RunConfig::default();
        ModelSection {
            dim: d.dim,
            teacher_layers: d.teacher_layers,
            student_layers: d.student_layers,
            leaky_slope: d.leaky_slope,
            layer_average: d.layer_average,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    pub epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub learning_rate: f64,
    pub plain_sgd: bool,
    pub bpr_batch: usize,
    pub t1_batch: usize,
    pub t2_batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = RunConfig::default();
        TrainSection {
            seed: d.seed,
            epochs: d.epochs,
            patience: d.patience,
            eval_every: d.eval_every,
            learning_rate: d.learning_rate,
            plain_sgd: d.plain_sgd,
            bpr_batch: d.bpr_batch,
            t1_batch: d.t1_batch,
            t2_batch: d.t2_batch,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda_t: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub epsilon: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            lambda_t: w.lambda_t,
            tau1: w.tau1,
            tau2: w.tau2,
            tau3: w.tau3,
            epsilon: w.epsilon,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<(Self, String), Error> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.data.interactions.is_none() && cfg.data.presplit_dir.is_none() {
            return Err(Error::Config(
                "config needs data.interactions or data.presplit_dir".into(),
            ));
        }
        if cfg.data.interactions.is_some() && cfg.data.presplit_dir.is_some() {
            return Err(Error::Config(
                "data.interactions and data.presplit_dir are mutually exclusive".into(),
            ));
        }
        Ok((cfg, config_hash(&text)))
    }

    pub fn run_config(&self) -> Result<RunConfig, Error> {
        let cfg = RunConfig {
            dim: self.model.dim,
            teacher_layers: self.model.teacher_layers,
            student_layers: self.model.student_layers,
            leaky_slope: self.model.leaky_slope,
            layer_average: self.model.layer_average,
            seed: self.train.seed,
            epochs: self.train.epochs,
            patience: self.train.patience,
            eval_every: self.train.eval_every,
            learning_rate: self.train.learning_rate,
            plain_sgd: self.train.plain_sgd,
            bpr_batch: self.train.bpr_batch,
            t1_batch: self.train.t1_batch,
            t2_batch: self.train.t2_batch,
            weights: LossWeights {
                lambda1: self.loss.lambda1,
                lambda2: self.loss.lambda2,
                lambda3: self.loss.lambda3,
                lambda4: self.loss.lambda4,
                lambda_t: self.loss.lambda_t,
                tau1: self.loss.tau1,
                tau2: self.loss.tau2,
                tau3: self.loss.tau3,
                epsilon: self.loss.epsilon,
                eta: self.train.learning_rate,
                max_epochs: self.train.epochs,
            },
            disable_l1: false,
            disable_l2: false,
            disable_l3: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// FNV-1a hash of the raw config text, hex-encoded.
pub fn config_hash(text: &str) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg: FileConfig = toml::from_str(
            "[data]\ninteractions = \"x.tsv\"\n[output]\ndir = \"out\"\n",
        )
        .unwrap();
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.train.t1_batch, 100_000);
        assert_eq!(cfg.train.t2_batch, 4096);
        assert!((cfg.loss.epsilon - 0.2).abs() < 1e-12);
        assert!(cfg.run_config().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<FileConfig>(
            "[data]\ninteractions = \"x.tsv\"\nbogus = 1\n[output]\ndir = \"out\"\n",
        );
        assert!(err.is_err());
    }

    #[test]
    fn out_of_range_values_rejected() {
        let cfg: FileConfig = toml::from_str(
            "[data]\ninteractions = \"x.tsv\"\n[loss]\nepsilon = 1.5\n[output]\ndir = \"out\"\n",
        )
        .unwrap();
        assert!(cfg.run_config().is_err());
    }

    #[test]
    fn hash_is_stable_and_text_sensitive() {
        let a = config_hash("abc");
        assert_eq!(a, config_hash("abc"));
        assert_ne!(a, config_hash("abd"));
    }
}
