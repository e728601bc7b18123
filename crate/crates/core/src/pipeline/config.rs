use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdamConfig;
use crate::data::{PatternParams, WindowConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::guide::CvaeConfig;
use crate::metrics::Selection;
use crate::mixture::EmConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureConfig {
    pub n_components: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub reg: f64,
    /// Guides drawn per training sample when building the mixture dataset.
    pub guides_per_sample: usize,
    /// Also fit the past-only baseline mixture.
    pub fit_baseline: bool,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        MixtureConfig {
            n_components: em.n_components,
            max_iter: em.max_iter,
            tol: em.tol,
            reg: em.reg,
            guides_per_sample: 1,
            fit_baseline: true,
        }
    }
}

impl MixtureConfig {
    pub fn em(&self, seed: u64) -> EmConfig {
        EmConfig {
            n_components: self.n_components,
            max_iter: self.max_iter,
            tol: self.tol,
            reg: self.reg,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub selection: Selection,
    pub timing_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 5,
            selection: Selection::Independent,
            timing_runs: 10,
        }
    }
}

/// Scene directories for each split; every `*.txt` file is one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: "data/train".into(),
            val: "data/val".into(),
            test: "data/test".into(),
        }
    }
}

/// Scene counts written by `gen-data`; scenes never straddle splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub agents_per_scene: usize,
    pub pattern: PatternParams,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_scenes: 8,
            val_scenes: 2,
            test_scenes: 4,
            agents_per_scene: 8,
            pattern: PatternParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed; every stochastic stage derives its own stream from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub window: WindowConfig,
    pub encoder: EncoderConfig,
    pub cvae: CvaeConfig,
    pub training: TrainConfig,
    pub mixture: MixtureConfig,
    pub evaluation: EvalConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: "out".into(),
            window: WindowConfig::default(),
            encoder: EncoderConfig::default(),
            cvae: CvaeConfig::default(),
            training: TrainConfig::default(),
            mixture: MixtureConfig::default(),
            evaluation: EvalConfig::default(),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Laptop-scale settings: 20 components, short training, strided windows.
    pub fn desk() -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.window.stride = 10;
        cfg.mixture.n_components = 20;
        cfg.mixture.reg = 1e-2;
        cfg.training.epochs = 20;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{:02x}", b)).collect())
    }

    /// Guide steps from the window geometry; a nonzero value in the CVAE
    /// section must agree.
    pub fn guide_steps(&self) -> usize {
        self.window.guide_steps()
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.encoder.validate()?;
        let mut cvae = self.cvae.clone();
        if cvae.guide_steps == 0 {
            cvae.guide_steps = self.guide_steps();
        }
        if cvae.guide_steps != self.guide_steps() {
            return Err(Error::Config(format!(
                "cvae.guide_steps = {} but the window has {} guide points",
                cvae.guide_steps,
                self.guide_steps()
            )));
        }
        cvae.validate()?;
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "training.learning_rate {} must be positive",
                t.learning_rate
            )));
        }
        self.mixture.em(self.seed).validate()?;
        if self.mixture.guides_per_sample == 0 {
            return Err(Error::Config("mixture.guides_per_sample must be positive".into()));
        }
        if self.evaluation.n_samples == 0 {
            return Err(Error::Config("evaluation.n_samples must be positive".into()));
        }
        self.synthetic.pattern.validate()?;
        Ok(())
    }

    /// CVAE settings with the guide count filled in from the window.
    pub fn cvae_config(&self) -> CvaeConfig {
        let mut c = self.cvae.clone();
        c.guide_steps = self.guide_steps();
        c
    }
}

/// Seed of a named stream derived from the master seed: the first eight
/// bytes, little-endian, of `SHA-256(master_seed_le || label)`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Independent generator for item `index` of a named stream. Items use
/// separate ChaCha streams, so results do not depend on processing order.
pub fn stream_rng(master: u64, label: &str, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(master, label));
    rng.set_stream(index);
    rng
}

/// Fail early when an input directory is missing.
pub fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{} directory {} does not exist",
            what,
            path.display()
        )))
    }
}
