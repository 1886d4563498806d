use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::sru::SruConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in epochs; may be fractional.
    pub warmup_epochs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without a dev improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub encoder_optimizer: OptimizerConfig,
    pub head_optimizer: OptimizerConfig,
    /// Also score the training split at the end of every epoch.
    pub eval_train: bool,
    /// Stop as soon as the selection F1 reaches this value.
    pub target_f1: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 3e-4, weight_decay: 1e-3, warmup_epochs: 0.5 }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            patience: 30,
            batch_size: 16,
            clip_norm: 1.0,
            betas: (0.9, 0.98),
            eps: 1e-6,
            encoder_optimizer: OptimizerConfig { lr: 2e-5, weight_decay: 1e-3, warmup_epochs: 1.0 },
            head_optimizer: OptimizerConfig::default(),
            eval_train: false,
            target_f1: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Bio,
    Nested,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub format: CorpusFormat,
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Declared entity types; inferred from the training split when absent.
    #[serde(default)]
    pub types: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub sru: SruConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub datasets: Vec<DatasetConfig>,
    pub run_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 13,
            encoder: EncoderConfig::default(),
            sru: SruConfig::default(),
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            datasets: Vec::new(),
            run_dir: None,
        }
    }
}

impl Config {
    /// Hyperparameters used for single-task nested corpora.
    pub fn nested_preset() -> Self {
        let mut c = Self { sru: SruConfig::nested_preset(), ..Self::default() };
        c.train.encoder_optimizer.lr = 3e-5;
        c
    }

    /// Reads a JSON config; relative corpus and model paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Config = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut self.datasets {
            fix(&mut d.train);
            d.dev.as_mut().map(fix);
            d.test.as_mut().map(fix);
        }
        self.encoder.path.as_mut().map(fix);
        self.run_dir.as_mut().map(fix);
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(t.clip_norm > 0.0) {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        for (name, rate) in [
            ("sru.dropout_pos", self.sru.dropout_pos),
            ("sru.dropout_latent", self.sru.dropout_latent),
            ("generator.dropout_logits", self.generator.dropout_logits),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.encoder.d_enc < 2 {
            return Err(Error::Config("encoder.d_enc must be at least 2".into()));
        }
        Ok(())
    }
}
