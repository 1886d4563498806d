//! Multi-dataset training: label registry, gold matrices, sampling, loss,
//! optimizers and the epoch loop.

mod config;
mod gold;
mod loss;
mod optim;
mod registry;
mod sampler;
mod train;

pub use config::{Config, CorpusFormat, DatasetConfig, OptimizerConfig, TrainConfig};
pub use gold::{build_gold_matrix, pack_actions, GoldActionMatrix};
pub use loss::sample_loss;
pub use optim::AdamW;
pub use registry::{DatasetLabels, LabelRegistry, LABEL_SEPARATOR};
pub use sampler::DatasetSampler;
pub use train::{mean_loss, prepare_examples, registry_for, train, EpochLog, TrainOutcome, TrainingExample};
