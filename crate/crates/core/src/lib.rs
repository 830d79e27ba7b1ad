//! A small convolutional network engine and a face-recognition data and
//! training pipeline built on it.
//!
//! Tensors are dense and row-major, every backward pass is written by hand,
//! and all randomness comes from keyed streams so runs are reproducible.

pub mod checkpoint;
pub mod datapipe;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMetadata};
pub use error::{Error, Result};
pub use layers::{Layer, LayerSpec, Mode, ParamSlot};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use models::{adapt_for_transfer, build_badnet, build_woodnet, init_weights, Network, NetworkSpec, WoodNetConfig};
pub use optim::{cross_entropy, softmax, Adam, AdamConfig, Optimizer, OptimizerKind, Sgd};
pub use tensor::{Element, Tensor};
pub use train::{evaluate_split, format_epoch_log, run_training, Dataset, EpochStats, InMemoryDataset, Phase, TrainConfig};
