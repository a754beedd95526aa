//! A small CPU convolutional network engine.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod init;
pub mod network;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{build_densenet, build_resnet, LayerSpec, ModelConfig, ModelFamily, Profile, Shape};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use init::he_init;
pub use network::{batch_from_images, Gradients, Mode, Network, Param, ParamStore, Tape};
pub use optim::{adam_step, sgd_momentum_step, Optimizer, OptimizerKind};
pub use scalar::Scalar;
pub use tensor::Tensor4;
pub use train::{evaluate, predict, train, train_observed, EpochMetrics, EvalReport, TrainConfig, TrainOutcome};
