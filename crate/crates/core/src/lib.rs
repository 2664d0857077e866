//! A convolutional network for 28x28 greyscale digit images, with every
//! layer's forward and backward pass, Adam training, evaluation metrics and a
//! binary model format written from scratch on top of a plain GEMM.

pub mod cli;
pub mod data;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod training;

pub use data::{load_csv, LabeledDataset, SplitDataset};
pub use metrics::{accuracy, confusion_matrix, ConfusionMatrix};
pub use model::{build_paper_model, load_model, save_model, NetworkModel};
pub use tensor::{Scalar, Tensor, TensorError};
pub use training::{fit, train_epoch, EpochMetrics, TrainConfig};
