//! Golden-reference CNN evaluator: tensors, layers, forward, SGD training and
//! model/dataset I/O.

pub mod arch;
pub mod dataset;
pub mod io;
mod layer;
mod model;
pub mod ops;
mod tensor;
pub mod train;

use thiserror::Error;

pub use dataset::{load_csv, load_mnist_dir, load_mnist_idx, Dataset, Split};
pub use io::{load_model, save_model, ModelFileError};
pub use layer::{Conv2d, Layer, LayerKind};
pub use model::{accuracy_of, confidences_of, Forward, Model};
pub use tensor::Tensor;
pub use train::{train, train_regression, TrainConfig};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape contract violated: {0}")]
    Shape(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("layer '{0}' is not differentiable")]
    NotDifferentiable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
