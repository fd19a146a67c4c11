//! Desk-scale model population: datasets, networks, training and the TRMZ
//! container.

pub mod dataset;
pub mod format;
pub mod model;
pub mod network;

pub use dataset::{dataset_generators, generate_dataset, Dataset, DatasetGenerator, DatasetSpec, Split};
pub use format::{decode_model, encode_model, load_model, save_model};
pub use model::{train, ForwardOutput, Hyperparams, TrainedModel, TrainingMeta};
pub use network::{LayerParams, LayerSpec, NetworkDescriptor, TensorShape};
