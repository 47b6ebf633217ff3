//! Network definitions: configuration, the divergence tree, the fusion
//! head and the prediction containers they exchange.

mod config;
mod network;

pub use config::{leaf_paths, path_label, ModelConfig, SUPPORTED_SCALES};
pub use network::{
    fuse_predictions, images_to_tensor, stack_predictions, tensor_to_image, ConvergenceModel,
    DivergenceModel, PredictionSet, WeightMaps, MIN_INPUT_SIDE,
};
