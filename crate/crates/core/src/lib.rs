pub mod aggregation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod mask;
pub mod memory;
pub mod model;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod tracker;
pub mod training;
pub mod visualize;

pub use error::{Error, Result};
pub use checkpoint::{read_checkpoint, save_checkpoint, Checkpoint};
pub use config::Config;
pub use data::{generate_moving_shapes, PixelNorm, SyntheticConfig, Video, VideoDataset};
pub use decoder::{DecoderConfig, InstancePrediction};
pub use eval::{evaluate, ground_truth_result, EvalReport};
pub use inference::{run_inference, run_video, InferenceConfig, InferenceReport};
pub use mask::BinaryMask;
pub use memory::{FeatureMemory, RetentionPolicy};
pub use model::{ModelConfig, VisoloModel};
pub use network::NetworkConfig;
pub use nn::ParamStore;
pub use tensor::Tensor;
pub use tracker::{TrackResult, TrackerConfig, VideoResult};
pub use training::{train, TrainConfig};
