//! Object searching with dynamic convolution: the U-shaped network, deep
//! supervision, SGD training and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod network;
pub mod train;

pub use config::{Ablation, NetworkConfig};
pub use infer::{inference_mode, predict_group};
pub use network::{
    cadc_level, deep_supervised_loss, dynamic_search, forward_group, spatial_attention_level, CadcBlock, Decoder,
    DecoderMode, Fusion, GroupOutput, Network,
};
pub use train::{train_toy, TrainConfig, TrainGroup, TrainReport};
