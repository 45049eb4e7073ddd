//! Minimal reverse-mode compute core for 1-D convolutional networks.

mod checkpoint;
mod kernels;
mod layers;
mod loss;
mod model;
mod optim;
mod tensor;

pub use checkpoint::ModelArch;
pub use layers::{
    conv_out_len, BatchNorm1d, Conv1d, ConvLowering, GlobalAvgPool, Layer, Linear, MaxPool1d, Mode, Relu, Upsample1d,
};
pub use loss::{cross_entropy, mse, softmax_rows, symmetric_cross_entropy, LossOutput, DEFAULT_LOG_CLAMP};
pub use model::{ArchSpec, Autoencoder, AutoencoderSpec, ClassifierModel, DepthPreset, ForwardOutput, ResidualBlock};
pub use optim::{Adam, AdamConfig};
pub use tensor::{matmul, Buffer, BufferId, Param, ParamId, ParamStore, Scalar, Tensor};
