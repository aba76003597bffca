//! Dense tensor ops and the attention predictor.

pub(crate) mod backprop;
pub mod checkpoint;
pub mod model;
pub mod ops;
pub mod train;

pub use model::{model_forward, AttentionModel, EncoderLayer, LayerOp, LinearId, ModelConfig, NormId};
pub use ops::{
    attention_forward, ffn_forward, layer_norm, linear_forward, msa_forward, multi_head_attention, sigmoid,
    softmax_rows, LayerNormParams, Linear,
};
pub use train::{bce_loss, loss_gradient, predict_logits, train, Optimizer, TrainConfig, TrainReport, PROB_EPS};
