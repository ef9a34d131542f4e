//! Victim transformer and prior CNN.

pub mod prior;
pub mod train;
pub mod vit;
pub mod vit_grad;

pub use prior::{pretrain_prior, PriorCnn, PriorConfig, PriorStats};
pub use vit::{cross_entropy, predict, vit_forward, Component, ParamKind, ParamSlot, VitConfig, VitParams};
pub use vit_grad::{param_gradients, ParamGradients};
pub use train::{accuracy, train_victim, TrainConfig, TrainReport};
