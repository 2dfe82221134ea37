//! Losses, toy data and the two-stage training loop.

pub mod data;
pub mod loss;
pub mod train;

pub use data::{toy_ipe_items, toy_sve_items, TrainItem};
pub use loss::{cmse, composite_loss, mse, si_snr, LossRecord, LossReport, Stage, LOSS_LOG_HEADER, SNR_LOSS_WEIGHT};
pub use train::{train_toy, EvalPoint, TrainConfig, TrainOutcome};
