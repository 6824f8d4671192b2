//! Synthetic flow and depth tasks: data generation, losses, the optimizer
//! and the training loop.

pub mod data;
pub mod loss;
pub mod optim;
pub mod train;

pub use data::{gen_depth_sample, gen_flow_sample, DataConfig, Dataset, DepthSample, FlowSample, Sample};
pub use loss::{abs_rel, epe, epe_loss, rmse, silog_loss, SILOG_LAMBDA};
pub use optim::AdamW;
pub use train::{evaluate, train, EpochRow, Metrics, TrainConfig, TrainReport};
