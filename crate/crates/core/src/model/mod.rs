//! The private convolutional conditional neural process and its training
//! loop.

mod config;
mod network;
mod train;


pub use config::{ModelConfig, TcMode};
pub use network::{nll_loss, DpConvCnp, ForwardCache, ModelOutput, NoiseDraw};
pub use train::{
    batch_loss_and_grad, evaluate_tasks, load_model, meta_test, meta_test_nlls, meta_train, save_model, summarise,
    LogRow, Summary, TrainConfig, TrainOutcome, EVAL_NOISE_SEED,
};
