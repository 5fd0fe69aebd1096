//! Multi-view denoising network: noise schedule, the two-level UNet with
//! decoupled attention blocks, training with three-way condition dropout,
//! and deterministic guided sampling.

mod checkpoint;
mod model;
mod sample;
mod schedule;
mod train;

pub use checkpoint::{state_from_checkpoint, state_to_checkpoint};
pub use model::{
    predict_noise, ref_pass, Conv2d, DenoiserConfig, DenoiserGrads, DenoiserState,
    PyramidPhases, RefFeatures, COND_CHANNELS, IMAGE_CHANNELS,
};
pub use sample::{ddim_timesteps, sample, sample_traced, SampleParams};
pub use schedule::{add_noise, NoiseSchedule};
pub use train::{
    compute_batch_grads, mse_loss, mse_loss_and_grads, train_step, AdamW, DropoutDraws,
    DropoutProbs, StepOutcome, TrainSample,
};
