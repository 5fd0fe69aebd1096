//! Denoiser state ↔ checkpoint conversion.

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::numerics::RngState;

use super::model::{Conv2d, DenoiserConfig, DenoiserState, RefNet};

/// Serialize the full model state (weights, λs, frozen flags, reference
/// network) as named tensors.
pub fn state_to_checkpoint(state: &DenoiserState) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.insert_scalar("config.input_resolution", state.config.input_resolution as f64);
    ck.insert_scalar("config.base_channels", state.config.base_channels as f64);
    ck.insert_scalar("config.head_count", state.config.head_count as f64);
    ck.insert_scalar("config.schedule_steps", state.config.schedule_steps as f64);
    ck.insert_scalar(
        "config.zero_init_output",
        state.config.zero_init_output as u8 as f64,
    );
    for name in state.param_names() {
        ck.insert(name.clone(), state.param(&name).unwrap().clone());
    }
    ck.insert_scalar("block0.lambda_ref", state.block0.lambda_ref as f64);
    ck.insert_scalar("block0.lambda_mv", state.block0.lambda_mv as f64);
    ck.insert_scalar("block0.sa_frozen", state.block0.sa_frozen as u8 as f64);
    ck.insert_scalar("block1.lambda_ref", state.block1.lambda_ref as f64);
    ck.insert_scalar("block1.lambda_mv", state.block1.lambda_mv as f64);
    ck.insert_scalar("block1.sa_frozen", state.block1.sa_frozen as u8 as f64);
    ck.insert_scalar("refnet.present", state.ref_net.is_some() as u8 as f64);
    if let Some(r) = &state.ref_net {
        ck.insert("refnet.conv_in.weight", r.conv_in.weight.clone());
        ck.insert("refnet.conv_in.bias", r.conv_in.bias.clone());
        ck.insert("refnet.time_lin0", r.time_lin0.clone());
        ck.insert("refnet.time_lin1", r.time_lin1.clone());
        ck.insert("refnet.block0_sa.wq", r.block0_sa.wq.clone());
        ck.insert("refnet.block0_sa.wk", r.block0_sa.wk.clone());
        ck.insert("refnet.block0_sa.wv", r.block0_sa.wv.clone());
        ck.insert("refnet.block0_sa.wo", r.block0_sa.wo.clone());
        ck.insert("refnet.conv_down.weight", r.conv_down.weight.clone());
        ck.insert("refnet.conv_down.bias", r.conv_down.bias.clone());
    }
    ck
}

/// Rebuild the model from a checkpoint; the sinusoidal table is
/// reconstructed from the config rather than stored.
pub fn state_from_checkpoint(ck: &Checkpoint) -> Result<DenoiserState> {
    let config = DenoiserConfig {
        input_resolution: ck.require_scalar("config.input_resolution")? as usize,
        base_channels: ck.require_scalar("config.base_channels")? as usize,
        head_count: ck.require_scalar("config.head_count")? as usize,
        schedule_steps: ck.require_scalar("config.schedule_steps")? as usize,
        zero_init_output: ck.require_scalar("config.zero_init_output")? != 0.0,
    };
    // Initialize with a throwaway stream, then overwrite every tensor.
    let mut state = DenoiserState::init(config, &mut RngState::seeded(0))?;
    for name in state.param_names() {
        let stored = ck.require(&name)?.clone();
        let dst = state.param_mut(&name).unwrap();
        if dst.shape() != stored.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                stored.shape(),
                dst.shape()
            )));
        }
        *dst = stored;
    }
    state.block0.lambda_ref = ck.require_scalar("block0.lambda_ref")? as f32;
    state.block0.lambda_mv = ck.require_scalar("block0.lambda_mv")? as f32;
    state.block0.sa_frozen = ck.require_scalar("block0.sa_frozen")? != 0.0;
    state.block1.lambda_ref = ck.require_scalar("block1.lambda_ref")? as f32;
    state.block1.lambda_mv = ck.require_scalar("block1.lambda_mv")? as f32;
    state.block1.sa_frozen = ck.require_scalar("block1.sa_frozen")? != 0.0;
    if ck.require_scalar("refnet.present")? != 0.0 {
        let [c0, c1] = state.config.level_channels();
        let in_ch = super::model::IMAGE_CHANNELS + super::model::COND_CHANNELS;
        state.ref_net = Some(RefNet {
            conv_in: Conv2d {
                in_ch,
                out_ch: c0,
                stride: 1,
                weight: ck.require("refnet.conv_in.weight")?.clone(),
                bias: ck.require("refnet.conv_in.bias")?.clone(),
            },
            time_lin0: ck.require("refnet.time_lin0")?.clone(),
            time_lin1: ck.require("refnet.time_lin1")?.clone(),
            block0_sa: crate::attention::BranchWeights {
                wq: ck.require("refnet.block0_sa.wq")?.clone(),
                wk: ck.require("refnet.block0_sa.wk")?.clone(),
                wv: ck.require("refnet.block0_sa.wv")?.clone(),
                wo: ck.require("refnet.block0_sa.wo")?.clone(),
            },
            conv_down: Conv2d {
                in_ch: c0,
                out_ch: c1,
                stride: 2,
                weight: ck.require("refnet.conv_down.weight")?.clone(),
                bias: ck.require("refnet.conv_down.bias")?.clone(),
            },
            head_count: state.config.head_count,
        });
    } else {
        state.ref_net = None;
    }
    Ok(state)
}
