//! Deterministic DDIM-style sampling with three guidance passes per step.

use crate::attention::LatentGrid;
use crate::error::{Error, Result};
use crate::geometry::ConditionMaps;
use crate::guidance::{self, GuidanceBundle, GuidanceConfig};
use crate::numerics::{Grid, RngState};

use super::model::{
    forward_cached, ref_pass, DenoiserState, PyramidPhases, IMAGE_CHANNELS,
};
use super::schedule::NoiseSchedule;

#[derive(Debug, Clone)]
pub struct SampleParams {
    /// DDIM step count (≤ schedule steps).
    pub steps: usize,
    pub guidance: GuidanceConfig,
    /// Inference-time ablation: force λ_mv to this value (0 disables the
    /// multi-view branch entirely).
    pub lambda_mv_override: Option<f32>,
    /// Inference-time ablation: run multi-view attention with identity
    /// phases instead of voxel indices.
    pub identity_phases: bool,
}

impl SampleParams {
    pub fn new(steps: usize, guidance: GuidanceConfig) -> Self {
        SampleParams {
            steps,
            guidance,
            lambda_mv_override: None,
            identity_phases: false,
        }
    }
}

/// Evenly spaced descending DDIM timesteps including both endpoints.
pub fn ddim_timesteps(train_steps: usize, sample_steps: usize) -> Vec<usize> {
    if sample_steps >= train_steps {
        return (0..train_steps).rev().collect();
    }
    if sample_steps == 1 {
        return vec![train_steps - 1];
    }
    (0..sample_steps)
        .map(|i| (train_steps - 1) * (sample_steps - 1 - i) / (sample_steps - 1))
        .collect()
}

/// Generate per-view images in `[0, 1]`.
///
/// Runs a deterministic DDIM loop from seeded Gaussian noise. Each step
/// makes three forward passes — unconditional, geometry-only and fully
/// conditioned — and composes them through the configured guidance mode.
pub fn sample(
    state: &DenoiserState,
    cond: &[ConditionMaps],
    ref_image: &Grid,
    schedule: &NoiseSchedule,
    params: &SampleParams,
    rng: &mut RngState,
) -> Result<Vec<Grid>> {
    sample_traced(state, cond, ref_image, schedule, params, rng, &mut |_, _| {})
}

/// [`sample`] with a per-step observer receiving the guidance bundle, for
/// offline analysis dumps.
pub fn sample_traced(
    state: &DenoiserState,
    cond: &[ConditionMaps],
    ref_image: &Grid,
    schedule: &NoiseSchedule,
    params: &SampleParams,
    rng: &mut RngState,
    trace: &mut dyn FnMut(usize, &GuidanceBundle),
) -> Result<Vec<Grid>> {
    let views = cond.len();
    if views == 0 || views > 12 {
        return Err(Error::invalid(format!(
            "view count must be in [1, 12], got {views}"
        )));
    }
    if params.steps == 0 {
        return Err(Error::invalid("sample steps must be positive"));
    }
    if schedule.steps() != state.config.schedule_steps {
        return Err(Error::invalid(format!(
            "schedule has {} steps but the model was built for {}",
            schedule.steps(),
            state.config.schedule_steps
        )));
    }
    let s = state.config.input_resolution;
    let phases = if params.identity_phases {
        PyramidPhases::all_invalid(views, &state.config)
    } else {
        PyramidPhases::build(cond, &state.config)?
    };
    let ref_feats = ref_pass(state, ref_image)?;

    let mut x: Vec<Grid> = (0..views).map(|_| rng.gaussian(vec![s * s, 3])).collect();
    let timesteps = ddim_timesteps(schedule.steps(), params.steps);

    for (i, &t) in timesteps.iter().enumerate() {
        let lambda = params.lambda_mv_override;
        let eps_u = forward_cached(state, &x, t, None, None, &phases, lambda)?.0;
        let eps_g = forward_cached(state, &x, t, Some(cond), None, &phases, lambda)?.0;
        let eps_f =
            forward_cached(state, &x, t, Some(cond), Some(&ref_feats), &phases, lambda)?.0;

        let wrap = |grids: Vec<Grid>| -> Result<Vec<LatentGrid>> {
            grids
                .into_iter()
                .enumerate()
                .map(|(v, g)| LatentGrid::new(v, s, s, IMAGE_CHANNELS, g))
                .collect()
        };
        let bundle = GuidanceBundle {
            eps_uncond: wrap(eps_u)?,
            eps_geo: wrap(eps_g)?,
            eps_full: wrap(eps_f)?,
        };
        trace(i, &bundle);
        let eps = guidance::compose(&bundle, &params.guidance)?.eps;

        let (sa_t, sb_t) = schedule.mixing(t);
        let next = timesteps.get(i + 1).copied();
        for v in 0..views {
            let e = &eps[v].data;
            // x0 = (x − √(1−ᾱ_t)·ε) / √ᾱ_t
            let x0 = x[v].sub(&e.scale(sb_t))?.scale(1.0 / sa_t);
            x[v] = match next {
                Some(tp) => {
                    let (sa_p, sb_p) = schedule.mixing(tp);
                    x0.scale(sa_p).add(&e.scale(sb_p))?
                }
                None => x0,
            };
            x[v].assert_finite("sampling trajectory")?;
        }
    }

    Ok(x.into_iter()
        .map(|g| g.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
        .collect())
}
