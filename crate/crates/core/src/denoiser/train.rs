//! Training: ε-prediction MSE, three-way condition dropout and AdamW.

use crate::error::{Error, Result};
use crate::geometry::ConditionMaps;
use crate::io::Checkpoint;
use crate::numerics::{Grid, RngState};

use super::model::{
    backward, forward_cached, ref_pass, DenoiserGrads, DenoiserState, PyramidPhases,
    RefFeatures,
};
use super::schedule::{add_noise, NoiseSchedule};

/// Independent dropout probabilities for geometry conditioning, the
/// reference image and the multi-view attention branch.
#[derive(Debug, Clone, Copy)]
pub struct DropoutProbs {
    pub geo: f64,
    pub reference: f64,
    pub mva: f64,
}

impl Default for DropoutProbs {
    fn default() -> Self {
        DropoutProbs {
            geo: 0.1,
            reference: 0.1,
            mva: 0.1,
        }
    }
}

/// One training example: clean views in `[-1, 1]`, their condition maps,
/// precomputed voxel phases and the reference image.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub clean_views: Vec<Grid>,
    pub cond: Vec<ConditionMaps>,
    pub phases: PyramidPhases,
    pub ref_image: Grid,
}

/// Per-sample dropout draws, logged so empirical rates can be audited.
#[derive(Debug, Clone, Copy)]
pub struct DropoutDraws {
    pub geo: bool,
    pub reference: bool,
    pub mva: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub draws: Vec<DropoutDraws>,
}

/// MSE between predicted and target noise plus gradients for every
/// learnable tensor. Deterministic in its inputs; the dropout and noise
/// draws happen in [`train_step`].
pub fn mse_loss_and_grads(
    state: &DenoiserState,
    noisy: &[Grid],
    eps_target: &[Grid],
    t: usize,
    cond: Option<&[ConditionMaps]>,
    ref_feats: Option<&RefFeatures>,
    phases: &PyramidPhases,
    lambda_mv_override: Option<f32>,
) -> Result<(f64, DenoiserGrads)> {
    let (pred, cache) = forward_cached(state, noisy, t, cond, ref_feats, phases, lambda_mv_override)?;
    let total: usize = pred.iter().map(|p| p.len()).sum();
    let mut loss = 0.0f64;
    let mut d_out = Vec::with_capacity(pred.len());
    for (p, e) in pred.iter().zip(eps_target) {
        let diff = p.sub(e)?;
        loss += diff.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        d_out.push(diff.scale(2.0 / total as f32));
    }
    loss /= total as f64;
    let grads = backward(state, &cache, &d_out)?;
    Ok((loss, grads))
}

/// Forward-only MSE, used by finite-difference checks.
pub fn mse_loss(
    state: &DenoiserState,
    noisy: &[Grid],
    eps_target: &[Grid],
    t: usize,
    cond: Option<&[ConditionMaps]>,
    ref_feats: Option<&RefFeatures>,
    phases: &PyramidPhases,
    lambda_mv_override: Option<f32>,
) -> Result<f64> {
    let (pred, _) = forward_cached(state, noisy, t, cond, ref_feats, phases, lambda_mv_override)?;
    let total: usize = pred.iter().map(|p| p.len()).sum();
    let mut loss = 0.0f64;
    for (p, e) in pred.iter().zip(eps_target) {
        let diff = p.sub(e)?;
        loss += diff.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    }
    Ok(loss / total as f64)
}

/// Run the per-sample noise/dropout draws and compute batch-mean loss and
/// gradients without touching the weights. Exposed separately so tests can
/// inspect gradients.
pub fn compute_batch_grads(
    state: &DenoiserState,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    rng: &mut RngState,
    probs: DropoutProbs,
) -> Result<(f64, DenoiserGrads, Vec<DropoutDraws>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut total_grads = DenoiserGrads::zeros(state);
    let mut total_loss = 0.0f64;
    let mut draws = Vec::with_capacity(batch.len());
    for sample in batch {
        let t = rng.uniform_index(schedule.steps());
        let draw = DropoutDraws {
            geo: rng.bernoulli(probs.geo),
            reference: rng.bernoulli(probs.reference),
            mva: rng.bernoulli(probs.mva),
        };
        let mut noisy = Vec::with_capacity(sample.clean_views.len());
        let mut eps = Vec::with_capacity(sample.clean_views.len());
        for clean in &sample.clean_views {
            let (n, e) = add_noise(clean, t, schedule, rng)?;
            noisy.push(n);
            eps.push(e);
        }
        let ref_feats = if draw.reference {
            None
        } else {
            Some(ref_pass(state, &sample.ref_image)?)
        };
        let cond = if draw.geo {
            None
        } else {
            Some(sample.cond.as_slice())
        };
        let lambda = draw.mva.then_some(0.0);
        let (loss, grads) = mse_loss_and_grads(
            state,
            &noisy,
            &eps,
            t,
            cond,
            ref_feats.as_ref(),
            &sample.phases,
            lambda,
        )?;
        total_loss += loss;
        total_grads.accumulate(&grads)?;
        draws.push(draw);
    }
    let scale = 1.0 / batch.len() as f32;
    total_grads.scale_in_place(scale);
    let loss = total_loss / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::non_finite(format!(
            "training loss diverged at loss={loss}; check learning rate and data scaling"
        )));
    }
    Ok((loss, total_grads, draws))
}

/// One optimization step: draw noise/dropout, compute gradients, update
/// weights. Frozen self-attention branches are never touched.
pub fn train_step(
    state: &mut DenoiserState,
    opt: &mut AdamW,
    batch: &[TrainSample],
    schedule: &NoiseSchedule,
    rng: &mut RngState,
    probs: DropoutProbs,
) -> Result<StepOutcome> {
    let (loss, grads, draws) = compute_batch_grads(state, batch, schedule, rng, probs)?;
    opt.step(state, &grads)?;
    Ok(StepOutcome { loss, draws })
}

/// AdamW with decoupled weight decay. Moment buffers are keyed by the
/// fixed parameter order of [`DenoiserState::param_names`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step_count: u64,
    names: Vec<String>,
    m: Vec<Grid>,
    v: Vec<Grid>,
}

impl AdamW {
    pub fn new(state: &DenoiserState, lr: f32) -> Self {
        let names = state.param_names();
        let m = names
            .iter()
            .map(|n| Grid::zeros(state.param(n).unwrap().shape().to_vec()))
            .collect();
        let v = names
            .iter()
            .map(|n| Grid::zeros(state.param(n).unwrap().shape().to_vec()))
            .collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            step_count: 0,
            names,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, state: &mut DenoiserState, grads: &DenoiserGrads) -> Result<()> {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (i, name) in self.names.iter().enumerate() {
            if state.param_frozen(name) {
                continue;
            }
            let Some(g) = grads.grad(name) else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let param = state
                .param_mut(name)
                .ok_or_else(|| Error::invalid(format!("unknown param {name}")))?;
            let (b1, b2, eps, lr, wd) =
                (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
            for ((p, mm), (vv, &gg)) in param
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                *mm = b1 * *mm + (1.0 - b1) * gg;
                *vv = b2 * *vv + (1.0 - b2) * gg * gg;
                let m_hat = *mm / bc1;
                let v_hat = *vv / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }

    /// Serialize moments and step counter into an existing checkpoint.
    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.insert_u64("adam.step_count", self.step_count);
        ck.insert_scalar("adam.lr", self.lr as f64);
        for (i, name) in self.names.iter().enumerate() {
            ck.insert(format!("adam.m.{name}"), self.m[i].clone());
            ck.insert(format!("adam.v.{name}"), self.v[i].clone());
        }
    }

    pub fn load_from(state: &DenoiserState, ck: &Checkpoint) -> Result<Self> {
        let mut opt = AdamW::new(state, ck.require_scalar("adam.lr")? as f32);
        opt.step_count = ck.require_u64("adam.step_count")?;
        for (i, name) in opt.names.clone().into_iter().enumerate() {
            opt.m[i] = ck.require(&format!("adam.m.{name}"))?.clone();
            opt.v[i] = ck.require(&format!("adam.v.{name}"))?.clone();
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::super::model::tests::{sphere_conditions, tiny_config};
    use super::super::model::{DenoiserState, PyramidPhases};
    use super::*;

    fn tiny_sample(views: usize, seed: u64) -> TrainSample {
        let cfg = tiny_config();
        let s = cfg.input_resolution;
        let cond = sphere_conditions(s, views);
        let phases = PyramidPhases::build(&cond, &cfg).unwrap();
        let mut rng = RngState::seeded(seed);
        // Smooth per-view gradients in [-0.8, 0.8] as clean targets.
        let smooth = |rng: &mut RngState| {
            let a = rng.uniform() as f32;
            let mut data = Vec::with_capacity(s * s * 3);
            for p in 0..s * s {
                let (y, x) = (p / s, p % s);
                let t = (x as f32 + y as f32) / (2 * s) as f32;
                data.extend_from_slice(&[
                    1.6 * (t - 0.5) * a,
                    1.6 * (0.5 - t),
                    1.6 * (t * a - 0.5),
                ]);
            }
            Grid::new(vec![s * s, 3], data).unwrap()
        };
        TrainSample {
            clean_views: (0..views).map(|_| smooth(&mut rng)).collect(),
            cond,
            phases,
            ref_image: smooth(&mut rng),
        }
    }

    #[test]
    fn untrained_loss_is_near_unit_variance() {
        // Zero-initialized output conv predicts zero noise, so the loss is
        // the mean square of a standard normal: 1.0 ± sampling error.
        let mut rng = RngState::seeded(1);
        let mut state = DenoiserState::init(tiny_config(), &mut rng).unwrap();
        state.freeze_sa();
        let schedule = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let sample = tiny_sample(3, 2);
        let mut losses = Vec::new();
        for _ in 0..16 {
            let (loss, _, _) = compute_batch_grads(
                &state,
                std::slice::from_ref(&sample),
                &schedule,
                &mut rng,
                DropoutProbs::default(),
            )
            .unwrap();
            losses.push(loss);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((mean - 1.0).abs() < 0.2, "untrained loss {mean}");
    }

    #[test]
    fn full_dropout_zeroes_refa_and_mva_gradients() {
        let mut rng = RngState::seeded(3);
        let mut state = DenoiserState::init(tiny_config(), &mut rng).unwrap();
        state.freeze_sa();
        let schedule = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let sample = tiny_sample(2, 4);
        let probs = DropoutProbs {
            geo: 1.0,
            reference: 1.0,
            mva: 1.0,
        };
        let (_, grads, draws) = compute_batch_grads(
            &state,
            std::slice::from_ref(&sample),
            &schedule,
            &mut rng,
            probs,
        )
        .unwrap();
        assert!(draws[0].geo && draws[0].reference && draws[0].mva);
        for blk in ["block0", "block1"] {
            for branch in ["refa", "mva"] {
                for m in ["wq", "wk", "wv", "wo"] {
                    let g = grads.grad(&format!("{blk}.{branch}.{m}")).unwrap();
                    assert_eq!(g.max_abs(), 0.0, "{blk}.{branch}.{m} grad not zero");
                }
            }
        }
    }

    #[test]
    fn frozen_sa_weights_are_untouched_by_training() {
        let mut rng = RngState::seeded(5);
        let mut state = DenoiserState::init(tiny_config(), &mut rng).unwrap();
        state.freeze_sa();
        let before: Vec<Vec<f32>> = ["block0.sa.wq", "block1.sa.wo"]
            .iter()
            .map(|n| state.param(n).unwrap().data().to_vec())
            .collect();
        let schedule = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let sample = tiny_sample(2, 6);
        let mut opt = AdamW::new(&state, 1e-2);
        for _ in 0..5 {
            train_step(
                &mut state,
                &mut opt,
                std::slice::from_ref(&sample),
                &schedule,
                &mut rng,
                DropoutProbs::default(),
            )
            .unwrap();
        }
        let after: Vec<Vec<f32>> = ["block0.sa.wq", "block1.sa.wo"]
            .iter()
            .map(|n| state.param(n).unwrap().data().to_vec())
            .collect();
        assert_eq!(before, after);
        // Trainable weights did move.
        let moved = state.param("conv_out.weight").unwrap().max_abs();
        assert!(moved > 0.0, "conv_out never updated");
    }

    #[test]
    fn training_reduces_loss_on_a_fixed_batch() {
        // Small over-fitting smoke: repeated steps on one batch must drive
        // the loss down substantially.
        let mut rng = RngState::seeded(7);
        let mut state = DenoiserState::init(tiny_config(), &mut rng).unwrap();
        state.freeze_sa();
        let schedule = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let sample = tiny_sample(2, 8);
        let mut opt = AdamW::new(&state, 3e-3);
        let probs = DropoutProbs::default();
        let mut first = Vec::new();
        let mut last = Vec::new();
        for step in 0..300 {
            let out = train_step(
                &mut state,
                &mut opt,
                std::slice::from_ref(&sample),
                &schedule,
                &mut rng,
                probs,
            )
            .unwrap();
            if step < 30 {
                first.push(out.loss);
            }
            if step >= 260 {
                last.push(out.loss);
            }
        }
        let f = first.iter().sum::<f64>() / first.len() as f64;
        let l = last.iter().sum::<f64>() / last.len() as f64;
        assert!(l < 0.7 * f, "loss did not drop: {f} -> {l}");
    }

    #[test]
    fn adamw_roundtrips_through_checkpoint() {
        let mut rng = RngState::seeded(9);
        let state = DenoiserState::init(tiny_config(), &mut rng).unwrap();
        let mut opt = AdamW::new(&state, 1e-3);
        opt.step_count = 42;
        opt.m[0] = rng.gaussian(opt.m[0].shape().to_vec());
        let mut ck = Checkpoint::new();
        opt.save_into(&mut ck);
        let back = AdamW::load_from(&state, &ck).unwrap();
        assert_eq!(back.step_count, 42);
        assert_eq!(back.m[0].data(), opt.m[0].data());
        assert_eq!(back.lr, 1e-3);
    }
}
