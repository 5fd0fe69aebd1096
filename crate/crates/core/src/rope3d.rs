//! 3D-aware rotary positional embedding.
//!
//! Channels are split into three equal blocks, one per spatial axis.
//! Within each block, adjacent channel pairs `(v[2i], v[2i+1])` are rotated
//! by `phase_axis · θ_i` with `θ_i = base^(−2i / (dim/3))` — the standard
//! rotary frequency ladder applied per axis. Rotations are orthogonal, so
//! norms are preserved, and the dot product of two rotated vectors depends
//! only on the per-axis phase difference: tokens quantized to the same voxel
//! interact exactly as if unrotated, and attention decays smoothly with
//! voxel distance.

use crate::attention::LatentGrid;
use crate::error::{Error, Result};
use crate::voxelmap::PhaseGrid;

/// Rotary configuration for one attention head.
#[derive(Debug, Clone)]
pub struct RopeConfig {
    dim: usize,
    base: f32,
    /// Precomputed θ_i for one axis block (dim/6 entries).
    thetas: Vec<f32>,
}

impl RopeConfig {
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_base(dim, 10_000.0)
    }

    pub fn with_base(dim: usize, base: f32) -> Result<Self> {
        if dim == 0 || dim % 6 != 0 {
            return Err(Error::invalid(format!(
                "rotary dim must be a positive multiple of 6, got {dim}"
            )));
        }
        if !(base > 1.0) {
            return Err(Error::invalid("rotary base must exceed 1"));
        }
        let axis_dim = dim / 3;
        let pairs = axis_dim / 2;
        let thetas = (0..pairs)
            .map(|i| base.powf(-2.0 * i as f32 / axis_dim as f32))
            .collect();
        Ok(RopeConfig { dim, base, thetas })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f32 {
        self.base
    }

    /// Channel count assigned to each axis.
    pub fn axis_split(&self) -> [usize; 3] {
        [self.dim / 3; 3]
    }

    pub fn pairs_per_axis(&self) -> usize {
        self.dim / 6
    }

    pub fn theta(&self, pair: usize) -> f32 {
        self.thetas[pair]
    }
}

/// Rotate one feature vector in place by the given voxel phase.
pub fn rotate_in_place(vec: &mut [f32], phase: [u16; 3], cfg: &RopeConfig) {
    debug_assert_eq!(vec.len(), cfg.dim);
    let axis_dim = cfg.dim / 3;
    for (axis, &p) in phase.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let block = &mut vec[axis * axis_dim..(axis + 1) * axis_dim];
        for (i, &theta) in cfg.thetas.iter().enumerate() {
            let angle = p as f32 * theta;
            let (sin, cos) = angle.sin_cos();
            let a = block[2 * i];
            let b = block[2 * i + 1];
            block[2 * i] = a * cos - b * sin;
            block[2 * i + 1] = a * sin + b * cos;
        }
    }
}

/// Rotate a copy of one feature vector.
pub fn rotate(vec: &[f32], phase: [u16; 3], cfg: &RopeConfig) -> Result<Vec<f32>> {
    if vec.len() != cfg.dim {
        return Err(Error::shape(format!(
            "vector length {} does not match rotary dim {}",
            vec.len(),
            cfg.dim
        )));
    }
    let mut out = vec.to_vec();
    rotate_in_place(&mut out, phase, cfg);
    Ok(out)
}

/// Inverse rotation (phases negated); the adjoint used by backward passes.
pub fn rotate_inverse_in_place(vec: &mut [f32], phase: [u16; 3], cfg: &RopeConfig) {
    debug_assert_eq!(vec.len(), cfg.dim);
    let axis_dim = cfg.dim / 3;
    for (axis, &p) in phase.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let block = &mut vec[axis * axis_dim..(axis + 1) * axis_dim];
        for (i, &theta) in cfg.thetas.iter().enumerate() {
            let angle = p as f32 * theta;
            let (sin, cos) = angle.sin_cos();
            let a = block[2 * i];
            let b = block[2 * i + 1];
            block[2 * i] = a * cos + b * sin;
            block[2 * i + 1] = -a * sin + b * cos;
        }
    }
}

/// Rotate every pixel of a latent grid by its voxel phase. Invalid
/// (background) pixels pass through unrotated; they still take part in
/// attention, only the rotation is skipped.
///
/// The grid's channel count must be a multiple of the rotary dim; each
/// consecutive `dim`-sized head segment of a pixel is rotated by the same
/// phase.
pub fn rotate_grid(latents: &LatentGrid, phases: &PhaseGrid, cfg: &RopeConfig) -> Result<LatentGrid> {
    if latents.height != phases.resolution || latents.width != phases.resolution {
        return Err(Error::shape(format!(
            "latent grid {}×{} does not match phase grid {}²",
            latents.height, latents.width, phases.resolution
        )));
    }
    if latents.channels % cfg.dim != 0 {
        return Err(Error::shape(format!(
            "channels {} not a multiple of rotary dim {}",
            latents.channels, cfg.dim
        )));
    }
    let mut out = latents.clone();
    let c = latents.channels;
    let heads = c / cfg.dim;
    let data = out.data.data_mut();
    for token in 0..phases.token_count() {
        if !phases.valid_at(token) {
            continue;
        }
        let phase = phases.phase_at(token);
        for h in 0..heads {
            let start = token * c + h * cfg.dim;
            rotate_in_place(&mut data[start..start + cfg.dim], phase, cfg);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    fn norm(a: &[f32]) -> f64 {
        dot(a, a).sqrt()
    }

    #[test]
    fn zero_phase_is_identity() {
        let cfg = RopeConfig::new(12).unwrap();
        let v: Vec<f32> = (0..12).map(|i| i as f32 - 4.0).collect();
        let out = rotate(&v, [0, 0, 0], &cfg).unwrap();
        assert_eq!(v, out);
    }

    #[test]
    fn single_pair_closed_form() {
        // dim = 6: one pair per axis, θ_0 = 1. Phase (1,0,0) rotates only
        // the first pair, by exactly one radian.
        let cfg = RopeConfig::new(6).unwrap();
        assert_eq!(cfg.theta(0), 1.0);
        let v = [0.3f32, -0.7, 1.1, 0.2, -0.5, 0.9];
        let out = rotate(&v, [1, 0, 0], &cfg).unwrap();
        let (s, c) = 1.0f32.sin_cos();
        assert!((out[0] - (v[0] * c - v[1] * s)).abs() < 1e-6);
        assert!((out[1] - (v[0] * s + v[1] * c)).abs() < 1e-6);
        assert_eq!(&out[2..], &v[2..]);
    }

    #[test]
    fn rotation_preserves_norm() {
        let cfg = RopeConfig::new(24).unwrap();
        let mut rng = RngState::seeded(17);
        for _ in 0..100 {
            let v = rng.gaussian(vec![24]);
            let phase = [
                rng.uniform_index(33) as u16,
                rng.uniform_index(33) as u16,
                rng.uniform_index(33) as u16,
            ];
            let out = rotate(v.data(), phase, &cfg).unwrap();
            let dn = (norm(&out) - norm(v.data())).abs();
            assert!(dn < 1e-5 * norm(v.data()).max(1.0), "norm drift {dn}");
        }
    }

    #[test]
    fn inverse_rotation_roundtrips() {
        let cfg = RopeConfig::new(18).unwrap();
        let mut rng = RngState::seeded(23);
        let v = rng.gaussian(vec![18]);
        let phase = [5, 11, 2];
        let mut w = rotate(v.data(), phase, &cfg).unwrap();
        rotate_inverse_in_place(&mut w, phase, &cfg);
        for (a, b) in v.data().iter().zip(&w) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn dot_product_depends_only_on_phase_difference() {
        // Shift both phases by a common offset: the rotated dot product
        // must not change (relative-position property).
        let cfg = RopeConfig::new(24).unwrap();
        let mut rng = RngState::seeded(31);
        for _ in 0..200 {
            let q = rng.gaussian(vec![24]);
            let k = rng.gaussian(vec![24]);
            let p: Vec<u16> = (0..3).map(|_| rng.uniform_index(16) as u16).collect();
            let s: Vec<u16> = (0..3).map(|_| rng.uniform_index(16) as u16).collect();
            let offset: Vec<u16> = (0..3).map(|_| rng.uniform_index(16) as u16).collect();
            let base = dot(
                &rotate(q.data(), [p[0], p[1], p[2]], &cfg).unwrap(),
                &rotate(k.data(), [s[0], s[1], s[2]], &cfg).unwrap(),
            );
            let shifted = dot(
                &rotate(q.data(), [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]], &cfg)
                    .unwrap(),
                &rotate(k.data(), [s[0] + offset[0], s[1] + offset[1], s[2] + offset[2]], &cfg)
                    .unwrap(),
            );
            let scale = norm(q.data()) * norm(k.data());
            assert!(
                (base - shifted).abs() < 1e-4 * scale.max(1.0),
                "dot changed: {base} vs {shifted}"
            );
        }
    }

    #[test]
    fn same_phase_attention_peaks_at_zero_distance() {
        // With q = k, the rotated dot product as a function of a single-axis
        // phase difference is maximal at Δ = 0.
        let cfg = RopeConfig::new(24).unwrap();
        let mut rng = RngState::seeded(37);
        let q = rng.gaussian(vec![24]);
        let at_zero = dot(q.data(), q.data());
        for delta in -8i32..=8 {
            if delta == 0 {
                continue;
            }
            let (pa, pb) = if delta > 0 {
                (delta as u16, 0u16)
            } else {
                (0u16, (-delta) as u16)
            };
            let d = dot(
                &rotate(q.data(), [pa, 0, 0], &cfg).unwrap(),
                &rotate(q.data(), [pb, 0, 0], &cfg).unwrap(),
            );
            assert!(d < at_zero, "Δ={delta}: {d} !< {at_zero}");
        }
    }

    #[test]
    fn dim_must_be_multiple_of_six() {
        assert!(RopeConfig::new(0).is_err());
        assert!(RopeConfig::new(8).is_err());
        assert!(RopeConfig::new(6).is_ok());
        assert!(RopeConfig::new(48).is_ok());
    }

    #[test]
    fn rotate_rejects_wrong_length() {
        let cfg = RopeConfig::new(6).unwrap();
        assert!(rotate(&[0.0; 5], [1, 0, 0], &cfg).is_err());
    }
}
