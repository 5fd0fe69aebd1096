//! Multi-resolution voxel pyramid and the pixel-to-voxel index mapping.
//!
//! Each pyramid level quantizes canonical space into `R^l + 1` integer
//! positions per axis, with `R^l` equal to the feature-map side length at
//! that level: one voxel is roughly one pixel at every scale. Quantized
//! indices are the rotation phases consumed by the rotary embedding, so two
//! pixels that land in the same voxel get identical rotations no matter
//! which view they came from.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::ConditionMaps;

/// Per-level voxel resolutions, strictly decreasing with depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelPyramid {
    resolutions: Vec<u32>,
}

impl VoxelPyramid {
    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn resolution(&self, level: usize) -> u32 {
        self.resolutions[level]
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }
}

/// Build a pyramid whose voxel resolution at each level equals the
/// feature-map side length at that level.
pub fn build_pyramid(feature_resolutions: &[usize]) -> Result<VoxelPyramid> {
    if feature_resolutions.is_empty() {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    for w in feature_resolutions.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::invalid(format!(
                "pyramid resolutions must strictly decrease, got {feature_resolutions:?}"
            )));
        }
    }
    if feature_resolutions[feature_resolutions.len() - 1] < 1 {
        return Err(Error::invalid("pyramid resolution must be >= 1"));
    }
    Ok(VoxelPyramid {
        resolutions: feature_resolutions.iter().map(|&r| r as u32).collect(),
    })
}

/// Integer voxel coordinates per pixel at one pyramid level.
///
/// Each phase component lies in `[0, R^l]`; background pixels are flagged
/// invalid and carry phase `(0, 0, 0)`.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    pub level: usize,
    pub resolution: usize,
    phases: Vec<[u16; 3]>,
    valid: Vec<u8>,
}

impl PhaseGrid {
    /// All-invalid grid: every pixel passes through the rotary embedding
    /// unrotated. Used for inference-time embedding ablation.
    pub fn all_invalid(level: usize, resolution: usize) -> Self {
        PhaseGrid {
            level,
            resolution,
            phases: vec![[0; 3]; resolution * resolution],
            valid: vec![0; resolution * resolution],
        }
    }

    pub fn phase(&self, row: usize, col: usize) -> [u16; 3] {
        self.phases[row * self.resolution + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.resolution + col] != 0
    }

    pub fn phase_at(&self, token: usize) -> [u16; 3] {
        self.phases[token]
    }

    pub fn valid_at(&self, token: usize) -> bool {
        self.valid[token] != 0
    }

    pub fn token_count(&self) -> usize {
        self.phases.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v != 0).count()
    }

    /// Debug dump as a 16-bit RGB PNG (one channel per axis).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let res = self.resolution as u32;
        let mut buf: Vec<u16> = Vec::with_capacity(self.phases.len() * 3);
        for p in &self.phases {
            buf.extend_from_slice(&[p[0], p[1], p[2]]);
        }
        let bytes: Vec<u8> = buf.iter().flat_map(|v| v.to_be_bytes()).collect();
        image::save_buffer(path, &bytes, res, res, image::ColorType::Rgb16)?;
        Ok(())
    }
}

/// Quantize canonical coordinates to voxel indices: `round(pos · R^l)` per
/// axis (half away from zero), clamped to `[0, R^l]` so `pos = 1.0` lands on
/// the top boundary index. Background pixels become invalid with phase zero.
pub fn pixel_to_voxel(
    ccm: &ConditionMaps,
    pyramid: &VoxelPyramid,
    level: usize,
) -> Result<PhaseGrid> {
    if level >= pyramid.levels() {
        return Err(Error::invalid(format!(
            "level {level} out of range for {}-level pyramid",
            pyramid.levels()
        )));
    }
    let r = pyramid.resolution(level);
    if ccm.resolution != r as usize {
        return Err(Error::shape(format!(
            "condition maps at {}² do not match level {level} resolution {r}",
            ccm.resolution
        )));
    }
    let n = ccm.resolution * ccm.resolution;
    let mut phases = vec![[0u16; 3]; n];
    let mut valid = vec![0u8; n];
    let mask = ccm.mask.data();
    let pos = ccm.ccm.data();
    for i in 0..n {
        if mask[i] > 0.5 {
            valid[i] = 1;
            for a in 0..3 {
                let q = (pos[i * 3 + a] * r as f32).round();
                phases[i][a] = q.clamp(0.0, r as f32) as u16;
            }
        }
    }
    Ok(PhaseGrid {
        level,
        resolution: ccm.resolution,
        phases,
        valid,
    })
}

/// Quantize a single canonical position at voxel resolution `r`.
pub fn quantize(pos: [f32; 3], r: u32) -> [u16; 3] {
    let mut out = [0u16; 3];
    for a in 0..3 {
        out[a] = (pos[a] * r as f32).round().clamp(0.0, r as f32) as u16;
    }
    out
}
