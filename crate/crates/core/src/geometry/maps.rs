//! Per-view condition maps and their serialization.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::Grid;

/// Background sentinel written into every float channel of uncovered pixels.
pub const BACKGROUND: f32 = -1.0;

/// Rasterizer output for one view: canonical coordinates, world-frame
/// normals, coverage mask, texel UVs and depth, all at one resolution.
///
/// Covered pixels carry canonical coordinates in `[0,1]³` and unit normals;
/// background pixels carry [`BACKGROUND`] in every channel and mask 0.
#[derive(Debug, Clone)]
pub struct ConditionMaps {
    pub resolution: usize,
    /// H×W×3 canonical coordinate map.
    pub ccm: Grid,
    /// H×W×3 world-frame unit normals.
    pub normal: Grid,
    /// H×W coverage (1.0 covered, 0.0 background).
    pub mask: Grid,
    /// H×W×2 texel coordinates.
    pub uv: Grid,
    /// H×W depth along the camera forward axis.
    pub depth: Grid,
}

impl ConditionMaps {
    pub fn background(resolution: usize) -> Self {
        ConditionMaps {
            resolution,
            ccm: Grid::filled(vec![resolution, resolution, 3], BACKGROUND),
            normal: Grid::filled(vec![resolution, resolution, 3], BACKGROUND),
            mask: Grid::zeros(vec![resolution, resolution]),
            uv: Grid::filled(vec![resolution, resolution, 2], BACKGROUND),
            depth: Grid::filled(vec![resolution, resolution], BACKGROUND),
        }
    }

    pub fn is_covered(&self, row: usize, col: usize) -> bool {
        self.mask.data()[row * self.resolution + col] > 0.5
    }

    pub fn covered_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }

    pub fn ccm_at(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.resolution + col) * 3;
        let d = self.ccm.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    pub fn normal_at(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.resolution + col) * 3;
        let d = self.normal.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    pub fn uv_at(&self, row: usize, col: usize) -> [f32; 2] {
        let i = (row * self.resolution + col) * 2;
        let d = self.uv.data();
        [d[i], d[i + 1]]
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f32 {
        self.depth.data()[row * self.resolution + col]
    }

    /// Write the 8-bit PNG set (`<stem>_ccm.png`, `_normal.png`, `_uv.png`,
    /// `_depth.png`). Channels are scaled from `[0,1]`, normals from
    /// `[-1,1]`, depth from one canonical unit around the rig distance;
    /// sentinel pixels come out pure black with the mask in alpha.
    pub fn save_pngs(&self, dir: &Path, stem: &str) -> Result<()> {
        let res = self.resolution as u32;
        let mask = self.mask.data();
        let encode = |values: &dyn Fn(usize) -> [f32; 3], path: &Path| -> Result<()> {
            let mut buf = Vec::with_capacity((res * res * 4) as usize);
            for (p, &m) in mask.iter().enumerate() {
                if m > 0.5 {
                    let v = values(p);
                    for c in v {
                        buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                    buf.push(255);
                } else {
                    buf.extend_from_slice(&[0, 0, 0, 0]);
                }
            }
            image::save_buffer(path, &buf, res, res, image::ColorType::Rgba8)?;
            Ok(())
        };
        let ccm = self.ccm.data();
        encode(
            &|p| [ccm[p * 3], ccm[p * 3 + 1], ccm[p * 3 + 2]],
            &dir.join(format!("{stem}_ccm.png")),
        )?;
        let normal = self.normal.data();
        encode(
            &|p| {
                [
                    normal[p * 3] * 0.5 + 0.5,
                    normal[p * 3 + 1] * 0.5 + 0.5,
                    normal[p * 3 + 2] * 0.5 + 0.5,
                ]
            },
            &dir.join(format!("{stem}_normal.png")),
        )?;
        let uv = self.uv.data();
        encode(
            &|p| [uv[p * 2], uv[p * 2 + 1], 0.0],
            &dir.join(format!("{stem}_uv.png")),
        )?;
        let depth = self.depth.data();
        encode(
            &|p| {
                let d = (depth[p] - (super::camera::RIG_CENTER[2] + 0.5)) * 0.5 + 0.5;
                [d, d, d]
            },
            &dir.join(format!("{stem}_depth.png")),
        )?;
        Ok(())
    }

    /// Lossless float sidecars alongside the PNGs.
    pub fn save_sidecars(&self, dir: &Path, stem: &str) -> Result<()> {
        io::write_grid(&dir.join(format!("{stem}_ccm.vxg")), &self.ccm)?;
        io::write_grid(&dir.join(format!("{stem}_normal.vxg")), &self.normal)?;
        io::write_grid(&dir.join(format!("{stem}_mask.vxg")), &self.mask)?;
        io::write_grid(&dir.join(format!("{stem}_uv.vxg")), &self.uv)?;
        io::write_grid(&dir.join(format!("{stem}_depth.vxg")), &self.depth)?;
        Ok(())
    }

    pub fn load_sidecars(dir: &Path, stem: &str) -> Result<Self> {
        let ccm = io::read_grid(&dir.join(format!("{stem}_ccm.vxg")))?;
        let normal = io::read_grid(&dir.join(format!("{stem}_normal.vxg")))?;
        let mask = io::read_grid(&dir.join(format!("{stem}_mask.vxg")))?;
        let uv = io::read_grid(&dir.join(format!("{stem}_uv.vxg")))?;
        let depth = io::read_grid(&dir.join(format!("{stem}_depth.vxg")))?;
        let resolution = match mask.shape() {
            [h, w] if h == w => *h,
            s => return Err(Error::Format(format!("mask sidecar has shape {s:?}"))),
        };
        Ok(ConditionMaps {
            resolution,
            ccm,
            normal,
            mask,
            uv,
            depth,
        })
    }
}

/// Downsample condition maps by integer-factor nearest sampling (top-left
/// aligned), never averaging: every output coordinate is a value the
/// rasterizer actually produced, so quantized voxel indices stay genuine
/// surface positions. Aligned nearest picks compose: `64→16→8` equals
/// `64→8`.
pub fn downsample_conditions(maps: &ConditionMaps, target: usize) -> Result<ConditionMaps> {
    if target == 0 || maps.resolution % target != 0 {
        return Err(Error::invalid(format!(
            "target resolution {target} does not divide source {}",
            maps.resolution
        )));
    }
    let factor = maps.resolution / target;
    if factor == 1 {
        return Ok(maps.clone());
    }
    let pick = |src: &Grid, channels: usize| -> Grid {
        let mut out = Vec::with_capacity(target * target * channels);
        for i in 0..target {
            for j in 0..target {
                let s = ((i * factor) * maps.resolution + j * factor) * channels;
                out.extend_from_slice(&src.data()[s..s + channels]);
            }
        }
        let shape = if channels == 1 {
            vec![target, target]
        } else {
            vec![target, target, channels]
        };
        Grid::new(shape, out).expect("sizes agree by construction")
    };
    Ok(ConditionMaps {
        resolution: target,
        ccm: pick(&maps.ccm, 3),
        normal: pick(&maps.normal, 3),
        mask: pick(&maps.mask, 1),
        uv: pick(&maps.uv, 2),
        depth: pick(&maps.depth, 1),
    })
}
