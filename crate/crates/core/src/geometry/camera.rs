//! Orthographic object-centric camera rig.
//!
//! Cameras orbit the canonical-space center `(0.5, 0.5, 0.5)` at evenly
//! spaced azimuths, all at one elevation. Azimuth 0 looks down the world -z
//! axis (camera on +z) and is flagged as the reference pose.

use super::vec3;
use crate::error::{Error, Result};

/// Rigid world-to-camera transform plus an orthographic extent.
///
/// Camera axes: x right, y up, z along the viewing direction, so depth
/// grows away from the camera. Pixel row 0 is the top of the image.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub azimuth_deg: f32,
    pub elevation_deg: f32,
    pub ortho_half_extent: f32,
    /// Row-major 4×4 rigid transform taking world points to camera space.
    pub view_matrix: [[f32; 4]; 4],
    pub is_reference_pose: bool,
}

/// Center of the canonical cube every camera looks at.
pub const RIG_CENTER: [f32; 3] = [0.5, 0.5, 0.5];
/// Orbit radius; anything > sqrt(3)/2 keeps the eye outside the unit cube.
const RIG_DISTANCE: f32 = 2.0;

impl CameraView {
    pub fn at(azimuth_deg: f32, elevation_deg: f32, half_extent: f32, reference: bool) -> Self {
        let az = azimuth_deg.to_radians();
        let el = elevation_deg.to_radians();
        let out_dir = [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()];
        let eye = vec3::add(RIG_CENTER, vec3::scale(out_dir, RIG_DISTANCE));
        let forward = vec3::normalize(vec3::sub(RIG_CENTER, eye));
        let right = vec3::normalize(vec3::cross(forward, [0.0, 1.0, 0.0]));
        let up = vec3::cross(right, forward);
        let view_matrix = [
            [right[0], right[1], right[2], -vec3::dot(right, eye)],
            [up[0], up[1], up[2], -vec3::dot(up, eye)],
            [forward[0], forward[1], forward[2], -vec3::dot(forward, eye)],
            [0.0, 0.0, 0.0, 1.0],
        ];
        CameraView {
            azimuth_deg,
            elevation_deg,
            ortho_half_extent: half_extent,
            view_matrix,
            is_reference_pose: reference,
        }
    }

    /// World point to camera space (x right, y up, z depth).
    pub fn to_camera(&self, p: [f32; 3]) -> [f32; 3] {
        let m = &self.view_matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// World point to continuous pixel coordinates plus depth at the given
    /// image resolution. Pixel centers sit at half-integer coordinates.
    pub fn project(&self, p: [f32; 3], resolution: usize) -> (f32, f32, f32) {
        let c = self.to_camera(p);
        let h = self.ortho_half_extent;
        let px = (c[0] / h * 0.5 + 0.5) * resolution as f32;
        let py = (0.5 - c[1] / h * 0.5) * resolution as f32;
        (px, py, c[2])
    }

    /// Inverse of [`project`](Self::project): pixel coordinates plus depth
    /// back to the world-space point.
    pub fn unproject(&self, px: f32, py: f32, depth: f32, resolution: usize) -> [f32; 3] {
        let h = self.ortho_half_extent;
        let cx = (px / resolution as f32 - 0.5) * 2.0 * h;
        let cy = (0.5 - py / resolution as f32) * 2.0 * h;
        let m = &self.view_matrix;
        // Rigid transform: inverse rotation is the transpose.
        let t = [m[0][3], m[1][3], m[2][3]];
        let local = [cx - t[0], cy - t[1], depth - t[2]];
        [
            m[0][0] * local[0] + m[1][0] * local[1] + m[2][0] * local[2],
            m[0][1] * local[0] + m[1][1] * local[1] + m[2][1] * local[2],
            m[0][2] * local[0] + m[1][2] * local[1] + m[2][2] * local[2],
        ]
    }

    /// Unit vector along the viewing direction.
    pub fn forward(&self) -> [f32; 3] {
        let m = &self.view_matrix;
        [m[2][0], m[2][1], m[2][2]]
    }
}

/// Evenly spaced azimuths starting at 0° (the reference pose), all at one
/// elevation, orthographic projection.
pub fn make_camera_rig(n_views: usize, elevation_deg: f32, half_extent: f32) -> Result<Vec<CameraView>> {
    if n_views < 1 || n_views > 12 {
        return Err(Error::invalid(format!(
            "n_views must be in [1, 12], got {n_views}"
        )));
    }
    if !(half_extent > 0.0) {
        return Err(Error::invalid("ortho half extent must be positive"));
    }
    Ok((0..n_views)
        .map(|i| {
            let az = 360.0 * i as f32 / n_views as f32;
            CameraView::at(az, elevation_deg, half_extent, i == 0)
        })
        .collect())
}
