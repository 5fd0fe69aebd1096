//! Mesh ingestion, canonical normalization, the orthographic camera rig and
//! the software rasterizer that produces per-view condition maps.

mod camera;
mod maps;
mod mesh;
mod raster;

pub use camera::{make_camera_rig, CameraView};
pub use maps::{downsample_conditions, ConditionMaps};
pub use mesh::{load_mesh, normalize_to_canonical, primitives, Mesh, Triangle};
pub use raster::rasterize_conditions;

pub(crate) mod vec3 {
    pub fn add(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }
    pub fn sub(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }
    pub fn scale(a: [f32; 3], s: f32) -> [f32; 3] {
        [a[0] * s, a[1] * s, a[2] * s]
    }
    pub fn dot(a: [f32; 3], b: [f32; 3]) -> f32 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }
    pub fn cross(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }
    pub fn norm(a: [f32; 3]) -> f32 {
        dot(a, a).sqrt()
    }
    pub fn normalize(a: [f32; 3]) -> [f32; 3] {
        let n = norm(a);
        if n > 0.0 {
            scale(a, 1.0 / n)
        } else {
            a
        }
    }
}
