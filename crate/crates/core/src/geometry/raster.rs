//! Z-buffered barycentric triangle rasterizer.
//!
//! Orthographic projection, back-face culling, no antialiasing. Triangles
//! are walked in mesh order with a strict depth test, so output is
//! bit-identical across runs.

use super::maps::ConditionMaps;
use super::mesh::Mesh;
use super::vec3;
use super::CameraView;
use crate::numerics::Grid;

/// Signed double area of triangle `(a, b, c)` in pixel space.
fn edge(a: [f32; 2], b: [f32; 2], p: [f32; 2]) -> f32 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Rasterize a canonical-space mesh into per-view condition maps: the
/// interpolated canonical position of the visible surface point, its
/// world-frame normal, texel UV and depth, plus the coverage mask.
/// Empty views yield all-background maps.
pub fn rasterize_conditions(mesh: &Mesh, cam: &CameraView, resolution: usize) -> ConditionMaps {
    let mut maps = ConditionMaps::background(resolution);
    let forward = cam.forward();

    // Project every position once.
    let projected: Vec<(f32, f32, f32)> = mesh
        .positions
        .iter()
        .map(|&p| cam.project(p, resolution))
        .collect();

    let mut zbuf = vec![f32::INFINITY; resolution * resolution];
    let ccm = maps.ccm.data_mut();
    let mut normal = std::mem::replace(&mut maps.normal, Grid::zeros(vec![0]));
    let mut mask = std::mem::replace(&mut maps.mask, Grid::zeros(vec![0]));
    let mut uvm = std::mem::replace(&mut maps.uv, Grid::zeros(vec![0]));
    let mut depthm = std::mem::replace(&mut maps.depth, Grid::zeros(vec![0]));

    for tri in &mesh.triangles {
        let wa = mesh.positions[tri.pos[0] as usize];
        let wb = mesh.positions[tri.pos[1] as usize];
        let wc = mesh.positions[tri.pos[2] as usize];

        // Back-face culling in world space: outward (counter-clockwise)
        // faces are visible when their geometric normal opposes the view
        // direction.
        let face_n = vec3::cross(vec3::sub(wb, wa), vec3::sub(wc, wa));
        if vec3::dot(face_n, forward) >= 0.0 {
            continue;
        }

        let (ax, ay, az) = projected[tri.pos[0] as usize];
        let (bx, by, bz) = projected[tri.pos[1] as usize];
        let (cx, cy, cz) = projected[tri.pos[2] as usize];
        let pa = [ax, ay];
        let pb = [bx, by];
        let pc = [cx, cy];
        let area = edge(pa, pb, pc);
        if area == 0.0 {
            continue;
        }

        let min_x = ax.min(bx).min(cx).floor().max(0.0) as usize;
        let max_x = (ax.max(bx).max(cx).ceil() as usize).min(resolution);
        let min_y = ay.min(by).min(cy).floor().max(0.0) as usize;
        let max_y = (ay.max(by).max(cy).ceil() as usize).min(resolution);

        let na = mesh.normals[tri.nrm[0] as usize];
        let nb = mesh.normals[tri.nrm[1] as usize];
        let nc = mesh.normals[tri.nrm[2] as usize];
        let ta = mesh.uvs[tri.uv[0] as usize];
        let tb = mesh.uvs[tri.uv[1] as usize];
        let tc = mesh.uvs[tri.uv[2] as usize];

        let inv_area = 1.0 / area;
        for row in min_y..max_y {
            for col in min_x..max_x {
                let p = [col as f32 + 0.5, row as f32 + 0.5];
                let w0 = edge(pb, pc, p) * inv_area;
                if w0 < 0.0 {
                    continue;
                }
                let w1 = edge(pc, pa, p) * inv_area;
                if w1 < 0.0 {
                    continue;
                }
                let w2 = 1.0 - w0 - w1;
                if w2 < 0.0 {
                    continue;
                }
                let depth = w0 * az + w1 * bz + w2 * cz;
                let idx = row * resolution + col;
                if depth >= zbuf[idx] {
                    continue;
                }
                zbuf[idx] = depth;

                for k in 0..3 {
                    ccm[idx * 3 + k] = w0 * wa[k] + w1 * wb[k] + w2 * wc[k];
                }
                let n = vec3::normalize([
                    w0 * na[0] + w1 * nb[0] + w2 * nc[0],
                    w0 * na[1] + w1 * nb[1] + w2 * nc[1],
                    w0 * na[2] + w1 * nb[2] + w2 * nc[2],
                ]);
                normal.data_mut()[idx * 3..idx * 3 + 3].copy_from_slice(&n);
                uvm.data_mut()[idx * 2] = w0 * ta[0] + w1 * tb[0] + w2 * tc[0];
                uvm.data_mut()[idx * 2 + 1] = w0 * ta[1] + w1 * tb[1] + w2 * tc[1];
                depthm.data_mut()[idx] = depth;
                mask.data_mut()[idx] = 1.0;
            }
        }
    }

    maps.normal = normal;
    maps.mask = mask;
    maps.uv = uvm;
    maps.depth = depthm;
    maps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::maps::BACKGROUND;
    use crate::geometry::{make_camera_rig, normalize_to_canonical, primitives};

    fn canonical_sphere() -> Mesh {
        normalize_to_canonical(&primitives::sphere(48, 24)).unwrap()
    }

    #[test]
    fn center_pixel_matches_analytic_ray_sphere_hit() {
        // Front camera ray through the image center hits the canonical
        // sphere (center 0.5³, radius 0.5) nearest at (0.5, 0.5, 1.0).
        let mesh = canonical_sphere();
        let res = 64;
        let cam = &make_camera_rig(1, 0.0, 0.6).unwrap()[0];
        let maps = rasterize_conditions(&mesh, cam, res);
        let c = res / 2;
        // The center of a 64² image sits on a pixel corner; check the four
        // surrounding pixels against the analytic surface point.
        let tol = 2.0 / res as f32;
        for (row, col) in [(c - 1, c - 1), (c - 1, c), (c, c - 1), (c, c)] {
            assert!(maps.is_covered(row, col));
            let ccm = maps.ccm_at(row, col);
            // The analytic hit for the exact center ray; neighbors deviate
            // by at most a pixel footprint, covered by the tolerance.
            assert!((ccm[0] - 0.5).abs() < tol, "x {}", ccm[0]);
            assert!((ccm[1] - 0.5).abs() < tol, "y {}", ccm[1]);
            assert!((ccm[2] - 1.0).abs() < tol, "z {}", ccm[2]);
        }
    }

    #[test]
    fn background_pixels_carry_sentinel() {
        let mesh = canonical_sphere();
        let cam = &make_camera_rig(1, 0.0, 0.6).unwrap()[0];
        let maps = rasterize_conditions(&mesh, cam, 32);
        // Corners are outside the silhouette of a sphere.
        assert!(!maps.is_covered(0, 0));
        assert_eq!(maps.ccm_at(0, 0), [BACKGROUND; 3]);
        assert_eq!(maps.normal_at(0, 0), [BACKGROUND; 3]);
        assert_eq!(maps.uv_at(0, 0), [BACKGROUND; 2]);
        assert_eq!(maps.depth_at(0, 0), BACKGROUND);
    }

    #[test]
    fn covered_pixels_have_unit_normals_and_canonical_ccm() {
        let mesh = canonical_sphere();
        let cam = &make_camera_rig(1, 20.0, 0.6).unwrap()[0];
        let maps = rasterize_conditions(&mesh, cam, 48);
        assert!(maps.covered_count() > 0);
        for row in 0..48 {
            for col in 0..48 {
                if !maps.is_covered(row, col) {
                    continue;
                }
                let n = maps.normal_at(row, col);
                assert!((vec3::norm(n) - 1.0).abs() < 1e-3);
                let ccm = maps.ccm_at(row, col);
                for v in ccm {
                    assert!((-1e-4..=1.0 + 1e-4).contains(&v), "ccm {v}");
                }
            }
        }
    }

    #[test]
    fn front_back_silhouettes_mirror() {
        let mesh = canonical_sphere();
        let res = 64;
        let front = &make_camera_rig(2, 0.0, 0.6).unwrap()[0];
        let back = &make_camera_rig(2, 0.0, 0.6).unwrap()[1];
        let fm = rasterize_conditions(&mesh, front, res);
        let bm = rasterize_conditions(&mesh, back, res);
        let mut mismatches = 0;
        for row in 0..res {
            for col in 0..res {
                let f = fm.is_covered(row, col);
                let b = bm.is_covered(row, res - 1 - col);
                if f != b {
                    mismatches += 1;
                }
            }
        }
        // Boundary pixels may fall either way in float arithmetic; the
        // silhouettes themselves must mirror.
        assert!(
            mismatches <= res * res / 200,
            "{mismatches} mismatched silhouette pixels"
        );
    }

    #[test]
    fn unproject_roundtrip_recovers_ccm() {
        let mesh = canonical_sphere();
        let res = 64;
        let cam = &make_camera_rig(3, 10.0, 0.6).unwrap()[1];
        let maps = rasterize_conditions(&mesh, cam, res);
        let tol = 2.0 * (2.0 * cam.ortho_half_extent) / res as f32;
        for row in 0..res {
            for col in 0..res {
                if !maps.is_covered(row, col) {
                    continue;
                }
                let p = cam.unproject(
                    col as f32 + 0.5,
                    row as f32 + 0.5,
                    maps.depth_at(row, col),
                    res,
                );
                let ccm = maps.ccm_at(row, col);
                for k in 0..3 {
                    assert!((p[k] - ccm[k]).abs() < tol, "axis {k}: {} vs {}", p[k], ccm[k]);
                }
            }
        }
    }

    #[test]
    fn rasterization_is_deterministic() {
        let mesh = canonical_sphere();
        let cam = &make_camera_rig(4, 15.0, 0.55).unwrap()[2];
        let a = rasterize_conditions(&mesh, cam, 40);
        let b = rasterize_conditions(&mesh, cam, 40);
        assert_eq!(a.ccm.data(), b.ccm.data());
        assert_eq!(a.depth.data(), b.depth.data());
    }

    #[test]
    fn empty_scene_renders_background() {
        // A mesh entirely outside the camera frustum: shift the canonical
        // cube far off axis before rasterizing without re-normalizing.
        let mut mesh = normalize_to_canonical(&primitives::cube()).unwrap();
        for p in &mut mesh.positions {
            p[0] += 100.0;
        }
        let cam = &make_camera_rig(1, 0.0, 0.6).unwrap()[0];
        let maps = rasterize_conditions(&mesh, cam, 16);
        assert_eq!(maps.covered_count(), 0);
    }
}
