//! Wavefront-style mesh loading, canonical normalization and procedural
//! test meshes.

use std::fs;
use std::path::Path;

use super::vec3;
use crate::error::{Error, Result};

/// Index triple per corner: position / normal / uv into the shared pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triangle {
    pub pos: [u32; 3],
    pub nrm: [u32; 3],
    pub uv: [u32; 3],
}

/// Triangle mesh with positions, unit normals and `[0,1]²` UV coordinates.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub positions: Vec<[f32; 3]>,
    pub normals: Vec<[f32; 3]>,
    pub uvs: Vec<[f32; 2]>,
    pub triangles: Vec<Triangle>,
}

impl Mesh {
    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> Option<([f32; 3], [f32; 3])> {
        let first = *self.positions.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }

    fn validate_indices(&self) -> Result<()> {
        let (np, nn, nt) = (
            self.positions.len() as u32,
            self.normals.len() as u32,
            self.uvs.len() as u32,
        );
        for t in &self.triangles {
            for k in 0..3 {
                if t.pos[k] >= np || t.nrm[k] >= nn || t.uv[k] >= nt {
                    return Err(Error::Mesh("triangle references out-of-range index".into()));
                }
            }
        }
        Ok(())
    }
}

/// Load a Wavefront `.obj` triangle mesh. Non-triangle faces are
/// fan-triangulated, missing normals are computed as area-weighted vertex
/// normals, and missing UVs are an error: the pipeline needs a UV
/// parameterization to bake into.
pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Mesh(format!("cannot read {}: {e}", path.display())))?;
    parse_obj(&text)
}

pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut positions: Vec<[f32; 3]> = Vec::new();
    let mut normals: Vec<[f32; 3]> = Vec::new();
    let mut uvs: Vec<[f32; 2]> = Vec::new();
    // Corner = (pos_idx, uv_idx, nrm_idx or None before normal synthesis).
    let mut faces: Vec<Vec<(u32, u32, Option<u32>)>> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap();
        let ctx = |msg: &str| Error::Mesh(format!("line {}: {msg}", lineno + 1));
        match tag {
            "v" => positions.push(parse_floats3(&mut parts).ok_or_else(|| ctx("bad vertex"))?),
            "vn" => normals.push(parse_floats3(&mut parts).ok_or_else(|| ctx("bad normal"))?),
            "vt" => {
                let u: f32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| ctx("bad uv"))?;
                let v: f32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| ctx("bad uv"))?;
                uvs.push([u, v]);
            }
            "f" => {
                let mut corners = Vec::new();
                for corner in parts {
                    corners.push(parse_corner(
                        corner,
                        positions.len(),
                        uvs.len(),
                        normals.len(),
                    )
                    .ok_or_else(|| ctx("bad face corner"))?);
                }
                if corners.len() < 3 {
                    return Err(ctx("face with fewer than 3 corners"));
                }
                faces.push(corners);
            }
            // Groups, materials, smoothing and the rest are irrelevant here.
            _ => {}
        }
    }

    if positions.is_empty() || faces.is_empty() {
        return Err(Error::Mesh("empty mesh".into()));
    }
    for face in &faces {
        for &(_, uv, _) in face {
            if uv == u32::MAX {
                return Err(Error::Mesh("mesh lacks UV parameterization".into()));
            }
        }
    }
    if uvs.is_empty() {
        return Err(Error::Mesh("mesh lacks UV parameterization".into()));
    }

    // Fan-triangulate.
    let mut tris: Vec<[(u32, u32, Option<u32>); 3]> = Vec::new();
    for face in &faces {
        for i in 1..face.len() - 1 {
            tris.push([face[0], face[i], face[i + 1]]);
        }
    }

    let need_normals = tris
        .iter()
        .any(|t| t.iter().any(|&(_, _, n)| n.is_none()));
    if need_normals {
        normals = area_weighted_normals(&positions, &tris);
    }

    let triangles = tris
        .into_iter()
        .map(|t| Triangle {
            pos: [t[0].0, t[1].0, t[2].0],
            uv: [t[0].1, t[1].1, t[2].1],
            nrm: if need_normals {
                // Synthesized normals are indexed per position.
                [t[0].0, t[1].0, t[2].0]
            } else {
                [t[0].2.unwrap(), t[1].2.unwrap(), t[2].2.unwrap()]
            },
        })
        .collect();

    let mesh = Mesh {
        positions,
        normals,
        uvs,
        triangles,
    };
    mesh.validate_indices()?;
    Ok(mesh)
}

fn parse_floats3<'a>(parts: &mut impl Iterator<Item = &'a str>) -> Option<[f32; 3]> {
    let x: f32 = parts.next()?.parse().ok()?;
    let y: f32 = parts.next()?.parse().ok()?;
    let z: f32 = parts.next()?.parse().ok()?;
    Some([x, y, z])
}

/// Parse `p`, `p/t`, `p//n` or `p/t/n`, resolving 1-based and negative
/// (relative) indices. A missing uv slot becomes `u32::MAX` so the caller
/// can report missing parameterization uniformly.
fn parse_corner(s: &str, np: usize, nt: usize, nn: usize) -> Option<(u32, u32, Option<u32>)> {
    let mut it = s.split('/');
    let p = resolve_index(it.next()?, np)?;
    let t = match it.next() {
        Some("") | None => u32::MAX,
        Some(v) => resolve_index(v, nt)?,
    };
    let n = match it.next() {
        Some("") | None => None,
        Some(v) => Some(resolve_index(v, nn)?),
    };
    Some((p, t, n))
}

fn resolve_index(s: &str, len: usize) -> Option<u32> {
    let v: i64 = s.parse().ok()?;
    let idx = if v > 0 {
        v - 1
    } else if v < 0 {
        len as i64 + v
    } else {
        return None;
    };
    if idx < 0 || idx as usize >= len {
        return None;
    }
    Some(idx as u32)
}

fn area_weighted_normals(
    positions: &[[f32; 3]],
    tris: &[[(u32, u32, Option<u32>); 3]],
) -> Vec<[f32; 3]> {
    let mut acc = vec![[0.0f32; 3]; positions.len()];
    for t in tris {
        let a = positions[t[0].0 as usize];
        let b = positions[t[1].0 as usize];
        let c = positions[t[2].0 as usize];
        // Cross product length is twice the area, so summing the raw cross
        // products weights each face normal by area.
        let n = vec3::cross(vec3::sub(b, a), vec3::sub(c, a));
        for &(pi, _, _) in t {
            acc[pi as usize] = vec3::add(acc[pi as usize], n);
        }
    }
    acc.into_iter().map(vec3::normalize).collect()
}

/// Map the mesh's bounding box into `[0,1]³` by one uniform scale plus a
/// translation that centers it at `(0.5, 0.5, 0.5)`. Aspect ratio is
/// preserved: the longest axis spans `[0,1]`, the others are centered.
pub fn normalize_to_canonical(mesh: &Mesh) -> Result<Mesh> {
    let (lo, hi) = mesh.bounds().ok_or_else(|| Error::Mesh("empty mesh".into()))?;
    let extents = vec3::sub(hi, lo);
    let max_extent = extents[0].max(extents[1]).max(extents[2]);
    if max_extent <= 0.0 {
        return Err(Error::Mesh("zero-extent bounding box".into()));
    }
    let scale = 1.0 / max_extent;
    let center = vec3::scale(vec3::add(lo, hi), 0.5);
    let positions = mesh
        .positions
        .iter()
        .map(|&p| {
            let rel = vec3::scale(vec3::sub(p, center), scale);
            vec3::add(rel, [0.5, 0.5, 0.5])
        })
        .collect();
    Ok(Mesh {
        positions,
        normals: mesh.normals.clone(),
        uvs: mesh.uvs.clone(),
        triangles: mesh.triangles.clone(),
    })
}

/// Procedural meshes with UVs, used by the synthetic dataset and tests.
/// All are centered at the origin; run [`normalize_to_canonical`] before
/// rasterizing.
pub mod primitives {
    use super::*;

    /// Axis-aligned cube built from 6 quads (12 triangles, 8 positions).
    /// Each face gets its own UV tile in a 3×2 atlas so no texel is shared
    /// between faces.
    pub fn cube() -> Mesh {
        let positions: Vec<[f32; 3]> = (0..8)
            .map(|i| {
                [
                    if i & 1 == 0 { -0.5 } else { 0.5 },
                    if i & 2 == 0 { -0.5 } else { 0.5 },
                    if i & 4 == 0 { -0.5 } else { 0.5 },
                ]
            })
            .collect();
        // Quads wound counter-clockwise seen from outside.
        let faces: [([usize; 4], [f32; 3]); 6] = [
            ([3, 7, 5, 1], [1.0, 0.0, 0.0]),
            ([6, 2, 0, 4], [-1.0, 0.0, 0.0]),
            ([2, 6, 7, 3], [0.0, 1.0, 0.0]),
            ([0, 1, 5, 4], [0.0, -1.0, 0.0]),
            ([7, 6, 4, 5], [0.0, 0.0, 1.0]),
            ([2, 3, 1, 0], [0.0, 0.0, -1.0]),
        ];
        let mut normals = Vec::new();
        let mut uvs = Vec::new();
        let mut triangles = Vec::new();
        for (fi, (quad, n)) in faces.iter().enumerate() {
            let ni = normals.len() as u32;
            normals.push(*n);
            let tile_x = (fi % 3) as f32 / 3.0;
            let tile_y = (fi / 3) as f32 / 2.0;
            let uv0 = uvs.len() as u32;
            // Small inset keeps face borders off shared texel rows.
            let inset = 0.02;
            for (du, dv) in [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)] {
                uvs.push([
                    tile_x + (inset + du * (1.0 - 2.0 * inset)) / 3.0,
                    tile_y + (inset + dv * (1.0 - 2.0 * inset)) / 2.0,
                ]);
            }
            for (a, b, c) in [(0, 1, 2), (0, 2, 3)] {
                triangles.push(Triangle {
                    pos: [quad[a] as u32, quad[b] as u32, quad[c] as u32],
                    nrm: [ni; 3],
                    uv: [uv0 + a as u32, uv0 + b as u32, uv0 + c as u32],
                });
            }
        }
        Mesh {
            positions,
            normals,
            uvs,
            triangles,
        }
    }

    /// Unit-diameter UV sphere with an equirectangular parameterization
    /// (u = azimuth, v = polar angle). The seam column is duplicated so UVs
    /// stay continuous within every triangle.
    pub fn sphere(segments: usize, rings: usize) -> Mesh {
        assert!(segments >= 3 && rings >= 2);
        let mut positions = Vec::new();
        let mut normals = Vec::new();
        let mut uvs = Vec::new();
        for i in 0..=rings {
            let v = i as f32 / rings as f32;
            let polar = v * std::f32::consts::PI;
            for j in 0..=segments {
                let u = j as f32 / segments as f32;
                let az = u * std::f32::consts::TAU;
                let dir = [
                    polar.sin() * az.sin(),
                    polar.cos(),
                    polar.sin() * az.cos(),
                ];
                positions.push(vec3::scale(dir, 0.5));
                normals.push(dir);
                uvs.push([u, v]);
            }
        }
        let stride = (segments + 1) as u32;
        let mut triangles = Vec::new();
        for i in 0..rings as u32 {
            for j in 0..segments as u32 {
                let a = i * stride + j;
                let b = a + 1;
                let c = a + stride;
                let d = c + 1;
                // Top cap degenerates (a == b position-wise) but keeps
                // winding consistent: outward faces are counter-clockwise.
                if i > 0 {
                    triangles.push(Triangle {
                        pos: [a, d, b],
                        nrm: [a, d, b],
                        uv: [a, d, b],
                    });
                }
                if i + 1 < rings as u32 {
                    triangles.push(Triangle {
                        pos: [a, c, d],
                        nrm: [a, c, d],
                        uv: [a, c, d],
                    });
                }
            }
        }
        Mesh {
            positions,
            normals,
            uvs,
            triangles,
        }
    }

    /// Torus around the y axis. u follows the major circle, v the tube.
    pub fn torus(major_radius: f32, minor_radius: f32, major_segs: usize, minor_segs: usize) -> Mesh {
        assert!(major_segs >= 3 && minor_segs >= 3);
        let mut positions = Vec::new();
        let mut normals = Vec::new();
        let mut uvs = Vec::new();
        for i in 0..=major_segs {
            let u = i as f32 / major_segs as f32;
            let phi = u * std::f32::consts::TAU;
            let ring_center = [major_radius * phi.sin(), 0.0, major_radius * phi.cos()];
            let radial = [phi.sin(), 0.0, phi.cos()];
            for j in 0..=minor_segs {
                let v = j as f32 / minor_segs as f32;
                let theta = v * std::f32::consts::TAU;
                let n = vec3::add(
                    vec3::scale(radial, theta.cos()),
                    [0.0, theta.sin(), 0.0],
                );
                positions.push(vec3::add(ring_center, vec3::scale(n, minor_radius)));
                normals.push(n);
                uvs.push([u, v]);
            }
        }
        let stride = (minor_segs + 1) as u32;
        let mut triangles = Vec::new();
        for i in 0..major_segs as u32 {
            for j in 0..minor_segs as u32 {
                let a = i * stride + j;
                let b = a + stride;
                let c = a + 1;
                let d = b + 1;
                triangles.push(Triangle {
                    pos: [a, b, d],
                    nrm: [a, b, d],
                    uv: [a, b, d],
                });
                triangles.push(Triangle {
                    pos: [a, d, c],
                    nrm: [a, d, c],
                    uv: [a, d, c],
                });
            }
        }
        Mesh {
            positions,
            normals,
            uvs,
            triangles,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUBE_OBJ: &str = "\
v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nv 1 0 1\nv 1 1 1\nv 0 1 1\n\
vt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\n\
f 1/1 2/2 3/3 4/4\nf 5/1 8/4 7/3 6/2\nf 1/1 5/2 6/3 2/4\n\
f 2/1 6/2 7/3 3/4\nf 3/1 7/2 8/3 4/4\nf 5/1 1/2 4/3 8/4\n";

    #[test]
    fn cube_of_quads_fan_triangulates() {
        let mesh = parse_obj(CUBE_OBJ).unwrap();
        assert_eq!(mesh.positions.len(), 8);
        assert_eq!(mesh.triangles.len(), 12);
    }

    #[test]
    fn missing_normals_are_synthesized_unit_length() {
        let mesh = parse_obj(CUBE_OBJ).unwrap();
        assert!(!mesh.normals.is_empty());
        for n in &mesh.normals {
            let len = vec3::norm(*n);
            assert!((len - 1.0).abs() < 1e-4, "normal length {len}");
        }
    }

    #[test]
    fn missing_uvs_are_an_error() {
        let obj = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";
        let err = parse_obj(obj).unwrap_err();
        assert!(err.to_string().contains("UV parameterization"));
    }

    #[test]
    fn empty_mesh_is_an_error() {
        assert!(parse_obj("# nothing here\n").is_err());
    }

    #[test]
    fn canonical_cube_is_fixed_point() {
        let mesh = parse_obj(CUBE_OBJ).unwrap();
        let norm = normalize_to_canonical(&mesh).unwrap();
        for (a, b) in mesh.positions.iter().zip(&norm.positions) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn off_origin_cube_maps_to_unit_box() {
        let mut mesh = parse_obj(CUBE_OBJ).unwrap();
        for p in &mut mesh.positions {
            for k in 0..3 {
                p[k] = 10.0 + 2.0 * p[k];
            }
        }
        let norm = normalize_to_canonical(&mesh).unwrap();
        let (lo, hi) = norm.bounds().unwrap();
        for k in 0..3 {
            assert!((lo[k] - 0.0).abs() < 1e-6);
            assert!((hi[k] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn elongated_box_preserves_aspect() {
        let mut mesh = parse_obj(CUBE_OBJ).unwrap();
        for p in &mut mesh.positions {
            p[0] *= 2.0; // 2×1×1 box
        }
        let norm = normalize_to_canonical(&mesh).unwrap();
        let (lo, hi) = norm.bounds().unwrap();
        assert!((lo[0] - 0.0).abs() < 1e-6 && (hi[0] - 1.0).abs() < 1e-6);
        for k in 1..3 {
            assert!((lo[k] - 0.25).abs() < 1e-6, "lo[{k}] = {}", lo[k]);
            assert!((hi[k] - 0.75).abs() < 1e-6, "hi[{k}] = {}", hi[k]);
        }
    }

    #[test]
    fn zero_extent_is_an_error() {
        let obj = "v 0 0 0\nv 0 0 0\nv 0 0 0\nvt 0 0\nf 1/1 2/1 3/1\n";
        let mesh = parse_obj(obj).unwrap();
        assert!(normalize_to_canonical(&mesh).is_err());
    }

    #[test]
    fn primitives_are_well_formed() {
        for mesh in [
            primitives::cube(),
            primitives::sphere(24, 12),
            primitives::torus(0.35, 0.15, 24, 12),
        ] {
            assert!(!mesh.triangles.is_empty());
            mesh.validate_indices().unwrap();
            for n in &mesh.normals {
                assert!((vec3::norm(*n) - 1.0).abs() < 1e-3);
            }
            for uv in &mesh.uvs {
                assert!(uv[0] >= 0.0 && uv[0] <= 1.0 && uv[1] >= 0.0 && uv[1] <= 1.0);
            }
        }
    }

    #[test]
    fn negative_indices_resolve_relative() {
        let obj = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf -3/-3 -2/-2 -1/-1\n";
        let mesh = parse_obj(obj).unwrap();
        assert_eq!(mesh.triangles.len(), 1);
        assert_eq!(mesh.triangles[0].pos, [0, 1, 2]);
    }
}
