//! Texture baking: back-project per-view images into UV space, blend the
//! partial textures by view incidence, score cross-view agreement with the
//! local alignment distance, fill holes and re-render.

pub mod patterns;

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{rasterize_conditions, CameraView, ConditionMaps, Mesh};
use crate::geometry::vec3;
use crate::io;
use crate::numerics::Grid;

/// Texel convention: `u` picks the column (`floor(u·R)`), `v` picks the row
/// (`floor(v·R)`), both clamped; row 0 is v = 0.
fn texel_of(uv: [f32; 2], res: usize) -> (usize, usize) {
    let tx = ((uv[0] * res as f32) as isize).clamp(0, res as isize - 1) as usize;
    let ty = ((uv[1] * res as f32) as isize).clamp(0, res as isize - 1) as usize;
    (ty, tx)
}

/// One view unprojected into UV space: texture, written-texel mask and the
/// incidence cosine between the surface normal and the view direction
/// (used as blend weight base).
#[derive(Debug, Clone)]
pub struct ViewPartial {
    pub resolution: usize,
    pub texture: Grid,
    pub mask: Grid,
    pub cosine: Grid,
    depth: Grid,
}

impl ViewPartial {
    fn empty(resolution: usize) -> Self {
        ViewPartial {
            resolution,
            texture: Grid::zeros(vec![resolution, resolution, 3]),
            mask: Grid::zeros(vec![resolution, resolution]),
            cosine: Grid::zeros(vec![resolution, resolution]),
            depth: Grid::filled(vec![resolution, resolution], f32::INFINITY),
        }
    }

    pub fn written_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }

    pub fn color_at(&self, ty: usize, tx: usize) -> [f32; 3] {
        let i = (ty * self.resolution + tx) * 3;
        let d = self.texture.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    pub fn is_written(&self, ty: usize, tx: usize) -> bool {
        self.mask.data()[ty * self.resolution + tx] > 0.5
    }
}

/// Splat every covered image pixel to the texel under its UV coordinate.
/// When several pixels land on one texel the nearest-depth pixel wins.
pub fn unproject_view(
    image: &Grid,
    maps: &ConditionMaps,
    cam: &CameraView,
    texture_resolution: usize,
) -> Result<ViewPartial> {
    let res = maps.resolution;
    if image.len() != res * res * 3 {
        return Err(Error::shape(format!(
            "image has {} values, expected {res}²×3",
            image.len()
        )));
    }
    let mut partial = ViewPartial::empty(texture_resolution);
    let forward = cam.forward();
    let img = image.data();
    for row in 0..res {
        for col in 0..res {
            if !maps.is_covered(row, col) {
                continue;
            }
            let (ty, tx) = texel_of(maps.uv_at(row, col), texture_resolution);
            let t = ty * texture_resolution + tx;
            let d = maps.depth_at(row, col);
            if partial.mask.data()[t] > 0.5 && d >= partial.depth.data()[t] {
                continue;
            }
            let p = (row * res + col) * 3;
            partial.texture.data_mut()[t * 3..t * 3 + 3].copy_from_slice(&img[p..p + 3]);
            let n = maps.normal_at(row, col);
            partial.cosine.data_mut()[t] = (-vec3::dot(n, forward)).max(0.0);
            partial.depth.data_mut()[t] = d;
            partial.mask.data_mut()[t] = 1.0;
        }
    }
    Ok(partial)
}

/// Baked UV texture with per-texel blend-weight sums.
#[derive(Debug, Clone)]
pub struct UvTexture {
    pub resolution: usize,
    pub texels: Grid,
    pub coverage: Grid,
}

impl UvTexture {
    pub fn covered_count(&self) -> usize {
        self.coverage.data().iter().filter(|&&c| c > 0.0).count()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let res = self.resolution as u32;
        let mut buf = Vec::with_capacity((res * res * 4) as usize);
        for (t, &cov) in self.coverage.data().iter().enumerate() {
            for c in 0..3 {
                buf.push((self.texels.data()[t * 3 + c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            buf.push(if cov > 0.0 { 255 } else { 0 });
        }
        image::save_buffer(path, &buf, res, res, image::ColorType::Rgba8)?;
        Ok(())
    }

    pub fn save_sidecar(&self, path: &Path) -> Result<()> {
        io::write_grid(path, &self.texels)
    }
}

/// Visibility-weighted blend: `texel = Σ w_v T_v / Σ w_v` with
/// `w_v = max(0, cos θ_v)^k`. Texels no view reaches keep zero coverage and
/// are left for inpainting.
pub fn blend(partials: &[ViewPartial], exponent: f32) -> Result<UvTexture> {
    let res = partials
        .first()
        .ok_or_else(|| Error::invalid("blend needs at least one partial"))?
        .resolution;
    for p in partials {
        if p.resolution != res {
            return Err(Error::shape("partial texture resolutions differ"));
        }
    }
    let mut texels = Grid::zeros(vec![res, res, 3]);
    let mut coverage = Grid::zeros(vec![res, res]);
    for t in 0..res * res {
        let mut wsum = 0.0f64;
        let mut acc = [0.0f64; 3];
        for p in partials {
            if p.mask.data()[t] < 0.5 {
                continue;
            }
            let w = (p.cosine.data()[t] as f64).powf(exponent as f64);
            if w <= 0.0 {
                continue;
            }
            wsum += w;
            for c in 0..3 {
                acc[c] += w * p.texture.data()[t * 3 + c] as f64;
            }
        }
        if wsum > 0.0 {
            for c in 0..3 {
                texels.data_mut()[t * 3 + c] = (acc[c] / wsum) as f32;
            }
            coverage.data_mut()[t] = wsum as f32;
        }
    }
    Ok(UvTexture {
        resolution: res,
        texels,
        coverage,
    })
}

/// Cross-view agreement report.
#[derive(Debug, Clone)]
pub struct LadReport {
    /// Mean (over overlap texels) of the summed per-view channel-mean
    /// squared deviation from the cross-view mean.
    pub lad: f64,
    pub overlap_texel_count: usize,
    pub per_view_contributions: Vec<f64>,
    /// Set when no texel is covered by two or more views.
    pub no_overlap: bool,
}

impl LadReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("lad: {:.6}\n", self.lad));
        s.push_str(&format!("overlap_texel_count: {}\n", self.overlap_texel_count));
        s.push_str(&format!("no_overlap: {}\n", self.no_overlap));
        for (i, v) in self.per_view_contributions.iter().enumerate() {
            s.push_str(&format!("view_{i}: {v:.6}\n"));
        }
        s
    }
}

/// Local alignment distance over the partial textures: on every texel
/// covered by ≥ 2 views, each covering view contributes the channel-mean
/// squared deviation of its color from the mean over covering views. The
/// total is normalized by the overlap texel count so values are
/// resolution-independent. View order does not matter.
pub fn compute_lad(partials: &[ViewPartial]) -> Result<LadReport> {
    if partials.len() < 2 {
        return Err(Error::invalid("LAD needs at least two partials"));
    }
    let res = partials[0].resolution;
    for p in partials {
        if p.resolution != res {
            return Err(Error::shape("partial texture resolutions differ"));
        }
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut per_view = vec![0.0f64; partials.len()];
    for t in 0..res * res {
        let covering: Vec<usize> = (0..partials.len())
            .filter(|&v| partials[v].mask.data()[t] > 0.5)
            .collect();
        if covering.len() < 2 {
            continue;
        }
        let mut mean = [0.0f64; 3];
        for &v in &covering {
            for c in 0..3 {
                mean[c] += partials[v].texture.data()[t * 3 + c] as f64;
            }
        }
        for m in &mut mean {
            *m /= covering.len() as f64;
        }
        for &v in &covering {
            let mut dev = 0.0f64;
            for c in 0..3 {
                let d = partials[v].texture.data()[t * 3 + c] as f64 - mean[c];
                dev += d * d;
            }
            dev /= 3.0;
            total += dev;
            per_view[v] += dev;
        }
        count += 1;
    }
    if count == 0 {
        return Ok(LadReport {
            lad: 0.0,
            overlap_texel_count: 0,
            per_view_contributions: per_view,
            no_overlap: true,
        });
    }
    Ok(LadReport {
        lad: total / count as f64,
        overlap_texel_count: count,
        per_view_contributions: per_view,
        no_overlap: false,
    })
}

/// Fill zero-coverage texels by synchronous nearest-neighbor dilation:
/// each round, every empty texel adjacent to filled texels takes their
/// average. Rounds read only the previous round's state, so the result is
/// independent of texel visit order. Covered texels are never touched.
pub fn inpaint(tex: &UvTexture) -> Result<UvTexture> {
    let res = tex.resolution;
    if tex.covered_count() == 0 {
        return Err(Error::invalid("cannot inpaint a fully empty texture"));
    }
    let mut out = tex.clone();
    let mut filled: Vec<bool> = tex.coverage.data().iter().map(|&c| c > 0.0).collect();
    loop {
        let mut next_colors: Vec<(usize, [f32; 3])> = Vec::new();
        for ty in 0..res {
            for tx in 0..res {
                let t = ty * res + tx;
                if filled[t] {
                    continue;
                }
                let mut acc = [0.0f64; 3];
                let mut n = 0usize;
                let mut visit = |yy: isize, xx: isize| {
                    if yy < 0 || xx < 0 || yy >= res as isize || xx >= res as isize {
                        return;
                    }
                    let q = yy as usize * res + xx as usize;
                    if filled[q] {
                        for c in 0..3 {
                            acc[c] += out.texels.data()[q * 3 + c] as f64;
                        }
                        n += 1;
                    }
                };
                visit(ty as isize - 1, tx as isize);
                visit(ty as isize + 1, tx as isize);
                visit(ty as isize, tx as isize - 1);
                visit(ty as isize, tx as isize + 1);
                if n > 0 {
                    next_colors.push((
                        t,
                        [
                            (acc[0] / n as f64) as f32,
                            (acc[1] / n as f64) as f32,
                            (acc[2] / n as f64) as f32,
                        ],
                    ));
                }
            }
        }
        if next_colors.is_empty() {
            break;
        }
        for (t, color) in next_colors {
            out.texels.data_mut()[t * 3..t * 3 + 3].copy_from_slice(&color);
            filled[t] = true;
        }
    }
    Ok(out)
}

/// Bilinear texture lookup with edge clamping.
pub fn sample_bilinear(texture: &Grid, uv: [f32; 2]) -> [f32; 3] {
    let res = texture.shape()[0];
    let fx = uv[0] * res as f32 - 0.5;
    let fy = uv[1] * res as f32 - 0.5;
    let x0 = (fx.floor() as isize).clamp(0, res as isize - 1) as usize;
    let y0 = (fy.floor() as isize).clamp(0, res as isize - 1) as usize;
    let x1 = (x0 + 1).min(res - 1);
    let y1 = (y0 + 1).min(res - 1);
    let tx = (fx - fx.floor()).clamp(0.0, 1.0);
    let ty = (fy - fy.floor()).clamp(0.0, 1.0);
    let d = texture.data();
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let p00 = d[(y0 * res + x0) * 3 + c];
        let p01 = d[(y0 * res + x1) * 3 + c];
        let p10 = d[(y1 * res + x0) * 3 + c];
        let p11 = d[(y1 * res + x1) * 3 + c];
        let top = p00 + (p01 - p00) * tx;
        let bot = p10 + (p11 - p10) * tx;
        out[c] = top + (bot - top) * ty;
    }
    out
}

/// Rasterize the mesh and shade every covered pixel with a bilinear lookup
/// into the texture; unshaded albedo, background pixels take the clear
/// color. Returns the image as `(res², 3)` plus the condition maps used.
pub fn render_textured(
    mesh: &Mesh,
    texture: &Grid,
    cam: &CameraView,
    resolution: usize,
    clear_color: [f32; 3],
) -> Result<(Grid, ConditionMaps)> {
    if texture.shape().len() != 3 || texture.shape()[0] != texture.shape()[1] || texture.shape()[2] != 3
    {
        return Err(Error::shape(format!(
            "texture must be R×R×3, got {:?}",
            texture.shape()
        )));
    }
    let maps = rasterize_conditions(mesh, cam, resolution);
    let mut img = vec![0.0f32; resolution * resolution * 3];
    for row in 0..resolution {
        for col in 0..resolution {
            let p = (row * resolution + col) * 3;
            if maps.is_covered(row, col) {
                let color = sample_bilinear(texture, maps.uv_at(row, col));
                img[p..p + 3].copy_from_slice(&color);
            } else {
                img[p..p + 3].copy_from_slice(&clear_color);
            }
        }
    }
    Ok((Grid::new(vec![resolution * resolution, 3], img)?, maps))
}

/// PSNR between two equally sized buffers on the texels/pixels where
/// `mask > 0`, treating values as being in `[0, 1]`.
pub fn masked_psnr(a: &Grid, b: &Grid, mask: &Grid, channels: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != mask.len() * channels {
        return Err(Error::shape(format!(
            "psnr buffers disagree: {} vs {} vs {}×{channels}",
            a.len(),
            b.len(),
            mask.len()
        )));
    }
    let mut mse = 0.0f64;
    let mut n = 0usize;
    for (i, &m) in mask.data().iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        for c in 0..channels {
            let d = a.data()[i * channels + c] as f64 - b.data()[i * channels + c] as f64;
            mse += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("empty mask in psnr"));
    }
    mse /= n as f64;
    Ok(if mse <= 1e-12 {
        120.0
    } else {
        -10.0 * mse.log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_camera_rig, normalize_to_canonical, primitives};

    fn sphere() -> Mesh {
        normalize_to_canonical(&primitives::sphere(48, 24)).unwrap()
    }

    #[test]
    fn constant_image_unprojects_to_constant_partial() {
        let mesh = sphere();
        let cam = &make_camera_rig(1, 0.0, 0.6).unwrap()[0];
        let maps = rasterize_conditions(&mesh, cam, 64);
        let image = Grid::filled(vec![64 * 64, 3], 0.42);
        let partial = unproject_view(&image, &maps, cam, 64).unwrap();
        assert!(partial.written_count() > 0);
        for t in 0..64 * 64 {
            if partial.mask.data()[t] > 0.5 {
                for c in 0..3 {
                    assert_eq!(partial.texture.data()[t * 3 + c], 0.42);
                }
            }
        }
    }

    #[test]
    fn empty_mask_gives_empty_partial() {
        let maps = ConditionMaps::background(16);
        let cam = &make_camera_rig(1, 0.0, 0.6).unwrap()[0];
        let image = Grid::filled(vec![16 * 16, 3], 1.0);
        let partial = unproject_view(&image, &maps, cam, 32).unwrap();
        assert_eq!(partial.written_count(), 0);
    }

    #[test]
    fn render_then_unproject_recovers_texture() {
        let mesh = sphere();
        let res = 128;
        let tex = patterns::checker(res, 2, [0.05, 0.05, 0.05], [0.95, 0.1, 0.1]);
        let rig = make_camera_rig(6, 10.0, 0.6).unwrap();
        let mut partials = Vec::new();
        for cam in &rig {
            let (img, maps) = render_textured(&mesh, &tex, cam, res, [0.0; 3]).unwrap();
            partials.push(unproject_view(&img, &maps, cam, res).unwrap());
        }
        let baked = blend(&partials, 4.0).unwrap();
        let psnr = masked_psnr(&baked.texels, &tex, &baked.coverage, 3).unwrap();
        assert!(psnr > 30.0, "round-trip psnr {psnr:.2} dB");
    }

    #[test]
    fn blend_single_view_equals_partial_on_its_mask() {
        let mesh = sphere();
        let cam = &make_camera_rig(1, 0.0, 0.6).unwrap()[0];
        let (img, maps) = render_textured(
            &mesh,
            &patterns::gradient(64, [0.0; 3], [1.0, 0.5, 0.2]),
            cam,
            64,
            [0.0; 3],
        )
        .unwrap();
        let partial = unproject_view(&img, &maps, cam, 64).unwrap();
        let baked = blend(std::slice::from_ref(&partial), 4.0).unwrap();
        for t in 0..64 * 64 {
            if partial.mask.data()[t] > 0.5 && partial.cosine.data()[t] > 0.0 {
                for c in 0..3 {
                    let a = baked.texels.data()[t * 3 + c];
                    let b = partial.texture.data()[t * 3 + c];
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn blend_of_identical_partials_is_exponent_independent() {
        let mesh = sphere();
        let cam = &make_camera_rig(1, 0.0, 0.6).unwrap()[0];
        let (img, maps) =
            render_textured(&mesh, &patterns::checker(32, 4, [0.0; 3], [1.0; 3]), cam, 32, [0.0; 3])
                .unwrap();
        let p = unproject_view(&img, &maps, cam, 32).unwrap();
        let a = blend(&[p.clone(), p.clone()], 1.0).unwrap();
        let b = blend(&[p.clone(), p], 8.0).unwrap();
        for (x, y) in a.texels.data().iter().zip(b.texels.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn grazing_view_weight_is_negligible_at_k4() {
        // cos 80° ≈ 0.1736; at k = 4 its weight is ≤ 10⁻³ of a frontal hit.
        let grazing = (80f32).to_radians().cos();
        let w_grazing = (grazing as f64).powf(4.0);
        let w_frontal = 1.0f64.powf(4.0);
        assert!(w_grazing / w_frontal <= 1e-3, "ratio {}", w_grazing / w_frontal);
    }

    #[test]
    fn blend_is_a_convex_combination() {
        let mesh = sphere();
        let rig = make_camera_rig(3, 0.0, 0.6).unwrap();
        let tex = patterns::stripes(64, 8, [0.1, 0.2, 0.9], [0.9, 0.8, 0.1], true);
        let partials: Vec<ViewPartial> = rig
            .iter()
            .map(|cam| {
                let (img, maps) = render_textured(&mesh, &tex, cam, 64, [0.0; 3]).unwrap();
                unproject_view(&img, &maps, cam, 64).unwrap()
            })
            .collect();
        let baked = blend(&partials, 4.0).unwrap();
        for t in 0..64 * 64 {
            if baked.coverage.data()[t] <= 0.0 {
                continue;
            }
            for c in 0..3 {
                let mut lo = f32::INFINITY;
                let mut hi = f32::NEG_INFINITY;
                for p in &partials {
                    if p.mask.data()[t] > 0.5 && p.cosine.data()[t] > 0.0 {
                        lo = lo.min(p.texture.data()[t * 3 + c]);
                        hi = hi.max(p.texture.data()[t * 3 + c]);
                    }
                }
                let v = baked.texels.data()[t * 3 + c];
                assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn lad_zero_for_identical_partials() {
        let mesh = sphere();
        let cam = &make_camera_rig(1, 0.0, 0.6).unwrap()[0];
        let (img, maps) =
            render_textured(&mesh, &patterns::checker(32, 4, [0.0; 3], [1.0; 3]), cam, 32, [0.0; 3])
                .unwrap();
        let p = unproject_view(&img, &maps, cam, 32).unwrap();
        let report = compute_lad(&[p.clone(), p]).unwrap();
        assert_eq!(report.lad, 0.0);
        assert!(!report.no_overlap);
    }

    #[test]
    fn lad_closed_form_single_overlap_texel() {
        // Two views, one shared texel, colors 0 and 1 in every channel:
        // mean 0.5, lad = (0.5² + 0.5²) / 1 = 0.5.
        let mut a = ViewPartial::empty(4);
        let mut b = ViewPartial::empty(4);
        a.mask.data_mut()[5] = 1.0;
        b.mask.data_mut()[5] = 1.0;
        for c in 0..3 {
            a.texture.data_mut()[5 * 3 + c] = 0.0;
            b.texture.data_mut()[5 * 3 + c] = 1.0;
        }
        let report = compute_lad(&[a, b]).unwrap();
        assert_eq!(report.overlap_texel_count, 1);
        assert!((report.lad - 0.5).abs() < 1e-9, "lad {}", report.lad);
    }

    #[test]
    fn lad_is_view_order_invariant() {
        let mesh = sphere();
        let rig = make_camera_rig(4, 0.0, 0.6).unwrap();
        let tex = patterns::gradient(64, [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]);
        let mut partials: Vec<ViewPartial> = rig
            .iter()
            .map(|cam| {
                let (img, maps) = render_textured(&mesh, &tex, cam, 64, [0.0; 3]).unwrap();
                unproject_view(&img, &maps, cam, 64).unwrap()
            })
            .collect();
        let fwd = compute_lad(&partials).unwrap();
        partials.reverse();
        let rev = compute_lad(&partials).unwrap();
        assert!((fwd.lad - rev.lad).abs() < 1e-12);
        assert_eq!(fwd.overlap_texel_count, rev.overlap_texel_count);
    }

    #[test]
    fn no_overlap_is_flagged() {
        let mut a = ViewPartial::empty(4);
        let mut b = ViewPartial::empty(4);
        a.mask.data_mut()[0] = 1.0;
        b.mask.data_mut()[15] = 1.0;
        let report = compute_lad(&[a, b]).unwrap();
        assert!(report.no_overlap);
        assert_eq!(report.lad, 0.0);
        assert_eq!(report.overlap_texel_count, 0);
    }

    #[test]
    fn inpaint_identity_when_fully_covered() {
        let tex = UvTexture {
            resolution: 8,
            texels: patterns::checker(8, 2, [0.0; 3], [1.0; 3]),
            coverage: Grid::filled(vec![8, 8], 1.0),
        };
        let out = inpaint(&tex).unwrap();
        assert_eq!(out.texels.data(), tex.texels.data());
    }

    #[test]
    fn inpaint_floods_from_single_texel() {
        let mut tex = UvTexture {
            resolution: 16,
            texels: Grid::zeros(vec![16, 16, 3]),
            coverage: Grid::zeros(vec![16, 16]),
        };
        let t = 5 * 16 + 9;
        tex.coverage.data_mut()[t] = 1.0;
        tex.texels.data_mut()[t * 3..t * 3 + 3].copy_from_slice(&[0.3, 0.6, 0.9]);
        let out = inpaint(&tex).unwrap();
        for i in 0..16 * 16 {
            assert!((out.texels.data()[i * 3] - 0.3).abs() < 1e-6);
            assert!((out.texels.data()[i * 3 + 2] - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn inpaint_rejects_fully_empty() {
        let tex = UvTexture {
            resolution: 4,
            texels: Grid::zeros(vec![4, 4, 3]),
            coverage: Grid::zeros(vec![4, 4]),
        };
        assert!(inpaint(&tex).is_err());
    }

    /// Visit-order oracle: one dilation round computed with an explicitly
    /// scrambled texel order must equal the synchronous implementation.
    #[test]
    fn dilation_is_visit_order_invariant() {
        let mut tex = UvTexture {
            resolution: 12,
            texels: Grid::zeros(vec![12, 12, 3]),
            coverage: Grid::zeros(vec![12, 12]),
        };
        let mut rng = crate::numerics::RngState::seeded(3);
        for _ in 0..10 {
            let t = rng.uniform_index(144);
            tex.coverage.data_mut()[t] = 1.0;
            for c in 0..3 {
                tex.texels.data_mut()[t * 3 + c] = rng.uniform() as f32;
            }
        }
        let a = inpaint(&tex).unwrap();

        // Reverse-order single rounds, double-buffered the same way.
        let mut out = tex.clone();
        let mut filled: Vec<bool> = tex.coverage.data().iter().map(|&c| c > 0.0).collect();
        loop {
            let mut updates = Vec::new();
            for t in (0..144usize).rev() {
                if filled[t] {
                    continue;
                }
                let (ty, tx) = (t / 12, t % 12);
                let mut acc = [0.0f64; 3];
                let mut n = 0;
                for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let (yy, xx) = (ty as isize + dy, tx as isize + dx);
                    if yy < 0 || xx < 0 || yy >= 12 || xx >= 12 {
                        continue;
                    }
                    let q = yy as usize * 12 + xx as usize;
                    if filled[q] {
                        for c in 0..3 {
                            acc[c] += out.texels.data()[q * 3 + c] as f64;
                        }
                        n += 1;
                    }
                }
                if n > 0 {
                    updates.push((t, acc.map(|v| (v / n as f64) as f32)));
                }
            }
            if updates.is_empty() {
                break;
            }
            for (t, color) in updates {
                out.texels.data_mut()[t * 3..t * 3 + 3].copy_from_slice(&color);
                filled[t] = true;
            }
        }
        for (x, y) in a.texels.data().iter().zip(out.texels.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_texture_renders_constant_silhouette() {
        let mesh = sphere();
        let cam = &make_camera_rig(1, 0.0, 0.6).unwrap()[0];
        let tex = Grid::filled(vec![32, 32, 3], 0.7);
        let (img, maps) = render_textured(&mesh, &tex, cam, 48, [0.1, 0.2, 0.3]).unwrap();
        for row in 0..48 {
            for col in 0..48 {
                let p = (row * 48 + col) * 3;
                if maps.is_covered(row, col) {
                    assert!((img.data()[p] - 0.7).abs() < 1e-6);
                } else {
                    assert!((img.data()[p] - 0.1).abs() < 1e-6);
                    assert!((img.data()[p + 2] - 0.3).abs() < 1e-6);
                }
            }
        }
    }
}
