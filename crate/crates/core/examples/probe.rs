//! Scratch measurements for tolerance calibration. Not part of the test
//! suite; run with `cargo run -p voxtex-core --example probe --release`.

use voxtex_core::baking::{self, patterns};
use voxtex_core::geometry::{
    downsample_conditions, make_camera_rig, normalize_to_canonical, primitives,
    rasterize_conditions,
};
use voxtex_core::voxelmap::{build_pyramid, pixel_to_voxel};

fn main() {
    coincidence_probe();
    bake_probe();
}

/// Measure cross-view exact phase agreement for matched pixels.
fn coincidence_probe() {
    let mesh = normalize_to_canonical(&primitives::sphere(64, 32)).unwrap();
    let rig = make_camera_rig(6, 0.0, 0.6).unwrap();
    let res = 64usize;
    let a = rasterize_conditions(&mesh, &rig[0], res);
    let b = rasterize_conditions(&mesh, &rig[1], res);
    let levels = [64usize, 32, 16, 8];
    let pyramid = build_pyramid(&levels).unwrap();
    for (level, &r) in levels.iter().enumerate() {
        let da = downsample_conditions(&a, r).unwrap();
        let db = downsample_conditions(&b, r).unwrap();
        let pa = pixel_to_voxel(&da, &pyramid, level).unwrap();
        let pb = pixel_to_voxel(&db, &pyramid, level).unwrap();
        let thresh = 0.5 / r as f32;
        let mut matched = 0usize;
        let mut agreed = 0usize;
        for i in 0..r * r {
            let (ri, ci) = (i / r, i % r);
            if !da.is_covered(ri, ci) {
                continue;
            }
            let ca = da.ccm_at(ri, ci);
            // Nearest CCM neighbour in view b within the per-axis bound.
            let mut best: Option<(f32, usize)> = None;
            for j in 0..r * r {
                let (rj, cj) = (j / r, j % r);
                if !db.is_covered(rj, cj) {
                    continue;
                }
                let cb = db.ccm_at(rj, cj);
                let d = [
                    (ca[0] - cb[0]).abs(),
                    (ca[1] - cb[1]).abs(),
                    (ca[2] - cb[2]).abs(),
                ];
                if d.iter().all(|&x| x < thresh) {
                    let dist = d[0] + d[1] + d[2];
                    if best.map_or(true, |(bd, _)| dist < bd) {
                        best = Some((dist, j));
                    }
                }
            }
            if let Some((_, j)) = best {
                matched += 1;
                let (rj, cj) = (j / r, j % r);
                if pa.phase(ri, ci) == pb.phase(rj, cj) {
                    agreed += 1;
                }
            }
        }
        println!(
            "level {level} (R={r}): matched {matched}, agreed {agreed} ({:.2}%)",
            100.0 * agreed as f64 / matched.max(1) as f64
        );
    }
}

/// Measure round-trip PSNR and ground-truth LAD at the acceptance scale.
fn bake_probe() {
    let mesh = normalize_to_canonical(&primitives::sphere(96, 48)).unwrap();
    let res = 256usize;
    for (name, tex) in [
        ("checker2-rb", patterns::checker(res, 2, [0.05, 0.05, 0.05], [0.95, 0.1, 0.1])),
        ("checker2-bw", patterns::checker(res, 2, [0.0, 0.0, 0.0], [1.0, 1.0, 1.0])),
        ("checker4-rb", patterns::checker(res, 4, [0.05, 0.05, 0.05], [0.95, 0.1, 0.1])),
    ] {
        let rig = make_camera_rig(6, 10.0, 0.6).unwrap();
        let mut partials = Vec::new();
        for cam in &rig {
            let (img, maps) = baking::render_textured(&mesh, &tex, cam, res, [0.0; 3]).unwrap();
            partials.push(baking::unproject_view(&img, &maps, cam, res).unwrap());
        }
        let baked = baking::blend(&partials, 4.0).unwrap();
        let psnr = baking::masked_psnr(&baked.texels, &tex, &baked.coverage, 3).unwrap();
        let lad = baking::compute_lad(&partials).unwrap();
        println!(
            "{name}: psnr {psnr:.2} dB, lad {:.6} over {} overlap texels, covered {}",
            lad.lad,
            lad.overlap_texel_count,
            baked.covered_count()
        );
    }
}
