//! Cross-module integration: geometry → voxel phases → rotary embedding →
//! attention, plus an end-to-end training smoke on a two-mesh synthetic
//! set.

use voxtex_core::attention::LatentGrid;
use voxtex_core::baking::{patterns, render_textured};
use voxtex_core::denoiser::{
    train_step, AdamW, DenoiserConfig, DenoiserState, DropoutProbs, NoiseSchedule,
    PyramidPhases, TrainSample,
};
use voxtex_core::geometry::{
    downsample_conditions, make_camera_rig, normalize_to_canonical, primitives,
    rasterize_conditions, ConditionMaps,
};
use voxtex_core::numerics::{Grid, RngState};
use voxtex_core::rope3d::{rotate, rotate_grid, RopeConfig};
use voxtex_core::voxelmap::{build_pyramid, pixel_to_voxel, PhaseGrid};

fn sphere_view(azimuth_index: usize, n_views: usize, res: usize) -> ConditionMaps {
    let mesh = normalize_to_canonical(&primitives::sphere(48, 24)).unwrap();
    let rig = make_camera_rig(n_views, 0.0, 0.6).unwrap();
    rasterize_conditions(&mesh, &rig[azimuth_index], res)
}

#[test]
fn rotate_grid_identity_on_all_invalid_phases() {
    let cfg = RopeConfig::new(12).unwrap();
    let mut rng = RngState::seeded(1);
    let z = LatentGrid::new(0, 6, 6, 12, rng.gaussian(vec![36, 12])).unwrap();
    let phases = PhaseGrid::all_invalid(0, 6);
    let out = rotate_grid(&z, &phases, &cfg).unwrap();
    assert_eq!(out.data.data(), z.data.data());
}

#[test]
fn rotate_grid_uniform_phase_matches_single_vector_rotation() {
    let cfg = RopeConfig::new(12).unwrap();
    let mut rng = RngState::seeded(2);
    let res = 8;
    let maps = {
        // Full-coverage maps with constant CCM so every pixel quantizes to
        // one voxel.
        let mut m = ConditionMaps::background(res);
        m.mask = Grid::filled(vec![res, res], 1.0);
        m.ccm = Grid::filled(vec![res, res, 3], 0.5);
        m
    };
    let pyramid = build_pyramid(&[res]).unwrap();
    let phases = pixel_to_voxel(&maps, &pyramid, 0).unwrap();
    let phase = phases.phase(0, 0);
    assert_eq!(phase, [4, 4, 4]);

    let z = LatentGrid::new(0, res, res, 12, rng.gaussian(vec![res * res, 12])).unwrap();
    let out = rotate_grid(&z, &phases, &cfg).unwrap();
    for t in 0..res * res {
        let expect = rotate(&z.data.data()[t * 12..(t + 1) * 12], phase, &cfg).unwrap();
        for (a, b) in out.data.data()[t * 12..(t + 1) * 12].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

/// Coincidence oracle: pixels from two views that land in the same voxel
/// get identical rotations, so their rotated dot products equal the
/// unrotated ones.
#[test]
fn coincident_pixels_preserve_dot_products_across_views() {
    let res = 32;
    let a = sphere_view(0, 6, res);
    let b = sphere_view(1, 6, res);
    let pyramid = build_pyramid(&[res]).unwrap();
    let pa = pixel_to_voxel(&a, &pyramid, 0).unwrap();
    let pb = pixel_to_voxel(&b, &pyramid, 0).unwrap();

    // Collect cross-view pixel pairs quantized to the same voxel.
    let mut pairs = Vec::new();
    for i in 0..res * res {
        if !pa.valid_at(i) {
            continue;
        }
        for j in 0..res * res {
            if pb.valid_at(j) && pa.phase_at(i) == pb.phase_at(j) {
                pairs.push((i, j));
                break;
            }
        }
    }
    assert!(
        pairs.len() > 50,
        "expected many coincident pairs, got {}",
        pairs.len()
    );

    let cfg = RopeConfig::new(24).unwrap();
    let mut rng = RngState::seeded(3);
    let za = LatentGrid::new(0, res, res, 24, rng.gaussian(vec![res * res, 24])).unwrap();
    let zb = LatentGrid::new(1, res, res, 24, rng.gaussian(vec![res * res, 24])).unwrap();
    let ra = rotate_grid(&za, &pa, &cfg).unwrap();
    let rb = rotate_grid(&zb, &pb, &cfg).unwrap();
    for &(i, j) in pairs.iter().take(200) {
        let dot_plain: f64 = za.data.data()[i * 24..(i + 1) * 24]
            .iter()
            .zip(&zb.data.data()[j * 24..(j + 1) * 24])
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        let dot_rot: f64 = ra.data.data()[i * 24..(i + 1) * 24]
            .iter()
            .zip(&rb.data.data()[j * 24..(j + 1) * 24])
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        assert!(
            (dot_plain - dot_rot).abs() < 1e-4 * dot_plain.abs().max(1.0),
            "pair ({i},{j}): {dot_plain} vs {dot_rot}"
        );
    }
}

/// Cross-view quantization invariant: the error bound |phase/R − pos| ≤
/// 1/(2R) holds for every valid pixel at every level.
#[test]
fn quantization_error_bounded_at_all_levels() {
    let res = 64;
    let maps = sphere_view(0, 6, res);
    let levels = [64usize, 32, 16, 8];
    let pyramid = build_pyramid(&levels).unwrap();
    for (level, &r) in levels.iter().enumerate() {
        let down = downsample_conditions(&maps, r).unwrap();
        let grid = pixel_to_voxel(&down, &pyramid, level).unwrap();
        for row in 0..r {
            for col in 0..r {
                if !down.is_covered(row, col) {
                    continue;
                }
                let pos = down.ccm_at(row, col);
                let phase = grid.phase(row, col);
                for a in 0..3 {
                    let err = (phase[a] as f32 / r as f32 - pos[a]).abs();
                    assert!(
                        err <= 0.5 / r as f32 + 1e-5,
                        "level {level} axis {a}: err {err}"
                    );
                }
            }
        }
    }
}

fn textured_sample(
    mesh: voxtex_core::Mesh,
    texture: Grid,
    views: usize,
    res: usize,
    dcfg: &DenoiserConfig,
) -> TrainSample {
    let rig = make_camera_rig(views, 15.0, 0.6).unwrap();
    let mut clean = Vec::new();
    let mut cond = Vec::new();
    for cam in &rig {
        let (img, maps) = render_textured(&mesh, &texture, cam, res, [0.0; 3]).unwrap();
        clean.push(img.map(|v| v * 2.0 - 1.0));
        cond.push(maps);
    }
    let phases = PyramidPhases::build(&cond, dcfg).unwrap();
    let ref_image = clean[0].clone();
    TrainSample {
        clean_views: clean,
        cond,
        phases,
        ref_image,
    }
}

/// Training smoke oracle: 500 steps on a 2-mesh synthetic set drop the
/// loss by at least 30% (first-50 vs last-50 window means).
#[test]
fn five_hundred_steps_on_two_meshes_reduce_loss_by_thirty_percent() {
    let dcfg = DenoiserConfig {
        input_resolution: 16,
        base_channels: 24,
        head_count: 1,
        schedule_steps: 50,
        zero_init_output: true,
    };
    let res = dcfg.input_resolution;
    let samples = vec![
        textured_sample(
            normalize_to_canonical(&primitives::cube()).unwrap(),
            patterns::checker(res, 4, [0.1, 0.1, 0.8], [0.9, 0.8, 0.1]),
            3,
            res,
            &dcfg,
        ),
        textured_sample(
            normalize_to_canonical(&primitives::torus(0.35, 0.15, 24, 12)).unwrap(),
            patterns::stripes(res, 4, [0.8, 0.1, 0.1], [0.1, 0.8, 0.2], true),
            3,
            res,
            &dcfg,
        ),
    ];
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
    let mut rng = RngState::seeded(7).substream("train");
    let mut state = DenoiserState::init(dcfg, &mut rng.substream("init")).unwrap();
    state.freeze_sa();
    let mut opt = AdamW::new(&state, 2e-3);
    let mut first = Vec::new();
    let mut last = Vec::new();
    for step in 0..500 {
        let batch = std::slice::from_ref(&samples[step % 2]);
        let out = train_step(
            &mut state,
            &mut opt,
            batch,
            &schedule,
            &mut rng,
            DropoutProbs::default(),
        )
        .unwrap();
        if step < 50 {
            first.push(out.loss);
        }
        if step >= 450 {
            last.push(out.loss);
        }
    }
    let f = first.iter().sum::<f64>() / first.len() as f64;
    let l = last.iter().sum::<f64>() / last.len() as f64;
    assert!(
        l <= 0.7 * f,
        "loss decreased only {:.1}% ({f:.4} -> {l:.4})",
        100.0 * (1.0 - l / f)
    );
}
