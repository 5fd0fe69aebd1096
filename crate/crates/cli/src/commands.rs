//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use voxtex_core::baking::{self, compute_lad, ViewPartial};
use voxtex_core::denoiser::{
    self, state_from_checkpoint, state_to_checkpoint, AdamW, DenoiserState, NoiseSchedule,
    PyramidPhases, SampleParams, TrainSample,
};
use voxtex_core::io::Checkpoint;
use voxtex_core::numerics::{Grid, RngState};

use crate::config::{write_run_info, RunConfig};
use crate::dataset::{self, load_image_png};
use crate::CliError;

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::validation(format!("cannot create {}: {e}", dir.display())))
}

pub fn gen_dataset(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let entries = dataset::generate(cfg, out)?;
    write_run_info(out, cfg)?;
    println!(
        "dataset: {} samples, {entries} view entries at {}",
        cfg.meshes.len() * cfg.texture_variants.max(1),
        out.display()
    );
    Ok(())
}

pub fn render_conditions(
    cfg: &RunConfig,
    mesh_name: &str,
    resolution: usize,
    out: &Path,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    let mesh = dataset::resolve_mesh(mesh_name)?;
    let (rig, maps) = dataset::render_rig_conditions(&mesh, cfg, resolution)?;
    for (vi, (cam, m)) in rig.iter().zip(&maps).enumerate() {
        let stem = format!("cond_{vi:02}");
        m.save_sidecars(out, &stem)?;
        m.save_pngs(out, &stem)?;
        println!(
            "view {vi}: azimuth {:.1}°, {} covered pixels",
            cam.azimuth_deg,
            m.covered_count()
        );
    }
    write_run_info(out, cfg)?;
    Ok(())
}

/// Slice one view out of a multi-view training sample (warmup phase trains
/// single-view reconstruction).
fn single_view_sample(s: &TrainSample, view: usize) -> TrainSample {
    TrainSample {
        clean_views: vec![s.clean_views[view].clone()],
        cond: vec![s.cond[view].clone()],
        phases: PyramidPhases {
            per_level: s
                .phases
                .per_level
                .iter()
                .map(|level| vec![level[view].clone()])
                .collect(),
        },
        ref_image: s.ref_image.clone(),
    }
}

fn save_train_checkpoint(
    path: &Path,
    state: &DenoiserState,
    opt: &AdamW,
    step: usize,
    rng: &RngState,
) -> Result<(), CliError> {
    let mut ck = state_to_checkpoint(state);
    opt.save_into(&mut ck);
    ck.insert_u64("train.step", step as u64);
    let pos = rng.word_pos();
    ck.insert_u64("train.rng_pos_lo", pos as u64);
    ck.insert_u64("train.rng_pos_hi", (pos >> 64) as u64);
    ck.save(path).map_err(CliError::from)
}

pub struct TrainArgs<'a> {
    pub dataset_dir: &'a Path,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    ensure_dir(args.out)?;
    let samples = dataset::load(args.dataset_dir, cfg)?;
    if samples.is_empty() {
        return Err(CliError::validation("dataset has no samples".to_string()));
    }
    for s in &samples {
        println!(
            "loaded {} (mesh {}, {} views) from {}",
            s.sample_id,
            s.mesh_name,
            s.clean_views.len(),
            s.dir.display()
        );
    }
    let train_samples = dataset::to_train_samples(&samples, cfg)?;
    let schedule = NoiseSchedule::linear(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)?;
    let dcfg = cfg.denoiser_config();

    let mut rng = RngState::seeded(cfg.seed).substream("train");
    let (mut state, mut opt, start_step) = match args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let state = state_from_checkpoint(&ck)?;
            if state.config.input_resolution != dcfg.input_resolution
                || state.config.base_channels != dcfg.base_channels
                || state.config.schedule_steps != dcfg.schedule_steps
            {
                return Err(CliError::validation(
                    "checkpoint model shape does not match config".to_string(),
                ));
            }
            let opt = AdamW::load_from(&state, &ck)?;
            let step = ck.require_u64("train.step")? as usize;
            let lo = ck.require_u64("train.rng_pos_lo")? as u128;
            let hi = ck.require_u64("train.rng_pos_hi")? as u128;
            rng.set_word_pos((hi << 64) | lo);
            (state, opt, step)
        }
        None => {
            let mut init_rng = RngState::seeded(cfg.seed).substream("init");
            let mut state = DenoiserState::init(dcfg, &mut init_rng).map_err(CliError::from)?;
            state.block0.lambda_ref = cfg.lambda_ref;
            state.block0.lambda_mv = cfg.lambda_mv;
            state.block1.lambda_ref = cfg.lambda_ref;
            state.block1.lambda_mv = cfg.lambda_mv;
            let opt = AdamW::new(&state, cfg.lr);
            (state, opt, 0)
        }
    };

    let log_path = args.out.join("train_log.csv");
    let mut log = if start_step > 0 && log_path.exists() {
        fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| CliError::validation(format!("cannot open log: {e}")))?
    } else {
        let mut f = fs::File::create(&log_path)
            .map_err(|e| CliError::validation(format!("cannot create log: {e}")))?;
        writeln!(f, "step,phase,loss,drop_geo,drop_ref,drop_mva")
            .map_err(|e| CliError::validation(e.to_string()))?;
        f
    };

    let total = cfg.warmup_steps + cfg.train_steps;
    let warmup_probs = denoiser::DropoutProbs {
        geo: cfg.dropout_geo,
        reference: 1.0,
        mva: 1.0,
    };
    let main_probs = cfg.dropout();
    let started = std::time::Instant::now();

    for step in start_step..total {
        let warmup = step < cfg.warmup_steps;
        if !warmup && !state.sa_frozen() {
            state.freeze_sa();
        }
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for k in 0..cfg.batch_size {
            let idx = (step * cfg.batch_size + k) % train_samples.len();
            if warmup {
                let view = rng.uniform_index(cfg.n_views);
                batch.push(single_view_sample(&train_samples[idx], view));
            } else {
                batch.push(train_samples[idx].clone());
            }
        }
        let probs = if warmup { warmup_probs } else { main_probs };
        let outcome = denoiser::train_step(&mut state, &mut opt, &batch, &schedule, &mut rng, probs)?;
        for draw in &outcome.draws {
            writeln!(
                log,
                "{step},{},{:.6},{},{},{}",
                if warmup { "warmup" } else { "main" },
                outcome.loss,
                draw.geo as u8,
                draw.reference as u8,
                draw.mva as u8
            )
            .map_err(|e| CliError::validation(e.to_string()))?;
        }
        if (step + 1) % cfg.checkpoint_every == 0 {
            save_train_checkpoint(
                &args.out.join(format!("checkpoint_{:06}.vxc", step + 1)),
                &state,
                &opt,
                step + 1,
                &rng,
            )?;
        }
        if step % 100 == 0 {
            println!(
                "step {step}/{total} ({}) loss {:.4} [{:.1}s]",
                if warmup { "warmup" } else { "main" },
                outcome.loss,
                started.elapsed().as_secs_f32()
            );
        }
    }
    if !state.sa_frozen() {
        // Training fully inside warmup still ends with frozen SA so the
        // checkpoint is usable for guided sampling.
        state.freeze_sa();
    }
    save_train_checkpoint(&args.out.join("checkpoint_final.vxc"), &state, &opt, total, &rng)?;
    write_run_info(args.out, cfg)?;
    println!(
        "trained {total} steps in {:.1}s, checkpoint at {}",
        started.elapsed().as_secs_f32(),
        args.out.join("checkpoint_final.vxc").display()
    );
    Ok(())
}

pub struct GenerateArgs<'a> {
    pub checkpoint: &'a Path,
    pub mesh: &'a str,
    pub ref_image: &'a Path,
    pub out: &'a Path,
    pub dump_bundle: bool,
    pub no_rope: bool,
    pub no_mva: bool,
}

pub fn generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<(), CliError> {
    ensure_dir(args.out)?;
    let ck = Checkpoint::load(args.checkpoint)?;
    let state = state_from_checkpoint(&ck)?;
    if state.config.input_resolution != cfg.image_res {
        return Err(CliError::validation(format!(
            "checkpoint resolution {} does not match config image_res {}",
            state.config.input_resolution, cfg.image_res
        )));
    }
    let schedule = NoiseSchedule::linear(state.config.schedule_steps, cfg.beta_start, cfg.beta_end)?;
    let mesh = dataset::resolve_mesh(args.mesh)?;
    let (_rig, cond) = dataset::render_rig_conditions(&mesh, cfg, cfg.image_res)?;
    let ref_image = load_image_png(args.ref_image, cfg.image_res)?.map(|v| v * 2.0 - 1.0);

    let mut params = SampleParams::new(cfg.sample_steps, cfg.guidance());
    params.identity_phases = args.no_rope;
    if args.no_mva {
        params.lambda_mv_override = Some(0.0);
    }
    let mut rng = RngState::seeded(cfg.seed).substream("sample");

    let images = if args.dump_bundle {
        let mut last_bundle = None;
        let imgs = denoiser::sample_traced(
            &state,
            &cond,
            &ref_image,
            &schedule,
            &params,
            &mut rng,
            &mut |step, bundle| {
                if step + 1 == cfg.sample_steps {
                    last_bundle = Some(bundle.clone());
                }
            },
        )?;
        if let Some(bundle) = last_bundle {
            for (vi, ((u, g), f)) in bundle
                .eps_uncond
                .iter()
                .zip(&bundle.eps_geo)
                .zip(&bundle.eps_full)
                .enumerate()
            {
                voxtex_core::io::write_grid(
                    &args.out.join(format!("bundle_uncond_{vi:02}.vxg")),
                    &u.data,
                )?;
                voxtex_core::io::write_grid(
                    &args.out.join(format!("bundle_geo_{vi:02}.vxg")),
                    &g.data,
                )?;
                voxtex_core::io::write_grid(
                    &args.out.join(format!("bundle_full_{vi:02}.vxg")),
                    &f.data,
                )?;
            }
        }
        imgs
    } else {
        denoiser::sample(&state, &cond, &ref_image, &schedule, &params, &mut rng)?
    };

    for (vi, img) in images.iter().enumerate() {
        voxtex_core::io::write_grid(&args.out.join(format!("view_{vi:02}.vxg")), img)?;
        save_image(img, cfg.image_res, &args.out.join(format!("view_{vi:02}.png")))?;
    }
    write_run_info(args.out, cfg)?;
    println!("generated {} views at {}", images.len(), args.out.display());
    Ok(())
}

fn save_image(img: &Grid, res: usize, path: &Path) -> Result<(), CliError> {
    let mut buf = Vec::with_capacity(res * res * 3);
    for &v in img.data() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    image::save_buffer(path, &buf, res as u32, res as u32, image::ColorType::Rgb8)
        .map_err(|e| CliError::validation(format!("write png: {e}")))?;
    Ok(())
}

/// Load `view_XX` images from a directory (sidecar preferred, PNG fallback)
/// and unproject them through freshly rasterized condition maps.
fn load_partials(
    cfg: &RunConfig,
    mesh_name: &str,
    images_dir: &Path,
    resolution: usize,
) -> Result<Vec<ViewPartial>, CliError> {
    let mesh = dataset::resolve_mesh(mesh_name)?;
    let (rig, maps) = {
        let rig = voxtex_core::geometry::make_camera_rig(cfg.n_views, cfg.elevation_deg, cfg.half_extent)?;
        let maps: Vec<_> = rig
            .iter()
            .map(|cam| voxtex_core::geometry::rasterize_conditions(&mesh, cam, resolution))
            .collect();
        (rig, maps)
    };
    let mut partials = Vec::with_capacity(rig.len());
    for (vi, (cam, m)) in rig.iter().zip(&maps).enumerate() {
        let sidecar = images_dir.join(format!("view_{vi:02}.vxg"));
        let png = images_dir.join(format!("view_{vi:02}.png"));
        let img = if sidecar.exists() {
            voxtex_core::io::read_grid(&sidecar)?
        } else if png.exists() {
            load_image_png(&png, resolution)?
        } else {
            return Err(CliError::validation(format!(
                "missing image for view {vi} in {}",
                images_dir.display()
            )));
        };
        if img.len() != resolution * resolution * 3 {
            return Err(CliError::validation(format!(
                "view {vi} image has {} values, expected {resolution}²×3 (image/camera count mismatch?)",
                img.len()
            )));
        }
        partials.push(baking::unproject_view(&img, m, cam, cfg.texture_res)?);
    }
    Ok(partials)
}

pub fn bake(
    cfg: &RunConfig,
    mesh_name: &str,
    images_dir: &Path,
    resolution: usize,
    out: &Path,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    let partials = load_partials(cfg, mesh_name, images_dir, resolution)?;
    let blended = baking::blend(&partials, cfg.blend_exponent)?;
    let finished = baking::inpaint(&blended)?;
    finished.save_png(&out.join("texture.png"))?;
    finished.save_sidecar(&out.join("texture.vxg"))?;
    voxtex_core::io::write_grid(&out.join("texture_coverage.vxg"), &finished.coverage)?;
    if partials.len() >= 2 {
        let report = compute_lad(&partials)?;
        fs::write(out.join("lad_report.txt"), report.to_text())
            .map_err(|e| CliError::validation(e.to_string()))?;
    }
    write_run_info(out, cfg)?;
    println!(
        "baked {}² texture ({} covered texels) at {}",
        cfg.texture_res,
        blended.covered_count(),
        out.display()
    );
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    mesh_name: &str,
    images_dir: &Path,
    resolution: usize,
    threshold: f64,
) -> Result<(), CliError> {
    let partials = load_partials(cfg, mesh_name, images_dir, resolution)?;
    let report = compute_lad(&partials)?;
    let mut text = report.to_text();
    let _ = writeln!(text, "threshold: {threshold}");
    print!("{text}");
    if report.lad > threshold {
        return Err(CliError::Threshold(format!(
            "lad {:.6} exceeds threshold {threshold}",
            report.lad
        )));
    }
    Ok(())
}
