//! Synthetic dataset generation and loading.
//!
//! A dataset is a directory of samples, each a procedural mesh with a
//! procedural texture, rendered from the camera rig: ground-truth view
//! renders plus condition maps, all with lossless float sidecars. The
//! manifest lists every view of every sample and ends with a sha256
//! checksum over its own bytes so corruption is detected on load.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use voxtex_core::baking::{patterns, render_textured};
use voxtex_core::denoiser::PyramidPhases;
use voxtex_core::geometry::{
    load_mesh, make_camera_rig, normalize_to_canonical, primitives, rasterize_conditions,
    CameraView, ConditionMaps, Mesh,
};
use voxtex_core::numerics::{Grid, RngState};
use voxtex_core::{io, Error};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Resolve a mesh argument: a procedural name or an `.obj` path.
pub fn resolve_mesh(name: &str) -> Result<Mesh, CliError> {
    let mesh = match name {
        "cube" => primitives::cube(),
        "sphere" => primitives::sphere(48, 24),
        "torus" => primitives::torus(0.35, 0.15, 36, 18),
        path => load_mesh(Path::new(path)).map_err(CliError::from)?,
    };
    normalize_to_canonical(&mesh).map_err(CliError::from)
}

fn write_obj(mesh: &Mesh, path: &Path) -> Result<(), CliError> {
    let mut out = String::new();
    for p in &mesh.positions {
        let _ = writeln!(out, "v {} {} {}", p[0], p[1], p[2]);
    }
    for t in &mesh.uvs {
        let _ = writeln!(out, "vt {} {}", t[0], t[1]);
    }
    for n in &mesh.normals {
        let _ = writeln!(out, "vn {} {} {}", n[0], n[1], n[2]);
    }
    for tri in &mesh.triangles {
        let _ = writeln!(
            out,
            "f {}/{}/{} {}/{}/{} {}/{}/{}",
            tri.pos[0] + 1,
            tri.uv[0] + 1,
            tri.nrm[0] + 1,
            tri.pos[1] + 1,
            tri.uv[1] + 1,
            tri.nrm[1] + 1,
            tri.pos[2] + 1,
            tri.uv[2] + 1,
            tri.nrm[2] + 1
        );
    }
    fs::write(path, out).map_err(|e| CliError::validation(format!("write obj: {e}")))?;
    Ok(())
}

/// Draw a pair of well-separated colors.
fn color_pair(rng: &mut RngState) -> ([f32; 3], [f32; 3]) {
    loop {
        let a = [
            0.05 + 0.9 * rng.uniform() as f32,
            0.05 + 0.9 * rng.uniform() as f32,
            0.05 + 0.9 * rng.uniform() as f32,
        ];
        let b = [
            0.05 + 0.9 * rng.uniform() as f32,
            0.05 + 0.9 * rng.uniform() as f32,
            0.05 + 0.9 * rng.uniform() as f32,
        ];
        let dist: f32 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        if dist > 0.8 {
            return (a, b);
        }
    }
}

fn make_texture(pattern: &str, res: usize, rng: &mut RngState) -> Result<Grid, CliError> {
    let (a, b) = color_pair(rng);
    Ok(match pattern {
        "checker" => patterns::checker(res, 4, a, b),
        "gradient" => patterns::gradient(res, a, b),
        "stripes" => patterns::stripes(res, 6, a, b, rng.bernoulli(0.5)),
        other => return Err(CliError::validation(format!("unknown pattern '{other}'"))),
    })
}

const PATTERNS: [&str; 3] = ["checker", "gradient", "stripes"];

fn save_image_png(img: &Grid, res: usize, path: &Path) -> Result<(), CliError> {
    let mut buf = Vec::with_capacity(res * res * 3);
    for &v in img.data() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    image::save_buffer(path, &buf, res as u32, res as u32, image::ColorType::Rgb8)
        .map_err(|e| CliError::validation(format!("write png: {e}")))?;
    Ok(())
}

pub fn load_image_png(path: &Path, res: usize) -> Result<Grid, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::validation(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let data: Vec<f32> = img.pixels().flat_map(|p| p.0).map(|v| v as f32 / 255.0).collect();
    let grid = Grid::new(
        vec![(img.height() * img.width()) as usize, 3],
        data,
    )
    .map_err(CliError::from)?;
    if (img.width() as usize, img.height() as usize) == (res, res) {
        Ok(grid)
    } else {
        let hwc = grid
            .reshape(vec![img.height() as usize, img.width() as usize, 3])
            .map_err(CliError::from)?;
        let resized = hwc.resize_bilinear(res, res).map_err(CliError::from)?;
        resized.reshape(vec![res * res, 3]).map_err(CliError::from)
    }
}

/// Generate the dataset under `out`. Returns the number of manifest view
/// entries written.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<usize, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::validation(format!("cannot create {}: {e}", out.display())))?;
    let rig = make_camera_rig(cfg.n_views, cfg.elevation_deg, cfg.half_extent)?;
    let root_rng = RngState::seeded(cfg.seed).substream("dataset");

    let mut manifest = String::new();
    let _ = writeln!(manifest, "manifest_version = 1");
    let _ = writeln!(manifest, "config_hash = {}", cfg.hash());

    let mut entries = 0usize;
    for (mi, mesh_name) in cfg.meshes.iter().enumerate() {
        let mesh = resolve_mesh(mesh_name)?;
        for variant in 0..cfg.texture_variants.max(1) {
            let sample_id = format!("{mesh_name}_{variant:02}");
            let dir = out.join(&sample_id);
            fs::create_dir_all(&dir)
                .map_err(|e| CliError::validation(format!("cannot create sample dir: {e}")))?;
            let mut rng = root_rng.substream(&sample_id);
            let pattern = PATTERNS[(mi + variant) % PATTERNS.len()];
            let texture = make_texture(pattern, cfg.texture_res, &mut rng)?;

            write_obj(&mesh, &dir.join("mesh.obj"))?;
            io::write_grid(&dir.join("texture.vxg"), &texture).map_err(CliError::from)?;
            save_texture_png(&texture, cfg.texture_res, &dir.join("texture.png"))?;

            let _ = writeln!(
                manifest,
                "sample {sample_id} mesh={mesh_name} variant={variant} pattern={pattern} seed={}",
                rng.seed()
            );
            for (vi, cam) in rig.iter().enumerate() {
                let (img, maps) = render_textured(&mesh, &texture, cam, cfg.image_res, [0.0; 3])
                    .map_err(CliError::from)?;
                let render_name = format!("view_{vi:02}.vxg");
                io::write_grid(&dir.join(&render_name), &img).map_err(CliError::from)?;
                save_image_png(&img, cfg.image_res, &dir.join(format!("view_{vi:02}.png")))?;
                maps.save_sidecars(&dir, &format!("cond_{vi:02}")).map_err(CliError::from)?;
                maps.save_pngs(&dir, &format!("cond_{vi:02}")).map_err(CliError::from)?;
                let _ = writeln!(
                    manifest,
                    "entry sample={sample_id} view={vi} azimuth={} render={render_name}",
                    cam.azimuth_deg
                );
                entries += 1;
            }
        }
    }

    let checksum = Sha256::digest(manifest.as_bytes());
    let _ = writeln!(
        manifest,
        "checksum = {}",
        checksum.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    );
    fs::write(out.join(MANIFEST_NAME), &manifest)
        .map_err(|e| CliError::validation(format!("cannot write manifest: {e}")))?;
    Ok(entries)
}

fn save_texture_png(texture: &Grid, res: usize, path: &Path) -> Result<(), CliError> {
    let flat = texture.clone().reshape(vec![res * res, 3]).map_err(CliError::from)?;
    save_image_png(&flat, res, path)
}

/// One loaded training sample.
pub struct DatasetSample {
    pub sample_id: String,
    pub mesh_name: String,
    pub dir: PathBuf,
    pub clean_views: Vec<Grid>,
    pub cond: Vec<ConditionMaps>,
    pub ref_image: Grid,
}

/// Parse and checksum-verify the manifest, returning (sample ids, entry
/// count).
pub fn verify_manifest(dataset_dir: &Path) -> Result<(Vec<String>, usize), CliError> {
    let path = dataset_dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::validation(format!("cannot read manifest {}: {e}", path.display())))?;
    let Some(idx) = text.rfind("checksum = ") else {
        return Err(CliError::validation("manifest missing checksum".to_string()));
    };
    let (body, tail) = text.split_at(idx);
    let stored = tail.trim_start_matches("checksum = ").trim();
    let digest = Sha256::digest(body.as_bytes());
    let computed = digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    });
    if stored != computed {
        return Err(CliError::validation(format!(
            "manifest checksum mismatch: stored {stored}, computed {computed}"
        )));
    }
    let mut samples = Vec::new();
    let mut entries = 0usize;
    for line in body.lines() {
        if let Some(rest) = line.strip_prefix("sample ") {
            if let Some(id) = rest.split_whitespace().next() {
                samples.push(id.to_string());
            }
        } else if line.starts_with("entry ") {
            entries += 1;
        }
    }
    Ok((samples, entries))
}

/// Load every sample: clean views scaled to `[-1, 1]`, condition maps, and
/// the reference-pose render as the reference image.
pub fn load(dataset_dir: &Path, cfg: &RunConfig) -> Result<Vec<DatasetSample>, CliError> {
    let (sample_ids, _) = verify_manifest(dataset_dir)?;
    let mut out = Vec::with_capacity(sample_ids.len());
    for id in sample_ids {
        let dir = dataset_dir.join(&id);
        let mut clean_views = Vec::with_capacity(cfg.n_views);
        let mut cond = Vec::with_capacity(cfg.n_views);
        for vi in 0..cfg.n_views {
            let img = io::read_grid(&dir.join(format!("view_{vi:02}.vxg"))).map_err(CliError::from)?;
            clean_views.push(img.map(|v| v * 2.0 - 1.0));
            cond.push(
                ConditionMaps::load_sidecars(&dir, &format!("cond_{vi:02}"))
                    .map_err(CliError::from)?,
            );
        }
        let ref_image = clean_views[0].clone();
        let mesh_name = id.rsplit_once('_').map(|(m, _)| m.to_string()).unwrap_or_else(|| id.clone());
        out.push(DatasetSample {
            sample_id: id,
            mesh_name,
            dir,
            clean_views,
            cond,
            ref_image,
        });
    }
    Ok(out)
}

/// Convert loaded samples into training samples with precomputed phases.
pub fn to_train_samples(
    samples: &[DatasetSample],
    cfg: &RunConfig,
) -> Result<Vec<voxtex_core::denoiser::TrainSample>, CliError> {
    let dcfg = cfg.denoiser_config();
    samples
        .iter()
        .map(|s| {
            let phases = PyramidPhases::build(&s.cond, &dcfg).map_err(CliError::from)?;
            Ok(voxtex_core::denoiser::TrainSample {
                clean_views: s.clean_views.clone(),
                cond: s.cond.clone(),
                phases,
                ref_image: s.ref_image.clone(),
            })
        })
        .collect()
}

/// Render the rig's condition maps for one mesh.
pub fn render_rig_conditions(
    mesh: &Mesh,
    cfg: &RunConfig,
    resolution: usize,
) -> Result<(Vec<CameraView>, Vec<ConditionMaps>), CliError> {
    let rig = make_camera_rig(cfg.n_views, cfg.elevation_deg, cfg.half_extent)?;
    let maps = rig
        .iter()
        .map(|cam| rasterize_conditions(mesh, cam, resolution))
        .collect();
    Ok((rig, maps))
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(msg) => CliError::Numerical(msg),
            other => CliError::Validation(other.to_string()),
        }
    }
}
