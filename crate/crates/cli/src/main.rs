//! Command-line driver for the multi-view texture synthesis pipeline.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical failure,
//! 4 threshold failure. Relative output paths resolve under
//! `VOXTEX_OUT_ROOT` when that variable is set.

mod commands;
mod config;
mod dataset;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{resolve_out_dir, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
    Threshold(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Threshold(m) => write!(f, "threshold failure: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "voxtex", about = "Multi-view texture synthesis pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (flat key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable): -O seed=7
    #[arg(short = 'O', long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for ov in &self.overrides {
            let Some((k, v)) = ov.split_once('=') else {
                return Err(CliError::validation(format!(
                    "override '{ov}' is not KEY=VALUE"
                )));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        resolve_out_dir(&cfg.out_dir)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (procedural meshes and textures,
    /// multi-view renders, condition maps, checksummed manifest).
    GenDataset {
        #[command(flatten)]
        common: Common,
    },
    /// Rasterize condition maps for one mesh over the camera rig.
    RenderConditions {
        #[command(flatten)]
        common: Common,
        /// Mesh name (cube/sphere/torus) or .obj path.
        #[arg(long)]
        mesh: String,
        /// Map resolution (defaults to image_res).
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Train the denoiser on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Resume from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample per-view images for a mesh with a trained checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mesh: String,
        /// Reference image (PNG); resized to the model resolution.
        #[arg(long)]
        ref_image: PathBuf,
        /// View count override (1-12).
        #[arg(long)]
        views: Option<usize>,
        /// Guidance mode: plain or orthogonal.
        #[arg(long)]
        guidance_mode: Option<String>,
        #[arg(long)]
        s_geo: Option<f32>,
        #[arg(long)]
        s_ref: Option<f32>,
        /// Dump the final-step guidance bundle as float sidecars.
        #[arg(long)]
        dump_bundle: bool,
        /// Ablation: run multi-view attention with identity phases.
        #[arg(long)]
        no_rope: bool,
        /// Ablation: disable the multi-view attention branch.
        #[arg(long)]
        no_mva: bool,
    },
    /// Back-project per-view images into a UV texture.
    Bake {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mesh: String,
        /// Directory holding view_XX images (sidecar or PNG).
        #[arg(long)]
        images: PathBuf,
        /// Image resolution (defaults to image_res).
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Compute the cross-view alignment report; non-zero exit above the
    /// threshold.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mesh: String,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        /// LAD threshold (defaults to eval_lad_threshold).
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenDataset { common } => {
            let cfg = common.load()?;
            commands::gen_dataset(&cfg, &common.out_dir(&cfg))
        }
        Command::RenderConditions {
            common,
            mesh,
            resolution,
        } => {
            let cfg = common.load()?;
            let res = resolution.unwrap_or(cfg.image_res);
            commands::render_conditions(&cfg, &mesh, res, &common.out_dir(&cfg))
        }
        Command::Train {
            common,
            dataset,
            resume,
        } => {
            let cfg = common.load()?;
            commands::train(
                &cfg,
                &commands::TrainArgs {
                    dataset_dir: &dataset,
                    out: &common.out_dir(&cfg),
                    resume: resume.as_deref(),
                },
            )
        }
        Command::Generate {
            common,
            checkpoint,
            mesh,
            ref_image,
            views,
            guidance_mode,
            s_geo,
            s_ref,
            dump_bundle,
            no_rope,
            no_mva,
        } => {
            let mut cfg = common.load()?;
            if let Some(v) = views {
                cfg.n_views = v;
            }
            if let Some(m) = guidance_mode {
                cfg.guidance_mode = m;
            }
            if let Some(s) = s_geo {
                cfg.s_geo = s;
            }
            if let Some(s) = s_ref {
                cfg.s_ref = s;
            }
            cfg.validate()?;
            let out = common.out_dir(&cfg);
            commands::generate(
                &cfg,
                &commands::GenerateArgs {
                    checkpoint: &checkpoint,
                    mesh: &mesh,
                    ref_image: &ref_image,
                    out: &out,
                    dump_bundle,
                    no_rope,
                    no_mva,
                },
            )
        }
        Command::Bake {
            common,
            mesh,
            images,
            resolution,
        } => {
            let cfg = common.load()?;
            let res = resolution.unwrap_or(cfg.image_res);
            commands::bake(&cfg, &mesh, &images, res, &common.out_dir(&cfg))
        }
        Command::Eval {
            common,
            mesh,
            images,
            resolution,
            threshold,
        } => {
            let cfg = common.load()?;
            let res = resolution.unwrap_or(cfg.image_res);
            let threshold = threshold.unwrap_or(cfg.eval_lad_threshold);
            commands::eval(&cfg, &mesh, &images, res, threshold)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
