//! Flat key-value run configuration.
//!
//! The file format is `key = value` lines with `#` comments and a mandatory
//! `config_version` key. Unknown keys are rejected so typos fail loudly.
//! Command-line flags override file keys through the same setter, and the
//! canonical serialization (sorted keys) is hashed so every artifact can
//! name the exact configuration that produced it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub meshes: Vec<String>,
    pub n_views: usize,
    pub elevation_deg: f32,
    pub half_extent: f32,
    pub image_res: usize,
    pub texture_res: usize,
    pub texture_variants: usize,
    pub base_channels: usize,
    pub head_count: usize,
    pub schedule_steps: usize,
    pub beta_start: f32,
    pub beta_end: f32,
    pub warmup_steps: usize,
    pub train_steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub dropout_geo: f64,
    pub dropout_ref: f64,
    pub dropout_mva: f64,
    pub lambda_ref: f32,
    pub lambda_mv: f32,
    pub s_geo: f32,
    pub s_ref: f32,
    pub guidance_mode: String,
    pub per_view_projection: bool,
    pub sample_steps: usize,
    pub eval_lad_threshold: f64,
    pub blend_exponent: f32,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            meshes: vec!["cube".into(), "sphere".into(), "torus".into()],
            n_views: 6,
            elevation_deg: 15.0,
            half_extent: 0.6,
            image_res: 16,
            texture_res: 128,
            texture_variants: 1,
            base_channels: 48,
            head_count: 2,
            schedule_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            warmup_steps: 300,
            train_steps: 2000,
            lr: 2e-3,
            batch_size: 1,
            dropout_geo: 0.1,
            dropout_ref: 0.1,
            dropout_mva: 0.1,
            lambda_ref: 1.0,
            lambda_mv: 1.0,
            s_geo: 2.0,
            s_ref: 5.0,
            guidance_mode: "plain".into(),
            per_view_projection: false,
            sample_steps: 25,
            eval_lad_threshold: 1.0,
            blend_exponent: 4.0,
            checkpoint_every: 500,
        }
    }
}

macro_rules! parse_key {
    ($value:expr, $key:expr) => {
        $value
            .parse()
            .map_err(|_| CliError::validation(format!("bad value for {}: '{}'", $key, $value)))?
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut saw_version = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::validation(format!(
                    "config line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if key == "config_version" {
                let v: u32 = parse_key!(value, key);
                if v != CONFIG_VERSION {
                    return Err(CliError::validation(format!(
                        "unsupported config_version {v}, expected {CONFIG_VERSION}"
                    )));
                }
                saw_version = true;
                continue;
            }
            cfg.set(key, value)?;
        }
        if !saw_version {
            return Err(CliError::validation(
                "config is missing config_version".to_string(),
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one key; shared by the file parser and CLI flag overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = parse_key!(value, key),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "meshes" => {
                self.meshes = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "n_views" => self.n_views = parse_key!(value, key),
            "elevation_deg" => self.elevation_deg = parse_key!(value, key),
            "half_extent" => self.half_extent = parse_key!(value, key),
            "image_res" => self.image_res = parse_key!(value, key),
            "texture_res" => self.texture_res = parse_key!(value, key),
            "texture_variants" => self.texture_variants = parse_key!(value, key),
            "base_channels" => self.base_channels = parse_key!(value, key),
            "head_count" => self.head_count = parse_key!(value, key),
            "schedule_steps" => self.schedule_steps = parse_key!(value, key),
            "beta_start" => self.beta_start = parse_key!(value, key),
            "beta_end" => self.beta_end = parse_key!(value, key),
            "warmup_steps" => self.warmup_steps = parse_key!(value, key),
            "train_steps" => self.train_steps = parse_key!(value, key),
            "lr" => self.lr = parse_key!(value, key),
            "batch_size" => self.batch_size = parse_key!(value, key),
            "dropout_geo" => self.dropout_geo = parse_key!(value, key),
            "dropout_ref" => self.dropout_ref = parse_key!(value, key),
            "dropout_mva" => self.dropout_mva = parse_key!(value, key),
            "lambda_ref" => self.lambda_ref = parse_key!(value, key),
            "lambda_mv" => self.lambda_mv = parse_key!(value, key),
            "s_geo" => self.s_geo = parse_key!(value, key),
            "s_ref" => self.s_ref = parse_key!(value, key),
            "guidance_mode" => self.guidance_mode = value.to_string(),
            "per_view_projection" => self.per_view_projection = parse_key!(value, key),
            "sample_steps" => self.sample_steps = parse_key!(value, key),
            "eval_lad_threshold" => self.eval_lad_threshold = parse_key!(value, key),
            "blend_exponent" => self.blend_exponent = parse_key!(value, key),
            "checkpoint_every" => self.checkpoint_every = parse_key!(value, key),
            other => {
                return Err(CliError::validation(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_views == 0 || self.n_views > 12 {
            return Err(CliError::validation(format!(
                "n_views must be in [1, 12], got {}",
                self.n_views
            )));
        }
        if self.meshes.is_empty() {
            return Err(CliError::validation("meshes must not be empty".to_string()));
        }
        if self.image_res < 4 || self.image_res % 2 != 0 {
            return Err(CliError::validation(format!(
                "image_res must be even and >= 4, got {}",
                self.image_res
            )));
        }
        if self.base_channels % (6 * self.head_count.max(1)) != 0 {
            return Err(CliError::validation(format!(
                "base_channels {} must be a multiple of 6·head_count {}",
                self.base_channels, self.head_count
            )));
        }
        if !(self.dropout_geo >= 0.0 && self.dropout_geo <= 1.0)
            || !(self.dropout_ref >= 0.0 && self.dropout_ref <= 1.0)
            || !(self.dropout_mva >= 0.0 && self.dropout_mva <= 1.0)
        {
            return Err(CliError::validation("dropout probabilities must be in [0, 1]".to_string()));
        }
        voxtex_core::GuidanceMode::parse(&self.guidance_mode)
            .map_err(|e| CliError::validation(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(CliError::validation("batch_size must be positive".to_string()));
        }
        if self.sample_steps == 0 || self.sample_steps > self.schedule_steps {
            return Err(CliError::validation(format!(
                "sample_steps must be in [1, schedule_steps={}], got {}",
                self.schedule_steps, self.sample_steps
            )));
        }
        Ok(())
    }

    /// Canonical serialization: version first, then sorted keys.
    pub fn to_canonical_string(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("base_channels", self.base_channels.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta_end", format!("{}", self.beta_end)),
            ("beta_start", format!("{}", self.beta_start)),
            ("blend_exponent", format!("{}", self.blend_exponent)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("dropout_geo", format!("{}", self.dropout_geo)),
            ("dropout_mva", format!("{}", self.dropout_mva)),
            ("dropout_ref", format!("{}", self.dropout_ref)),
            ("elevation_deg", format!("{}", self.elevation_deg)),
            ("eval_lad_threshold", format!("{}", self.eval_lad_threshold)),
            ("guidance_mode", self.guidance_mode.clone()),
            ("half_extent", format!("{}", self.half_extent)),
            ("head_count", self.head_count.to_string()),
            ("image_res", self.image_res.to_string()),
            ("lambda_mv", format!("{}", self.lambda_mv)),
            ("lambda_ref", format!("{}", self.lambda_ref)),
            ("lr", format!("{}", self.lr)),
            ("meshes", self.meshes.join(",")),
            ("n_views", self.n_views.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("per_view_projection", self.per_view_projection.to_string()),
            ("s_geo", format!("{}", self.s_geo)),
            ("s_ref", format!("{}", self.s_ref)),
            ("sample_steps", self.sample_steps.to_string()),
            ("schedule_steps", self.schedule_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("texture_res", self.texture_res.to_string()),
            ("texture_variants", self.texture_variants.to_string()),
            ("train_steps", self.train_steps.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = format!("config_version = {CONFIG_VERSION}\n");
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_canonical_string().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn guidance(&self) -> voxtex_core::GuidanceConfig {
        voxtex_core::GuidanceConfig {
            s_geo: self.s_geo,
            s_ref: self.s_ref,
            mode: voxtex_core::GuidanceMode::parse(&self.guidance_mode)
                .expect("validated at parse time"),
            per_view_projection: self.per_view_projection,
        }
    }

    pub fn denoiser_config(&self) -> voxtex_core::denoiser::DenoiserConfig {
        voxtex_core::denoiser::DenoiserConfig {
            input_resolution: self.image_res,
            base_channels: self.base_channels,
            head_count: self.head_count,
            schedule_steps: self.schedule_steps,
            zero_init_output: true,
        }
    }

    pub fn dropout(&self) -> voxtex_core::denoiser::DropoutProbs {
        voxtex_core::denoiser::DropoutProbs {
            geo: self.dropout_geo,
            reference: self.dropout_ref,
            mva: self.dropout_mva,
        }
    }
}

/// Resolve an output path under `VOXTEX_OUT_ROOT` when it is set and the
/// path is relative.
pub fn resolve_out_dir(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("VOXTEX_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

/// Write the resolved config and its hash next to a command's artifacts.
pub fn write_run_info(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let body = format!(
        "config_hash = {}\n# resolved configuration\n{}",
        cfg.hash(),
        cfg.to_canonical_string()
    );
    std::fs::write(dir.join("run_info.txt"), body)
        .map_err(|e| CliError::validation(format!("cannot write run_info: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_and_hash_stability() {
        let cfg = RunConfig::default();
        let text = cfg.to_canonical_string();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(back.n_views, 6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("config_version = 1\nnot_a_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn missing_version_is_rejected() {
        assert!(RunConfig::parse("seed = 1\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# hello\nconfig_version = 1\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn overrides_change_hash() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.set("seed", "43").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_catches_bad_views() {
        let mut cfg = RunConfig::default();
        cfg.set("n_views", "13").unwrap();
        assert!(cfg.validate().is_err());
    }
}
