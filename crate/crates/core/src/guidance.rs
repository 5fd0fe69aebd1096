//! Classifier-free guidance over two conditions: geometry maps and the
//! reference image.
//!
//! Three noise estimates are composed: unconditional, geometry-only, and
//! fully conditioned. Plain mode telescopes them with separate scales; the
//! orthogonal mode removes the component of the reference-guidance
//! direction that is parallel to the geometry-guidance direction, so the
//! reference cannot fight sharp geometric activations.

use crate::attention::LatentGrid;
use crate::error::{Error, Result};
use crate::numerics::RngState;

/// The three per-view noise-estimate sets feeding one guidance step.
#[derive(Debug, Clone)]
pub struct GuidanceBundle {
    /// ε(z_t, ∅, ∅)
    pub eps_uncond: Vec<LatentGrid>,
    /// ε(z_t, C_geo, ∅)
    pub eps_geo: Vec<LatentGrid>,
    /// ε(z_t, C_geo, C_ref)
    pub eps_full: Vec<LatentGrid>,
}

impl GuidanceBundle {
    fn validate(&self) -> Result<()> {
        if self.eps_uncond.len() != self.eps_geo.len() || self.eps_geo.len() != self.eps_full.len() {
            return Err(Error::shape("bundle view counts differ"));
        }
        if self.eps_uncond.is_empty() {
            return Err(Error::invalid("empty guidance bundle"));
        }
        for ((u, g), f) in self
            .eps_uncond
            .iter()
            .zip(&self.eps_geo)
            .zip(&self.eps_full)
        {
            if !u.same_shape(g) || !g.same_shape(f) {
                return Err(Error::shape("bundle member shapes differ"));
            }
            u.data.assert_finite("eps_uncond")?;
            g.data.assert_finite("eps_geo")?;
            f.data.assert_finite("eps_full")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    Plain,
    Orthogonal,
}

impl GuidanceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(GuidanceMode::Plain),
            "orthogonal" => Ok(GuidanceMode::Orthogonal),
            other => Err(Error::invalid(format!(
                "unknown guidance mode '{other}' (expected 'plain' or 'orthogonal')"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GuidanceMode::Plain => "plain",
            GuidanceMode::Orthogonal => "orthogonal",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig {
    pub s_geo: f32,
    pub s_ref: f32,
    pub mode: GuidanceMode,
    /// Orthogonal projection inner product taken per view instead of
    /// globally across all views.
    pub per_view_projection: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            s_geo: 2.0,
            s_ref: 5.0,
            mode: GuidanceMode::Plain,
            per_view_projection: false,
        }
    }
}

impl GuidanceConfig {
    fn validate(&self) -> Result<()> {
        if !(self.s_geo.is_finite() && self.s_ref.is_finite()) {
            return Err(Error::non_finite("guidance scales"));
        }
        if self.s_geo < 0.0 || self.s_ref < 0.0 {
            return Err(Error::invalid("guidance scales must be non-negative"));
        }
        Ok(())
    }
}

/// Composed guidance result; `fell_back` flags a degenerate geometry
/// direction that forced orthogonal mode down to plain composition.
#[derive(Debug, Clone)]
pub struct GuidanceResult {
    pub eps: Vec<LatentGrid>,
    pub fell_back: bool,
}

/// Plain multi-conditioned composition:
/// `eps = eps_uncond + s_geo·(eps_geo − eps_uncond) + s_ref·(eps_full − eps_geo)`.
/// Unit scales telescope to the fully conditioned estimate.
pub fn compose_plain(bundle: &GuidanceBundle, cfg: &GuidanceConfig) -> Result<GuidanceResult> {
    bundle.validate()?;
    cfg.validate()?;
    let mut out = Vec::with_capacity(bundle.eps_uncond.len());
    for ((u, g), f) in bundle
        .eps_uncond
        .iter()
        .zip(&bundle.eps_geo)
        .zip(&bundle.eps_full)
    {
        let mut eps = u.data.clone();
        eps.axpy(cfg.s_geo, &g.data.sub(&u.data)?)?;
        eps.axpy(cfg.s_ref, &f.data.sub(&g.data)?)?;
        eps.assert_finite("composed guidance")?;
        out.push(LatentGrid::new(u.view_id, u.height, u.width, u.channels, eps)?);
    }
    Ok(GuidanceResult {
        eps: out,
        fell_back: false,
    })
}

/// Orthogonally projected composition: with `g = eps_geo − eps_uncond` and
/// `r = eps_full − eps_geo`, the reference term is replaced by
/// `r⊥ = r − (r·ĝ)ĝ` before scaling, removing the part of the reference
/// guidance that pushes along the geometry direction. A vanishing `‖g‖`
/// makes the projection undefined; composition falls back to plain and
/// flags it.
pub fn compose_orthogonal(bundle: &GuidanceBundle, cfg: &GuidanceConfig) -> Result<GuidanceResult> {
    bundle.validate()?;
    cfg.validate()?;
    let views = bundle.eps_uncond.len();
    let g: Vec<crate::numerics::Grid> = (0..views)
        .map(|i| bundle.eps_geo[i].data.sub(&bundle.eps_uncond[i].data))
        .collect::<Result<_>>()?;
    let r: Vec<crate::numerics::Grid> = (0..views)
        .map(|i| bundle.eps_full[i].data.sub(&bundle.eps_geo[i].data))
        .collect::<Result<_>>()?;

    let projections: Vec<Option<f64>> = if cfg.per_view_projection {
        (0..views)
            .map(|i| {
                let g_norm_sq: f64 = g[i].dot(&g[i]).unwrap_or(0.0);
                if g_norm_sq.sqrt() <= 1e-8 {
                    None
                } else {
                    Some(r[i].dot(&g[i]).unwrap_or(0.0) / g_norm_sq)
                }
            })
            .collect()
    } else {
        let mut g_norm_sq = 0.0f64;
        let mut rg = 0.0f64;
        for i in 0..views {
            g_norm_sq += g[i].dot(&g[i])?;
            rg += r[i].dot(&g[i])?;
        }
        let coeff = if g_norm_sq.sqrt() <= 1e-8 {
            None
        } else {
            Some(rg / g_norm_sq)
        };
        vec![coeff; views]
    };

    if projections.iter().any(|p| p.is_none()) {
        let mut result = compose_plain(bundle, cfg)?;
        result.fell_back = true;
        return Ok(result);
    }

    let mut out = Vec::with_capacity(views);
    for i in 0..views {
        let u = &bundle.eps_uncond[i];
        let coeff = projections[i].unwrap() as f32;
        let mut r_perp = r[i].clone();
        r_perp.axpy(-coeff, &g[i])?;
        let mut eps = u.data.clone();
        eps.axpy(cfg.s_geo, &g[i])?;
        eps.axpy(cfg.s_ref, &r_perp)?;
        eps.assert_finite("composed guidance")?;
        out.push(LatentGrid::new(u.view_id, u.height, u.width, u.channels, eps)?);
    }
    Ok(GuidanceResult {
        eps: out,
        fell_back: false,
    })
}

/// Compose according to the configured mode.
pub fn compose(bundle: &GuidanceBundle, cfg: &GuidanceConfig) -> Result<GuidanceResult> {
    match cfg.mode {
        GuidanceMode::Plain => compose_plain(bundle, cfg),
        GuidanceMode::Orthogonal => compose_orthogonal(bundle, cfg),
    }
}

/// Bernoulli condition dropout: returns `None` with probability `p`.
pub fn drop_condition<T>(cond: T, p: f64, rng: &mut RngState) -> Option<T> {
    assert!((0.0..=1.0).contains(&p), "dropout probability out of range");
    if rng.bernoulli(p) {
        None
    } else {
        Some(cond)
    }
}
