//! Decoupled parallel attention: a frozen self-attention branch, a
//! multi-view branch with 3D-aware rotary embedding, and a reference branch
//! reading keys/values from a frozen reference pass, combined additively:
//!
//! ```text
//! out_v = z_v + SA(z_v) + λ_ref · RefA(z_v, Z_ref) + λ_mv · MVA(z_all)_v
//! ```
//!
//! A branch whose λ is zero is skipped entirely, which makes the dropout
//! semantics exact: with λ_mv = 0 the per-view output is bit-for-bit
//! independent of the other views.

use crate::error::{Error, Result};
use crate::numerics::{Grid, RngState};
use crate::rope3d::{self, RopeConfig};
use crate::voxelmap::PhaseGrid;

/// One view's feature map, stored token-major: `(H·W) × C`.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub view_id: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Grid,
}

impl LatentGrid {
    pub fn new(view_id: usize, height: usize, width: usize, channels: usize, data: Grid) -> Result<Self> {
        if data.shape() != [height * width, channels] {
            return Err(Error::shape(format!(
                "latent data shape {:?} does not match {}×{}×{}",
                data.shape(),
                height,
                width,
                channels
            )));
        }
        Ok(LatentGrid {
            view_id,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(view_id: usize, height: usize, width: usize, channels: usize) -> Self {
        LatentGrid {
            view_id,
            height,
            width,
            channels,
            data: Grid::zeros(vec![height * width, channels]),
        }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Same spatial extent and channel count (view ids may differ).
    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Projection matrices for one attention branch, each `C × C`.
#[derive(Debug, Clone)]
pub struct BranchWeights {
    pub wq: Grid,
    pub wk: Grid,
    pub wv: Grid,
    pub wo: Grid,
}

impl BranchWeights {
    pub fn random(channels: usize, rng: &mut RngState) -> Self {
        let scale = 1.0 / (channels as f32).sqrt();
        // Output projections start small so fresh blocks perturb the
        // residual stream gently.
        let out_scale = 0.2 * scale;
        BranchWeights {
            wq: rng.gaussian(vec![channels, channels]).scale(scale),
            wk: rng.gaussian(vec![channels, channels]).scale(scale),
            wv: rng.gaussian(vec![channels, channels]).scale(scale),
            wo: rng.gaussian(vec![channels, channels]).scale(out_scale),
        }
    }

    pub fn identity_output(channels: usize, rng: &mut RngState) -> Self {
        let mut w = Self::random(channels, rng);
        w.wo = Grid::identity(channels);
        w
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }
}

/// Weights for the full decoupled block.
#[derive(Debug, Clone)]
pub struct AttentionBlockWeights {
    pub sa: BranchWeights,
    pub mva: BranchWeights,
    pub refa: BranchWeights,
    pub head_count: usize,
    pub lambda_ref: f32,
    pub lambda_mv: f32,
    /// Set once the self-attention branch is pretrained; train steps must
    /// never update a frozen branch.
    pub sa_frozen: bool,
}

impl AttentionBlockWeights {
    pub fn random(channels: usize, head_count: usize, rng: &mut RngState) -> Result<Self> {
        if head_count == 0 || channels % (head_count * 6) != 0 {
            return Err(Error::invalid(format!(
                "channels {channels} must be a multiple of 6·head_count ({head_count})"
            )));
        }
        Ok(AttentionBlockWeights {
            sa: BranchWeights::random(channels, rng),
            mva: BranchWeights::random(channels, rng),
            refa: BranchWeights::random(channels, rng),
            head_count,
            lambda_ref: 1.0,
            lambda_mv: 1.0,
            sa_frozen: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.sa.channels()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.head_count
    }

    pub fn rope_config(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.head_dim())
    }
}

/// Gradients for one branch, same shapes as [`BranchWeights`].
#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub wq: Grid,
    pub wk: Grid,
    pub wv: Grid,
    pub wo: Grid,
}

impl BranchGrads {
    pub fn zeros(channels: usize) -> Self {
        BranchGrads {
            wq: Grid::zeros(vec![channels, channels]),
            wk: Grid::zeros(vec![channels, channels]),
            wv: Grid::zeros(vec![channels, channels]),
            wo: Grid::zeros(vec![channels, channels]),
        }
    }

    pub fn accumulate(&mut self, other: &BranchGrads) -> Result<()> {
        self.wq.axpy(1.0, &other.wq)?;
        self.wk.axpy(1.0, &other.wk)?;
        self.wv.axpy(1.0, &other.wv)?;
        self.wo.axpy(1.0, &other.wo)?;
        Ok(())
    }
}

/// Per-token rotation phases for a (possibly concatenated) token sequence.
#[derive(Debug, Clone)]
pub(crate) struct TokenPhases {
    phases: Vec<[u16; 3]>,
    valid: Vec<u8>,
}

impl TokenPhases {
    pub(crate) fn from_grids(grids: &[&PhaseGrid]) -> Self {
        let mut phases = Vec::new();
        let mut valid = Vec::new();
        for g in grids {
            for t in 0..g.token_count() {
                phases.push(g.phase_at(t));
                valid.push(g.valid_at(t) as u8);
            }
        }
        TokenPhases { phases, valid }
    }

    fn len(&self) -> usize {
        self.phases.len()
    }
}

/// Saved intermediates of one attention evaluation, enough to run the
/// backward pass without recomputation.
pub(crate) struct AttentionPass {
    tokens_q: Grid,
    tokens_kv: Grid,
    q: Grid,
    k: Grid,
    v: Grid,
    attn: Vec<Grid>,
    concat: Grid,
    heads: usize,
    head_dim: usize,
    rotation: Option<(TokenPhases, RopeConfig)>,
}

fn take_cols(m: &Grid, start: usize, width: usize) -> Grid {
    let rows = m.shape()[0];
    let cols = m.shape()[1];
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let base = r * cols + start;
        out.extend_from_slice(&m.data()[base..base + width]);
    }
    Grid::new(vec![rows, width], out).expect("column slice sizes agree")
}

fn put_cols(dst: &mut Grid, src: &Grid, start: usize) {
    let rows = src.shape()[0];
    let width = src.shape()[1];
    let cols = dst.shape()[1];
    for r in 0..rows {
        let d = r * cols + start;
        let s = r * width;
        dst.data_mut()[d..d + width].copy_from_slice(&src.data()[s..s + width]);
    }
}

fn rotate_tokens(m: &mut Grid, phases: &TokenPhases, heads: usize, cfg: &RopeConfig, inverse: bool) {
    let cols = m.shape()[1];
    let dim = cfg.dim();
    debug_assert_eq!(cols, heads * dim);
    let data = m.data_mut();
    for t in 0..phases.len() {
        if phases.valid[t] == 0 {
            continue;
        }
        let phase = phases.phases[t];
        for h in 0..heads {
            let s = t * cols + h * dim;
            if inverse {
                rope3d::rotate_inverse_in_place(&mut data[s..s + dim], phase, cfg);
            } else {
                rope3d::rotate_in_place(&mut data[s..s + dim], phase, cfg);
            }
        }
    }
}

/// Multi-head scaled-dot-product attention with optional rotary phases
/// applied to queries and keys after projection.
pub(crate) fn attention_forward(
    tokens_q: &Grid,
    tokens_kv: &Grid,
    w: &BranchWeights,
    heads: usize,
    rotation: Option<(&TokenPhases, &RopeConfig)>,
) -> Result<(Grid, AttentionPass)> {
    let c = w.channels();
    if tokens_q.shape()[1] != c || tokens_kv.shape()[1] != c {
        return Err(Error::shape(format!(
            "token channels {:?}/{:?} do not match weights {c}",
            tokens_q.shape(),
            tokens_kv.shape()
        )));
    }
    if c % heads != 0 {
        return Err(Error::shape(format!("channels {c} not divisible by {heads} heads")));
    }
    let head_dim = c / heads;
    let n = tokens_q.shape()[0];

    let mut q = tokens_q.matmul(&w.wq)?;
    let mut k = tokens_kv.matmul(&w.wk)?;
    let v = tokens_kv.matmul(&w.wv)?;

    if let Some((phases, cfg)) = rotation {
        if cfg.dim() != head_dim {
            return Err(Error::shape(format!(
                "rotary dim {} does not match head dim {head_dim}",
                cfg.dim()
            )));
        }
        if phases.len() != tokens_q.shape()[0] || phases.len() != tokens_kv.shape()[0] {
            return Err(Error::shape(
                "phase count does not match token count",
            ));
        }
        rotate_tokens(&mut q, phases, heads, cfg, false);
        rotate_tokens(&mut k, phases, heads, cfg, false);
    }

    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut concat = Grid::zeros(vec![n, c]);
    let mut attn_per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = take_cols(&q, h * head_dim, head_dim).scale(scale);
        let kh = take_cols(&k, h * head_dim, head_dim);
        let vh = take_cols(&v, h * head_dim, head_dim);
        let attn = qh.matmul_nt(&kh)?.softmax_rows()?;
        let out_h = attn.matmul(&vh)?;
        put_cols(&mut concat, &out_h, h * head_dim);
        attn_per_head.push(attn);
    }
    let out = concat.matmul(&w.wo)?;
    let pass = AttentionPass {
        tokens_q: tokens_q.clone(),
        tokens_kv: tokens_kv.clone(),
        q,
        k,
        v,
        attn: attn_per_head,
        concat,
        heads,
        head_dim,
        rotation: rotation.map(|(p, c)| (p.clone(), c.clone())),
    };
    Ok((out, pass))
}

/// Backward pass. Returns gradients w.r.t. the query tokens, the key/value
/// tokens and the branch weights. When queries and keys come from the same
/// tokens the caller sums the two token gradients.
pub(crate) fn attention_backward(
    pass: &AttentionPass,
    w: &BranchWeights,
    d_out: &Grid,
) -> Result<(Grid, Grid, BranchGrads)> {
    let c = w.channels();
    let head_dim = pass.head_dim;
    let scale = 1.0 / (head_dim as f32).sqrt();

    // d_out = concat · Wo
    let d_concat = d_out.matmul_nt(&w.wo)?;
    let d_wo = pass.concat.matmul_tn(d_out)?;

    let mut d_q = Grid::zeros(vec![pass.q.shape()[0], c]);
    let mut d_k = Grid::zeros(vec![pass.k.shape()[0], c]);
    let mut d_v = Grid::zeros(vec![pass.v.shape()[0], c]);

    for h in 0..pass.heads {
        let start = h * head_dim;
        let d_oh = take_cols(&d_concat, start, head_dim);
        let attn = &pass.attn[h];
        let kh = take_cols(&pass.k, start, head_dim);
        let vh = take_cols(&pass.v, start, head_dim);
        let qh = take_cols(&pass.q, start, head_dim);

        // out_h = attn · v_h
        let d_attn = d_oh.matmul_nt(&vh)?;
        let d_vh = attn.matmul_tn(&d_oh)?;

        // Softmax backward per row: dS = A ⊙ (dA − rowsum(dA ⊙ A)).
        let rows = attn.shape()[0];
        let cols = attn.shape()[1];
        let mut d_scores = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let a = &attn.data()[r * cols..(r + 1) * cols];
            let da = &d_attn.data()[r * cols..(r + 1) * cols];
            let dot: f64 = a.iter().zip(da).map(|(&x, &y)| x as f64 * y as f64).sum();
            let row_out = &mut d_scores[r * cols..(r + 1) * cols];
            for i in 0..cols {
                row_out[i] = a[i] * (da[i] - dot as f32);
            }
        }
        let d_scores = Grid::new(vec![rows, cols], d_scores)?;

        // scores = (q_h · scale) · k_hᵀ
        let d_qh = d_scores.matmul(&kh)?.scale(scale);
        let d_kh = d_scores.transpose2d()?.matmul(&qh)?.scale(scale);

        put_cols(&mut d_q, &d_qh, start);
        put_cols(&mut d_k, &d_kh, start);
        put_cols(&mut d_v, &d_vh, start);
    }

    // Rotation is orthogonal; its adjoint is the inverse rotation.
    if let Some((phases, cfg)) = &pass.rotation {
        rotate_tokens(&mut d_q, phases, pass.heads, cfg, true);
        rotate_tokens(&mut d_k, phases, pass.heads, cfg, true);
    }

    let grads = BranchGrads {
        wq: pass.tokens_q.matmul_tn(&d_q)?,
        wk: pass.tokens_kv.matmul_tn(&d_k)?,
        wv: pass.tokens_kv.matmul_tn(&d_v)?,
        wo: d_wo,
    };
    let d_tokens_q = d_q.matmul_nt(&w.wq)?;
    let mut d_tokens_kv = d_k.matmul_nt(&w.wk)?;
    d_tokens_kv.axpy(1.0, &d_v.matmul_nt(&w.wv)?)?;
    Ok((d_tokens_q, d_tokens_kv, grads))
}

/// Standard multi-head self-attention over one view's own tokens.
pub fn self_attention(z: &LatentGrid, w: &AttentionBlockWeights) -> Result<LatentGrid> {
    let (out, _) = attention_forward(&z.data, &z.data, &w.sa, w.head_count, None)?;
    LatentGrid::new(z.view_id, z.height, z.width, z.channels, out)
}

/// Multi-view attention: all views' tokens form one joint sequence, queries
/// and keys are rotated by their voxel phases, and per-view outputs are
/// split back out.
pub fn multi_view_attention(
    views: &[LatentGrid],
    phases: &[PhaseGrid],
    w: &AttentionBlockWeights,
    cfg: &RopeConfig,
) -> Result<Vec<LatentGrid>> {
    if views.is_empty() {
        return Err(Error::invalid("multi_view_attention needs at least one view"));
    }
    if views.len() != phases.len() {
        return Err(Error::shape(format!(
            "{} views but {} phase grids",
            views.len(),
            phases.len()
        )));
    }
    let first = &views[0];
    for v in views {
        if !v.same_shape(first) {
            return Err(Error::shape("views must share one shape"));
        }
    }
    for (v, p) in views.iter().zip(phases) {
        if p.resolution != v.height || p.resolution != v.width {
            return Err(Error::shape(format!(
                "phase grid {}² does not match view {}×{}",
                p.resolution, v.height, v.width
            )));
        }
    }
    let tokens_per_view = first.tokens();
    let c = first.channels;
    let mut joint = Vec::with_capacity(views.len() * tokens_per_view * c);
    for v in views {
        joint.extend_from_slice(v.data.data());
    }
    let joint = Grid::new(vec![views.len() * tokens_per_view, c], joint)?;
    let token_phases = TokenPhases::from_grids(&phases.iter().collect::<Vec<_>>());
    let (out, _) = attention_forward(&joint, &joint, &w.mva, w.head_count, Some((&token_phases, cfg)))?;

    let mut result = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let slice =
            out.data()[i * tokens_per_view * c..(i + 1) * tokens_per_view * c].to_vec();
        result.push(LatentGrid::new(
            v.view_id,
            v.height,
            v.width,
            c,
            Grid::new(vec![tokens_per_view, c], slice)?,
        )?);
    }
    Ok(result)
}

/// Reference attention: queries from the view, keys and values from the
/// reference features (produced by a frozen-weight pass over the reference
/// image).
pub fn reference_attention(
    z: &LatentGrid,
    ref_feats: &LatentGrid,
    w: &AttentionBlockWeights,
) -> Result<LatentGrid> {
    if ref_feats.channels != z.channels {
        return Err(Error::shape(format!(
            "reference channels {} do not match view channels {}",
            ref_feats.channels, z.channels
        )));
    }
    let (out, _) = attention_forward(&z.data, &ref_feats.data, &w.refa, w.head_count, None)?;
    LatentGrid::new(z.view_id, z.height, z.width, z.channels, out)
}

/// The full decoupled block:
/// `out_v = z_v + SA(z_v) + λ_ref·RefA(z_v, ref) + λ_mv·MVA(views)_v`.
///
/// Branches with λ = 0 (or a missing reference) are skipped outright, so a
/// dropped branch has exactly zero influence.
pub fn parallel_block(
    views: &[LatentGrid],
    phases: &[PhaseGrid],
    ref_feats: Option<&LatentGrid>,
    w: &AttentionBlockWeights,
    cfg: &RopeConfig,
) -> Result<Vec<LatentGrid>> {
    let mva_out = if w.lambda_mv != 0.0 {
        Some(multi_view_attention(views, phases, w, cfg)?)
    } else {
        None
    };
    let mut result = Vec::with_capacity(views.len());
    for (i, z) in views.iter().enumerate() {
        let mut acc = z.data.clone();
        let sa = self_attention(z, w)?;
        acc.axpy(1.0, &sa.data)?;
        if w.lambda_ref != 0.0 {
            if let Some(rf) = ref_feats {
                let ra = reference_attention(z, rf, w)?;
                acc.axpy(w.lambda_ref, &ra.data)?;
            }
        }
        if let Some(mva) = &mva_out {
            acc.axpy(w.lambda_mv, &mva[i].data)?;
        }
        result.push(LatentGrid::new(z.view_id, z.height, z.width, z.channels, acc)?);
    }
    Ok(result)
}
