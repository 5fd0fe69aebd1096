//! The multi-view denoising network.
//!
//! A two-level UNet: 3×3 convolutions in and out, one decoupled attention
//! block per level, stride-2 downsampling between levels and a nearest
//! upsample with an additive skip back up. Geometry conditioning enters by
//! channel-concatenating `[ccm, normal, mask]` (7 channels) to the noisy
//! latent at the input layer; a dropped condition concatenates zeros.
//! Timesteps enter as per-channel biases from a fixed sinusoidal table
//! through one learned linear map per level.
//!
//! Every forward pass can record its intermediates so the hand-derived
//! backward pass can run without recomputation.

use crate::attention::{
    attention_backward, attention_forward, AttentionBlockWeights, AttentionPass, BranchGrads,
    BranchWeights, LatentGrid, TokenPhases,
};
use crate::error::{Error, Result};
use crate::geometry::ConditionMaps;
use crate::numerics::{Grid, RngState};
use crate::rope3d::RopeConfig;
use crate::voxelmap::{build_pyramid, pixel_to_voxel, PhaseGrid, VoxelPyramid};

/// Channels concatenated for geometry conditioning: ccm 3 + normal 3 + mask 1.
pub const COND_CHANNELS: usize = 7;
/// Latent (image) channels.
pub const IMAGE_CHANNELS: usize = 3;

// ── Primitive layers ────────────────────────────────────────────────────────

/// 3×3 convolution with padding 1. Weights are stored tap-major:
/// row `(tap · in_ch + ci)` holds the output-channel vector for input
/// channel `ci` under kernel tap `tap`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub weight: Grid,
    pub bias: Grid,
}

impl Conv2d {
    fn init(in_ch: usize, out_ch: usize, stride: usize, rng: &mut RngState) -> Self {
        let std = (2.0 / (9 * in_ch) as f32).sqrt();
        Conv2d {
            in_ch,
            out_ch,
            stride,
            weight: rng.gaussian(vec![9 * in_ch, out_ch]).scale(std),
            bias: Grid::zeros(vec![out_ch]),
        }
    }

    fn zeros(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Conv2d {
            in_ch,
            out_ch,
            stride,
            weight: Grid::zeros(vec![9 * in_ch, out_ch]),
            bias: Grid::zeros(vec![out_ch]),
        }
    }

    pub fn forward(&self, input: &Grid, h: usize, w: usize) -> Grid {
        debug_assert_eq!(input.shape(), [h * w, self.in_ch]);
        let (oh, ow) = (h / self.stride, w / self.stride);
        let mut out = vec![0.0f32; oh * ow * self.out_ch];
        let src = input.data();
        let wts = self.weight.data();
        let bias = self.bias.data();
        for oi in 0..oh {
            for oj in 0..ow {
                let o = (oi * ow + oj) * self.out_ch;
                out[o..o + self.out_ch].copy_from_slice(bias);
                for ky in 0..3usize {
                    let ii = (oi * self.stride + ky) as isize - 1;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ij = (oj * self.stride + kx) as isize - 1;
                        if ij < 0 || ij as usize >= w {
                            continue;
                        }
                        let px = (ii as usize * w + ij as usize) * self.in_ch;
                        let wbase = (ky * 3 + kx) * self.in_ch;
                        for ci in 0..self.in_ch {
                            let x = src[px + ci];
                            if x == 0.0 {
                                continue;
                            }
                            let wrow = &wts[(wbase + ci) * self.out_ch..][..self.out_ch];
                            let orow = &mut out[o..o + self.out_ch];
                            for (acc, &ww) in orow.iter_mut().zip(wrow) {
                                *acc += x * ww;
                            }
                        }
                    }
                }
            }
        }
        Grid::new(vec![oh * ow, self.out_ch], out).expect("conv output sizes agree")
    }

    /// Backward pass; `d_input` computation can be skipped for the first
    /// layer of the network.
    pub fn backward(
        &self,
        input: &Grid,
        h: usize,
        w: usize,
        d_out: &Grid,
        want_d_input: bool,
    ) -> (Option<Grid>, ConvGrads) {
        let (oh, ow) = (h / self.stride, w / self.stride);
        debug_assert_eq!(d_out.shape(), [oh * ow, self.out_ch]);
        let mut d_in = vec![0.0f32; h * w * self.in_ch];
        let mut d_w = vec![0.0f32; 9 * self.in_ch * self.out_ch];
        let mut d_b = vec![0.0f32; self.out_ch];
        let src = input.data();
        let wts = self.weight.data();
        let do_ = d_out.data();
        for oi in 0..oh {
            for oj in 0..ow {
                let o = (oi * ow + oj) * self.out_ch;
                let dorow = &do_[o..o + self.out_ch];
                for (b, &d) in d_b.iter_mut().zip(dorow) {
                    *b += d;
                }
                for ky in 0..3usize {
                    let ii = (oi * self.stride + ky) as isize - 1;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ij = (oj * self.stride + kx) as isize - 1;
                        if ij < 0 || ij as usize >= w {
                            continue;
                        }
                        let px = (ii as usize * w + ij as usize) * self.in_ch;
                        let wbase = (ky * 3 + kx) * self.in_ch;
                        for ci in 0..self.in_ch {
                            let x = src[px + ci];
                            let wrow = &wts[(wbase + ci) * self.out_ch..][..self.out_ch];
                            let dwrow = &mut d_w[(wbase + ci) * self.out_ch..][..self.out_ch];
                            let mut din_acc = 0.0f32;
                            for k in 0..self.out_ch {
                                let d = dorow[k];
                                dwrow[k] += x * d;
                                din_acc += wrow[k] * d;
                            }
                            if want_d_input {
                                d_in[px + ci] += din_acc;
                            }
                        }
                    }
                }
            }
        }
        let d_input = want_d_input
            .then(|| Grid::new(vec![h * w, self.in_ch], d_in).expect("sizes agree"));
        (
            d_input,
            ConvGrads {
                weight: Grid::new(vec![9 * self.in_ch, self.out_ch], d_w).expect("sizes agree"),
                bias: Grid::new(vec![self.out_ch], d_b).expect("sizes agree"),
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Grid,
    pub bias: Grid,
}

impl ConvGrads {
    fn zeros(conv: &Conv2d) -> Self {
        ConvGrads {
            weight: Grid::zeros(conv.weight.shape().to_vec()),
            bias: Grid::zeros(conv.bias.shape().to_vec()),
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(pre: &Grid) -> Grid {
    pre.map(|x| x * sigmoid(x))
}

fn silu_backward(pre: &Grid, d_out: &Grid) -> Grid {
    pre.zip_map(d_out, |x, d| {
        let s = sigmoid(x);
        d * s * (1.0 + x * (1.0 - s))
    })
    .expect("shapes agree")
}

fn upsample2(input: &Grid, h: usize, w: usize) -> Grid {
    let c = input.shape()[1];
    let mut out = vec![0.0f32; 4 * h * w * c];
    for i in 0..h {
        for j in 0..w {
            let src = &input.data()[(i * w + j) * c..(i * w + j) * c + c];
            for di in 0..2 {
                for dj in 0..2 {
                    let o = ((2 * i + di) * 2 * w + 2 * j + dj) * c;
                    out[o..o + c].copy_from_slice(src);
                }
            }
        }
    }
    Grid::new(vec![4 * h * w, c], out).expect("sizes agree")
}

fn upsample2_backward(d_out: &Grid, h: usize, w: usize) -> Grid {
    let c = d_out.shape()[1];
    let mut d_in = vec![0.0f32; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let dst = (i * w + j) * c;
            for di in 0..2 {
                for dj in 0..2 {
                    let o = ((2 * i + di) * 2 * w + 2 * j + dj) * c;
                    for k in 0..c {
                        d_in[dst + k] += d_out.data()[o + k];
                    }
                }
            }
        }
    }
    Grid::new(vec![h * w, c], d_in).expect("sizes agree")
}

/// Sinusoidal timestep table: row t holds interleaved sin/cos of
/// `t · base^(−2i/dim)`.
fn sinusoidal_table(steps: usize, dim: usize) -> Grid {
    let mut data = vec![0.0f32; steps * dim];
    for t in 0..steps {
        for i in 0..dim / 2 {
            let freq = 10_000f32.powf(-2.0 * i as f32 / dim as f32);
            let angle = t as f32 * freq;
            data[t * dim + 2 * i] = angle.sin();
            data[t * dim + 2 * i + 1] = angle.cos();
        }
    }
    Grid::new(vec![steps, dim], data).expect("sizes agree")
}

// ── Model configuration and state ───────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    /// Input (and output) latent resolution; must be even.
    pub input_resolution: usize,
    /// Channels at the full-resolution level; the downsampled level doubles
    /// this. Must be a multiple of 6·head_count.
    pub base_channels: usize,
    pub head_count: usize,
    /// Timestep count of the schedule this model is trained against.
    pub schedule_steps: usize,
    /// Zero-initialize the output convolution so an untrained net predicts
    /// zero noise. Disabled for gradient-checking tests.
    pub zero_init_output: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            input_resolution: 32,
            base_channels: 48,
            head_count: 2,
            schedule_steps: 100,
            zero_init_output: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_resolution < 4 || self.input_resolution % 2 != 0 {
            return Err(Error::invalid(format!(
                "input resolution must be even and >= 4, got {}",
                self.input_resolution
            )));
        }
        if self.head_count == 0 || self.base_channels % (6 * self.head_count) != 0 {
            return Err(Error::invalid(format!(
                "base channels {} must be a multiple of 6·head_count ({})",
                self.base_channels, self.head_count
            )));
        }
        if self.schedule_steps == 0 {
            return Err(Error::invalid("schedule steps must be positive"));
        }
        Ok(())
    }

    pub fn level_resolutions(&self) -> [usize; 2] {
        [self.input_resolution, self.input_resolution / 2]
    }

    pub fn level_channels(&self) -> [usize; 2] {
        [self.base_channels, self.base_channels * 2]
    }

    pub fn pyramid(&self) -> VoxelPyramid {
        build_pyramid(&self.level_resolutions()).expect("level resolutions strictly decrease")
    }
}

/// Frozen copy of the layers the reference pass runs through. Snapshot at
/// the warmup/main phase boundary so reference features stop moving once
/// the reference branch starts training against them.
#[derive(Debug, Clone)]
pub struct RefNet {
    pub(super) conv_in: Conv2d,
    pub(super) time_lin0: Grid,
    pub(super) time_lin1: Grid,
    pub(super) block0_sa: BranchWeights,
    pub(super) conv_down: Conv2d,
    pub(super) head_count: usize,
}

/// All weights of the denoiser plus the frozen reference network.
#[derive(Debug, Clone)]
pub struct DenoiserState {
    pub config: DenoiserConfig,
    pub conv_in: Conv2d,
    pub time_table: Grid,
    pub time_lin0: Grid,
    pub time_lin1: Grid,
    pub block0: AttentionBlockWeights,
    pub conv_down: Conv2d,
    pub block1: AttentionBlockWeights,
    pub conv_up: Conv2d,
    pub conv_out: Conv2d,
    pub ref_net: Option<RefNet>,
}

impl DenoiserState {
    pub fn init(config: DenoiserConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let [c0, c1] = config.level_channels();
        let e = c0;
        Ok(DenoiserState {
            conv_in: Conv2d::init(IMAGE_CHANNELS + COND_CHANNELS, c0, 1, rng),
            time_table: sinusoidal_table(config.schedule_steps, e),
            time_lin0: rng.gaussian(vec![e, c0]).scale(1.0 / (e as f32).sqrt()),
            time_lin1: rng.gaussian(vec![e, c1]).scale(1.0 / (e as f32).sqrt()),
            block0: AttentionBlockWeights::random(c0, config.head_count, rng)?,
            conv_down: Conv2d::init(c0, c1, 2, rng),
            block1: AttentionBlockWeights::random(c1, config.head_count, rng)?,
            conv_up: Conv2d::init(c1, c0, 1, rng),
            conv_out: if config.zero_init_output {
                Conv2d::zeros(c0, IMAGE_CHANNELS, 1)
            } else {
                let mut c = Conv2d::init(c0, IMAGE_CHANNELS, 1, rng);
                c.weight = c.weight.scale(0.1);
                c
            },
            config,
            ref_net: None,
        })
    }

    pub fn rope_configs(&self) -> Result<[RopeConfig; 2]> {
        Ok([self.block0.rope_config()?, self.block1.rope_config()?])
    }

    /// End of the single-view warmup phase: freeze both self-attention
    /// branches and snapshot the reference network.
    pub fn freeze_sa(&mut self) {
        self.block0.sa_frozen = true;
        self.block1.sa_frozen = true;
        self.ref_net = Some(RefNet {
            conv_in: self.conv_in.clone(),
            time_lin0: self.time_lin0.clone(),
            time_lin1: self.time_lin1.clone(),
            block0_sa: self.block0.sa.clone(),
            conv_down: self.conv_down.clone(),
            head_count: self.config.head_count,
        });
    }

    pub fn sa_frozen(&self) -> bool {
        self.block0.sa_frozen && self.block1.sa_frozen
    }

    /// Fixed enumeration of all learnable tensors; the order defines the
    /// optimizer-state layout and the checkpoint schema.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "conv_in.weight".to_string(),
            "conv_in.bias".to_string(),
            "time.lin0".to_string(),
            "time.lin1".to_string(),
        ];
        for blk in ["block0", "block1"] {
            for branch in ["sa", "refa", "mva"] {
                for m in ["wq", "wk", "wv", "wo"] {
                    names.push(format!("{blk}.{branch}.{m}"));
                }
            }
        }
        names.extend(
            [
                "conv_down.weight",
                "conv_down.bias",
                "conv_up.weight",
                "conv_up.bias",
                "conv_out.weight",
                "conv_out.bias",
            ]
            .map(String::from),
        );
        names
    }

    pub fn param(&self, name: &str) -> Option<&Grid> {
        Some(match name {
            "conv_in.weight" => &self.conv_in.weight,
            "conv_in.bias" => &self.conv_in.bias,
            "time.lin0" => &self.time_lin0,
            "time.lin1" => &self.time_lin1,
            "conv_down.weight" => &self.conv_down.weight,
            "conv_down.bias" => &self.conv_down.bias,
            "conv_up.weight" => &self.conv_up.weight,
            "conv_up.bias" => &self.conv_up.bias,
            "conv_out.weight" => &self.conv_out.weight,
            "conv_out.bias" => &self.conv_out.bias,
            _ => return branch_field(name, &self.block0, &self.block1),
        })
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Grid> {
        Some(match name {
            "conv_in.weight" => &mut self.conv_in.weight,
            "conv_in.bias" => &mut self.conv_in.bias,
            "time.lin0" => &mut self.time_lin0,
            "time.lin1" => &mut self.time_lin1,
            "conv_down.weight" => &mut self.conv_down.weight,
            "conv_down.bias" => &mut self.conv_down.bias,
            "conv_up.weight" => &mut self.conv_up.weight,
            "conv_up.bias" => &mut self.conv_up.bias,
            "conv_out.weight" => &mut self.conv_out.weight,
            "conv_out.bias" => &mut self.conv_out.bias,
            _ => return branch_field_mut(name, &mut self.block0, &mut self.block1),
        })
    }

    /// True if the named parameter belongs to a frozen self-attention branch.
    pub fn param_frozen(&self, name: &str) -> bool {
        (name.starts_with("block0.sa.") && self.block0.sa_frozen)
            || (name.starts_with("block1.sa.") && self.block1.sa_frozen)
    }
}

fn branch_field<'a>(
    name: &str,
    block0: &'a AttentionBlockWeights,
    block1: &'a AttentionBlockWeights,
) -> Option<&'a Grid> {
    let mut it = name.split('.');
    let blk = match it.next()? {
        "block0" => block0,
        "block1" => block1,
        _ => return None,
    };
    let branch = match it.next()? {
        "sa" => &blk.sa,
        "refa" => &blk.refa,
        "mva" => &blk.mva,
        _ => return None,
    };
    Some(match it.next()? {
        "wq" => &branch.wq,
        "wk" => &branch.wk,
        "wv" => &branch.wv,
        "wo" => &branch.wo,
        _ => return None,
    })
}

fn branch_field_mut<'a>(
    name: &str,
    block0: &'a mut AttentionBlockWeights,
    block1: &'a mut AttentionBlockWeights,
) -> Option<&'a mut Grid> {
    let mut it = name.split('.');
    let blk = match it.next()? {
        "block0" => block0,
        "block1" => block1,
        _ => return None,
    };
    let branch = match it.next()? {
        "sa" => &mut blk.sa,
        "refa" => &mut blk.refa,
        "mva" => &mut blk.mva,
        _ => return None,
    };
    Some(match it.next()? {
        "wq" => &mut branch.wq,
        "wk" => &mut branch.wk,
        "wv" => &mut branch.wv,
        "wo" => &mut branch.wo,
        _ => return None,
    })
}

// ── Phases and reference features ───────────────────────────────────────────

/// Voxel phases for every pyramid level and view.
#[derive(Debug, Clone)]
pub struct PyramidPhases {
    pub per_level: Vec<Vec<PhaseGrid>>,
}

impl PyramidPhases {
    /// Downsample full-resolution condition maps to each level and quantize.
    pub fn build(cond: &[ConditionMaps], config: &DenoiserConfig) -> Result<Self> {
        let pyramid = config.pyramid();
        let mut per_level = Vec::with_capacity(pyramid.levels());
        for level in 0..pyramid.levels() {
            let res = pyramid.resolution(level) as usize;
            let mut grids = Vec::with_capacity(cond.len());
            for maps in cond {
                let down = crate::geometry::downsample_conditions(maps, res)?;
                grids.push(pixel_to_voxel(&down, &pyramid, level)?);
            }
            per_level.push(grids);
        }
        Ok(PyramidPhases { per_level })
    }

    /// Identity phases: no pixel is rotated. Inference-time ablation of the
    /// 3D-aware embedding.
    pub fn all_invalid(views: usize, config: &DenoiserConfig) -> Self {
        let per_level = config
            .level_resolutions()
            .iter()
            .enumerate()
            .map(|(level, &res)| {
                (0..views)
                    .map(|_| PhaseGrid::all_invalid(level, res))
                    .collect()
            })
            .collect();
        PyramidPhases { per_level }
    }

    pub fn views(&self) -> usize {
        self.per_level.first().map_or(0, |l| l.len())
    }
}

/// Reference-image features at each level, keys/values for the reference
/// attention branches.
#[derive(Debug, Clone)]
pub struct RefFeatures {
    pub level0: Grid,
    pub level1: Grid,
}

/// Run the (frozen) reference pass over a clean reference image at t = 0.
/// Features are the hidden states entering each attention block.
pub fn ref_pass(state: &DenoiserState, ref_image: &Grid) -> Result<RefFeatures> {
    let s = state.config.input_resolution;
    if ref_image.shape() != [s * s, IMAGE_CHANNELS] {
        return Err(Error::shape(format!(
            "reference image shape {:?} does not match {s}²×3",
            ref_image.shape()
        )));
    }
    let (conv_in, lin0, lin1, sa, conv_down, heads) = match &state.ref_net {
        Some(r) => (
            &r.conv_in,
            &r.time_lin0,
            &r.time_lin1,
            &r.block0_sa,
            &r.conv_down,
            r.head_count,
        ),
        // Before the freeze point the live weights serve as the reference
        // network; nothing trains against them yet.
        None => (
            &state.conv_in,
            &state.time_lin0,
            &state.time_lin1,
            &state.block0.sa,
            &state.conv_down,
            state.config.head_count,
        ),
    };
    let x = concat_channels(ref_image, None, s);
    let emb = time_row(&state.time_table, 0);
    let mut h0 = conv_in.forward(&x, s, s);
    add_channel_bias(&mut h0, &emb.matmul(lin0)?);
    let f0 = silu(&h0);
    let (sa_out, _) = attention_forward(&f0, &f0, sa, heads, None)?;
    let b0 = f0.add(&sa_out)?;
    let mut d = conv_down.forward(&b0, s, s);
    add_channel_bias(&mut d, &emb.matmul(lin1)?);
    let f1 = silu(&d);
    Ok(RefFeatures {
        level0: f0,
        level1: f1,
    })
}

fn time_row(table: &Grid, t: usize) -> Grid {
    let e = table.shape()[1];
    Grid::new(vec![1, e], table.data()[t * e..(t + 1) * e].to_vec()).expect("sizes agree")
}

fn add_channel_bias(h: &mut Grid, bias_row: &Grid) {
    let c = h.shape()[1];
    debug_assert_eq!(bias_row.shape(), [1, c]);
    let b = bias_row.data().to_vec();
    for row in h.data_mut().chunks_mut(c) {
        for (v, &bb) in row.iter_mut().zip(&b) {
            *v += bb;
        }
    }
}

/// Concatenate `[latent, ccm, normal, mask]` channels; missing conditioning
/// becomes zeros.
fn concat_channels(latent: &Grid, cond: Option<&ConditionMaps>, s: usize) -> Grid {
    let n = s * s;
    let total = IMAGE_CHANNELS + COND_CHANNELS;
    let mut out = vec![0.0f32; n * total];
    let z = latent.data();
    for p in 0..n {
        out[p * total..p * total + IMAGE_CHANNELS]
            .copy_from_slice(&z[p * IMAGE_CHANNELS..(p + 1) * IMAGE_CHANNELS]);
    }
    if let Some(maps) = cond {
        let ccm = maps.ccm.data();
        let normal = maps.normal.data();
        let mask = maps.mask.data();
        for p in 0..n {
            let base = p * total + IMAGE_CHANNELS;
            out[base..base + 3].copy_from_slice(&ccm[p * 3..p * 3 + 3]);
            out[base + 3..base + 6].copy_from_slice(&normal[p * 3..p * 3 + 3]);
            out[base + 6] = mask[p];
        }
    }
    Grid::new(vec![n, total], out).expect("sizes agree")
}

// ── Forward with cache ──────────────────────────────────────────────────────

pub(crate) struct BlockCache {
    sa: Vec<AttentionPass>,
    refa: Vec<AttentionPass>,
    mva: Option<AttentionPass>,
    lambda_ref: f32,
    lambda_mv: f32,
    tokens_per_view: usize,
}

fn block_forward(
    views: &[Grid],
    phases: &[PhaseGrid],
    ref_feats: Option<&Grid>,
    w: &AttentionBlockWeights,
    cfg: &RopeConfig,
    lambda_mv: f32,
) -> Result<(Vec<Grid>, BlockCache)> {
    let tokens_per_view = views[0].shape()[0];
    let c = views[0].shape()[1];
    let mut outs: Vec<Grid> = views.to_vec();
    let mut sa_passes = Vec::with_capacity(views.len());
    let mut refa_passes = Vec::new();
    for (i, z) in views.iter().enumerate() {
        let (sa_out, pass) = attention_forward(z, z, &w.sa, w.head_count, None)?;
        outs[i].axpy(1.0, &sa_out)?;
        sa_passes.push(pass);
        if w.lambda_ref != 0.0 {
            if let Some(rf) = ref_feats {
                let (ra_out, pass) = attention_forward(z, rf, &w.refa, w.head_count, None)?;
                outs[i].axpy(w.lambda_ref, &ra_out)?;
                refa_passes.push(pass);
            }
        }
    }
    let mva = if lambda_mv != 0.0 {
        let mut joint = Vec::with_capacity(views.len() * tokens_per_view * c);
        for v in views {
            joint.extend_from_slice(v.data());
        }
        let joint = Grid::new(vec![views.len() * tokens_per_view, c], joint)?;
        let token_phases = TokenPhases::from_grids(&phases.iter().collect::<Vec<_>>());
        let (out, pass) =
            attention_forward(&joint, &joint, &w.mva, w.head_count, Some((&token_phases, cfg)))?;
        for (i, o) in outs.iter_mut().enumerate() {
            let slice = Grid::new(
                vec![tokens_per_view, c],
                out.data()[i * tokens_per_view * c..(i + 1) * tokens_per_view * c].to_vec(),
            )?;
            o.axpy(lambda_mv, &slice)?;
        }
        Some(pass)
    } else {
        None
    };
    Ok((
        outs,
        BlockCache {
            sa: sa_passes,
            refa: refa_passes,
            mva,
            lambda_ref: w.lambda_ref,
            lambda_mv,
            tokens_per_view,
        },
    ))
}

pub struct BlockGrads {
    pub sa: Option<BranchGrads>,
    pub refa: BranchGrads,
    pub mva: BranchGrads,
}

fn block_backward(
    cache: &BlockCache,
    w: &AttentionBlockWeights,
    d_outs: &[Grid],
) -> Result<(Vec<Grid>, BlockGrads)> {
    let c = d_outs[0].shape()[1];
    let n = cache.tokens_per_view;
    // Residual path.
    let mut d_views: Vec<Grid> = d_outs.to_vec();
    let mut sa_grads = (!w.sa_frozen).then(|| BranchGrads::zeros(c));
    let mut refa_grads = BranchGrads::zeros(c);
    let mut mva_grads = BranchGrads::zeros(c);

    for (i, d_out) in d_outs.iter().enumerate() {
        let (dq, dkv, grads) = attention_backward(&cache.sa[i], &w.sa, d_out)?;
        d_views[i].axpy(1.0, &dq)?;
        d_views[i].axpy(1.0, &dkv)?;
        if let Some(acc) = sa_grads.as_mut() {
            acc.accumulate(&grads)?;
        }
        if let Some(pass) = cache.refa.get(i) {
            let scaled = d_out.scale(cache.lambda_ref);
            let (dq, _dref, grads) = attention_backward(pass, &w.refa, &scaled)?;
            // Reference features come from a frozen pass; their gradient is
            // intentionally dropped.
            d_views[i].axpy(1.0, &dq)?;
            refa_grads.accumulate(&grads)?;
        }
    }

    if let Some(pass) = &cache.mva {
        let mut joint = Vec::with_capacity(d_outs.len() * n * c);
        for d in d_outs {
            joint.extend_from_slice(d.data());
        }
        let joint = Grid::new(vec![d_outs.len() * n, c], joint)?.scale(cache.lambda_mv);
        let (dq, dkv, grads) = attention_backward(pass, &w.mva, &joint)?;
        mva_grads.accumulate(&grads)?;
        let d_tokens = dq.add(&dkv)?;
        for (i, dv) in d_views.iter_mut().enumerate() {
            let slice = Grid::new(
                vec![n, c],
                d_tokens.data()[i * n * c..(i + 1) * n * c].to_vec(),
            )?;
            dv.axpy(1.0, &slice)?;
        }
    }

    Ok((
        d_views,
        BlockGrads {
            sa: sa_grads,
            refa: refa_grads,
            mva: mva_grads,
        },
    ))
}

/// Every intermediate needed to run the backward pass.
pub struct ForwardCache {
    t: usize,
    x_in: Vec<Grid>,
    h0_pre: Vec<Grid>,
    b0: Vec<Grid>,
    blk0: BlockCache,
    d_pre: Vec<Grid>,
    blk1: BlockCache,
    up_in: Vec<Grid>,
    up_pre: Vec<Grid>,
    merged: Vec<Grid>,
}

pub(crate) fn forward_cached(
    state: &DenoiserState,
    z_t: &[Grid],
    t: usize,
    cond: Option<&[ConditionMaps]>,
    ref_feats: Option<&RefFeatures>,
    phases: &PyramidPhases,
    lambda_mv_override: Option<f32>,
) -> Result<(Vec<Grid>, ForwardCache)> {
    let s = state.config.input_resolution;
    let views = z_t.len();
    if views == 0 {
        return Err(Error::invalid("no views"));
    }
    if t >= state.config.schedule_steps {
        return Err(Error::invalid(format!(
            "timestep {t} out of range for {}-step model",
            state.config.schedule_steps
        )));
    }
    for z in z_t {
        if z.shape() != [s * s, IMAGE_CHANNELS] {
            return Err(Error::shape(format!(
                "latent shape {:?} does not match {s}²×{IMAGE_CHANNELS}",
                z.shape()
            )));
        }
    }
    if let Some(c) = cond {
        if c.len() != views {
            return Err(Error::shape("condition count != view count"));
        }
        for m in c {
            if m.resolution != s {
                return Err(Error::shape(format!(
                    "condition resolution {} != input resolution {s}",
                    m.resolution
                )));
            }
        }
    }
    if phases.per_level.len() != 2 || phases.views() != views {
        return Err(Error::shape(
            "phase pyramid does not match view count / level count",
        ));
    }
    let [rope0, rope1] = state.rope_configs()?;
    let lambda_mv = lambda_mv_override.unwrap_or(state.block0.lambda_mv);
    let emb = time_row(&state.time_table, t);
    let bias0 = emb.matmul(&state.time_lin0)?;
    let bias1 = emb.matmul(&state.time_lin1)?;

    let mut x_in = Vec::with_capacity(views);
    let mut h0_pre = Vec::with_capacity(views);
    let mut h0 = Vec::with_capacity(views);
    for (i, z) in z_t.iter().enumerate() {
        let x = concat_channels(z, cond.map(|c| &c[i]), s);
        let mut h = state.conv_in.forward(&x, s, s);
        add_channel_bias(&mut h, &bias0);
        h0.push(silu(&h));
        h0_pre.push(h);
        x_in.push(x);
    }

    let (b0, blk0) = block_forward(
        &h0,
        &phases.per_level[0],
        ref_feats.map(|r| &r.level0),
        &state.block0,
        &rope0,
        lambda_mv,
    )?;

    let s2 = s / 2;
    let mut d_pre = Vec::with_capacity(views);
    let mut d_act = Vec::with_capacity(views);
    for b in &b0 {
        let mut d = state.conv_down.forward(b, s, s);
        add_channel_bias(&mut d, &bias1);
        d_act.push(silu(&d));
        d_pre.push(d);
    }

    let (b1, blk1) = block_forward(
        &d_act,
        &phases.per_level[1],
        ref_feats.map(|r| &r.level1),
        &state.block1,
        &rope1,
        lambda_mv,
    )?;

    let mut up_in = Vec::with_capacity(views);
    let mut up_pre = Vec::with_capacity(views);
    let mut merged = Vec::with_capacity(views);
    let mut out = Vec::with_capacity(views);
    for (i, b) in b1.iter().enumerate() {
        let u = upsample2(b, s2, s2);
        let pre = state.conv_up.forward(&u, s, s);
        let act = silu(&pre);
        let m = b0[i].add(&act)?;
        out.push(state.conv_out.forward(&m, s, s));
        up_in.push(u);
        up_pre.push(pre);
        merged.push(m);
    }

    let cache = ForwardCache {
        t,
        x_in,
        h0_pre,
        b0,
        blk0,
        d_pre,
        blk1,
        up_in,
        up_pre,
        merged,
    };
    Ok((out, cache))
}

/// Gradients for every learnable tensor, aligned with
/// [`DenoiserState::param_names`].
pub struct DenoiserGrads {
    pub conv_in: ConvGrads,
    pub time_lin0: Grid,
    pub time_lin1: Grid,
    pub block0: BlockGrads,
    pub conv_down: ConvGrads,
    pub block1: BlockGrads,
    pub conv_up: ConvGrads,
    pub conv_out: ConvGrads,
}

impl DenoiserGrads {
    pub fn zeros(state: &DenoiserState) -> Self {
        let [c0, c1] = state.config.level_channels();
        let zero_block = |c: usize, frozen: bool| BlockGrads {
            sa: (!frozen).then(|| BranchGrads::zeros(c)),
            refa: BranchGrads::zeros(c),
            mva: BranchGrads::zeros(c),
        };
        DenoiserGrads {
            conv_in: ConvGrads::zeros(&state.conv_in),
            time_lin0: Grid::zeros(state.time_lin0.shape().to_vec()),
            time_lin1: Grid::zeros(state.time_lin1.shape().to_vec()),
            block0: zero_block(c0, state.block0.sa_frozen),
            conv_down: ConvGrads::zeros(&state.conv_down),
            block1: zero_block(c1, state.block1.sa_frozen),
            conv_up: ConvGrads::zeros(&state.conv_up),
            conv_out: ConvGrads::zeros(&state.conv_out),
        }
    }

    pub fn accumulate(&mut self, other: &DenoiserGrads) -> Result<()> {
        let acc_conv = |a: &mut ConvGrads, b: &ConvGrads| -> Result<()> {
            a.weight.axpy(1.0, &b.weight)?;
            a.bias.axpy(1.0, &b.bias)
        };
        let acc_block = |a: &mut BlockGrads, b: &BlockGrads| -> Result<()> {
            if let (Some(x), Some(y)) = (a.sa.as_mut(), b.sa.as_ref()) {
                x.accumulate(y)?;
            }
            a.refa.accumulate(&b.refa)?;
            a.mva.accumulate(&b.mva)
        };
        acc_conv(&mut self.conv_in, &other.conv_in)?;
        self.time_lin0.axpy(1.0, &other.time_lin0)?;
        self.time_lin1.axpy(1.0, &other.time_lin1)?;
        acc_block(&mut self.block0, &other.block0)?;
        acc_conv(&mut self.conv_down, &other.conv_down)?;
        acc_block(&mut self.block1, &other.block1)?;
        acc_conv(&mut self.conv_up, &other.conv_up)?;
        acc_conv(&mut self.conv_out, &other.conv_out)
    }

    pub fn scale_in_place(&mut self, s: f32) {
        let scale = |g: &mut Grid| *g = g.scale(s);
        scale(&mut self.conv_in.weight);
        scale(&mut self.conv_in.bias);
        scale(&mut self.time_lin0);
        scale(&mut self.time_lin1);
        for blk in [&mut self.block0, &mut self.block1] {
            if let Some(sa) = blk.sa.as_mut() {
                for g in [&mut sa.wq, &mut sa.wk, &mut sa.wv, &mut sa.wo] {
                    *g = g.scale(s);
                }
            }
            for branch in [&mut blk.refa, &mut blk.mva] {
                for g in [&mut branch.wq, &mut branch.wk, &mut branch.wv, &mut branch.wo] {
                    *g = g.scale(s);
                }
            }
        }
        scale(&mut self.conv_down.weight);
        scale(&mut self.conv_down.bias);
        scale(&mut self.conv_up.weight);
        scale(&mut self.conv_up.bias);
        scale(&mut self.conv_out.weight);
        scale(&mut self.conv_out.bias);
    }

    pub fn grad(&self, name: &str) -> Option<&Grid> {
        fn conv<'a>(c: &'a ConvGrads, field: &str) -> Option<&'a Grid> {
            match field {
                "weight" => Some(&c.weight),
                "bias" => Some(&c.bias),
                _ => None,
            }
        }
        let mut it = name.splitn(2, '.');
        let head = it.next()?;
        let rest = it.next()?;
        match head {
            "conv_in" => return conv(&self.conv_in, rest),
            "conv_down" => return conv(&self.conv_down, rest),
            "conv_up" => return conv(&self.conv_up, rest),
            "conv_out" => return conv(&self.conv_out, rest),
            "time" => {
                return match rest {
                    "lin0" => Some(&self.time_lin0),
                    "lin1" => Some(&self.time_lin1),
                    _ => None,
                }
            }
            _ => {}
        }
        let blk = match head {
            "block0" => &self.block0,
            "block1" => &self.block1,
            _ => return None,
        };
        let mut it = rest.splitn(2, '.');
        let branch = match it.next()? {
            "sa" => blk.sa.as_ref()?,
            "refa" => &blk.refa,
            "mva" => &blk.mva,
            _ => return None,
        };
        match it.next()? {
            "wq" => Some(&branch.wq),
            "wk" => Some(&branch.wk),
            "wv" => Some(&branch.wv),
            "wo" => Some(&branch.wo),
            _ => None,
        }
    }
}

/// Backward pass through the whole network. `d_out` is the loss gradient
/// w.r.t. each view's predicted noise.
pub(crate) fn backward(
    state: &DenoiserState,
    cache: &ForwardCache,
    d_out: &[Grid],
) -> Result<DenoiserGrads> {
    let s = state.config.input_resolution;
    let s2 = s / 2;
    let views = d_out.len();
    let mut grads = DenoiserGrads::zeros(state);
    let emb = time_row(&state.time_table, cache.t);

    // Walk the decoder backward per view, collecting block input gradients.
    let mut d_b0: Vec<Grid> = Vec::with_capacity(views);
    let mut d_b1: Vec<Grid> = Vec::with_capacity(views);
    for i in 0..views {
        let (d_merged, g_out) =
            state
                .conv_out
                .backward(&cache.merged[i], s, s, &d_out[i], true);
        let d_merged = d_merged.unwrap();
        grads.conv_out.weight.axpy(1.0, &g_out.weight)?;
        grads.conv_out.bias.axpy(1.0, &g_out.bias)?;

        let d_up_pre = silu_backward(&cache.up_pre[i], &d_merged);
        let (d_up_in, g_up) = state
            .conv_up
            .backward(&cache.up_in[i], s, s, &d_up_pre, true);
        grads.conv_up.weight.axpy(1.0, &g_up.weight)?;
        grads.conv_up.bias.axpy(1.0, &g_up.bias)?;
        d_b1.push(upsample2_backward(&d_up_in.unwrap(), s2, s2));
        d_b0.push(d_merged); // skip connection
    }

    // Level-1 block.
    let (d_d_act, blk1_grads) = block_backward(&cache.blk1, &state.block1, &d_b1)?;
    accumulate_block(&mut grads.block1, &blk1_grads)?;

    for i in 0..views {
        let d_d_pre = silu_backward(&cache.d_pre[i], &d_d_act[i]);
        // Time bias 1: per-channel sum over pixels.
        let bias_grad = column_sums(&d_d_pre);
        grads.time_lin1.axpy(1.0, &emb.matmul_tn(&bias_grad)?)?;
        let (d_b0_part, g_down) = state
            .conv_down
            .backward(&cache.b0[i], s, s, &d_d_pre, true);
        grads.conv_down.weight.axpy(1.0, &g_down.weight)?;
        grads.conv_down.bias.axpy(1.0, &g_down.bias)?;
        d_b0[i].axpy(1.0, &d_b0_part.unwrap())?;
    }

    // Level-0 block.
    let (d_h0, blk0_grads) = block_backward(&cache.blk0, &state.block0, &d_b0)?;
    accumulate_block(&mut grads.block0, &blk0_grads)?;

    for i in 0..views {
        let d_h0_pre = silu_backward(&cache.h0_pre[i], &d_h0[i]);
        let bias_grad = column_sums(&d_h0_pre);
        grads.time_lin0.axpy(1.0, &emb.matmul_tn(&bias_grad)?)?;
        let (_, g_in) = state
            .conv_in
            .backward(&cache.x_in[i], s, s, &d_h0_pre, false);
        grads.conv_in.weight.axpy(1.0, &g_in.weight)?;
        grads.conv_in.bias.axpy(1.0, &g_in.bias)?;
    }

    Ok(grads)
}

fn accumulate_block(dst: &mut BlockGrads, src: &BlockGrads) -> Result<()> {
    if let (Some(d), Some(s)) = (dst.sa.as_mut(), src.sa.as_ref()) {
        d.accumulate(s)?;
    }
    dst.refa.accumulate(&src.refa)?;
    dst.mva.accumulate(&src.mva)
}

/// Column sums as a 1×C row.
fn column_sums(m: &Grid) -> Grid {
    let c = m.shape()[1];
    let mut out = vec![0.0f64; c];
    for row in m.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v as f64;
        }
    }
    Grid::new(vec![1, c], out.into_iter().map(|v| v as f32).collect()).expect("sizes agree")
}

/// Predict per-view noise for latents `z_t` at timestep `t`. Null geometry
/// conditioning concatenates zero channels (the unconditional branch); a
/// null reference skips reference attention. Output shape equals input
/// shape.
pub fn predict_noise(
    state: &DenoiserState,
    z_t: &[LatentGrid],
    t: usize,
    cond: Option<&[ConditionMaps]>,
    ref_feats: Option<&RefFeatures>,
    phases: &PyramidPhases,
) -> Result<Vec<LatentGrid>> {
    let grids: Vec<Grid> = z_t.iter().map(|z| z.data.clone()).collect();
    for g in &grids {
        g.assert_finite("predict_noise input")?;
    }
    let (out, _) = forward_cached(state, &grids, t, cond, ref_feats, phases, None)?;
    out.into_iter()
        .zip(z_t)
        .map(|(g, z)| LatentGrid::new(z.view_id, z.height, z.width, IMAGE_CHANNELS, g))
        .collect()
}
