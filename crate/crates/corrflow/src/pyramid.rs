//! Coarse-to-fine orchestration.
//!
//! Attention always runs at the coarsest spatial size s. Finer levels
//! contribute by (1) downsampling their raw correlation into the
//! shared s^4 cost volume through strided separable 4D convolutions
//! and (2) average-pooling their features into the blocks, receiving
//! refinements back as bilinearly upsampled residual deltas. Refined
//! per-level feature correlations (at native resolution) are resized
//! to the finest 4D grid and combined into the fused output volume
//! that drives the final flow.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_block, AttentionKernel, AttnCtx, BlockParams, BlockVariant, LnParams,
};
use crate::backbone::{extract_pyramid, BackboneParams, FeatureLevel};
use crate::costvol::{
    build_cost_volume, resize_cost4d_sym, separable_conv4d_sym, CostVolume,
    SeparableConv4dParams, StagePost,
};
use crate::error::{Error, Result};
use crate::flowhead::{soft_argmax_flow, FlowNode, Image};
use crate::params::{normal_init, ones, zeros, ParamGroup, ParamId, ParamSet};
use crate::tensor::{Graph, NodeId, Scalar};

const LN_EPS: f64 = 1e-5;

/// How the per-level output volumes combine into the fused volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Sum divided by level count. The two modes differ only by a
    /// global positive scale, which soft-argmax absorbs into its
    /// temperature.
    Average,
    Sum,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "average" => Some(FusionMode::Average),
            "sum" => Some(FusionMode::Sum),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Average => "average",
            FusionMode::Sum => "sum",
        }
    }
}

/// Resizes every volume to the finest 4D dims present and combines
/// them. A single-element list comes back resized but unscaled in
/// either mode.
pub fn fuse_final_cost<T: Scalar>(
    g: &mut Graph<T>,
    volumes: &[CostVolume],
    mode: FusionMode,
) -> Result<CostVolume> {
    if volumes.is_empty() {
        return Err(Error::contract("fuse_final_cost: empty volume list"));
    }
    let target = volumes.iter().fold((1, 1, 1, 1), |acc, v| {
        (
            acc.0.max(v.h_src),
            acc.1.max(v.w_src),
            acc.2.max(v.h_tgt),
            acc.3.max(v.w_tgt),
        )
    });
    let mut acc: Option<CostVolume> = None;
    for v in volumes {
        let resized = resize_cost4d_sym(g, v, target)?;
        acc = Some(match acc {
            None => resized,
            Some(prev) => {
                let data = g.add(prev.data, resized.data)?;
                CostVolume { data, ..prev }
            }
        });
    }
    let mut fused = acc.expect("nonempty");
    if mode == FusionMode::Average && volumes.len() > 1 {
        let data = g.scale(fused.data, T::ONE / T::from_usize(volumes.len()))?;
        fused = CostVolume { data, ..fused };
    }
    Ok(fused)
}

/// Static architecture configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidConfig {
    /// pyramid depth L
    pub levels: usize,
    /// attention blocks per level, coarsest first
    pub block_depths: Vec<usize>,
    /// coarsest spatial size s; the cost volume is s x s x s x s
    pub coarse_size: usize,
    /// projected feature channels d
    pub feat_dim: usize,
    /// attention width d_model (= d_k)
    pub model_dim: usize,
    /// toy backbone channel width
    pub backbone_channels: usize,
    pub kernel: AttentionKernel,
    /// soft-argmax temperature
    pub tau: f64,
    pub fusion: FusionMode,
    pub variant: BlockVariant,
}

impl Default for PyramidConfig {
    /// Desk-scale default: 128 x 128 inputs, levels 8/16/32, cost
    /// fixed at 8^4.
    fn default() -> Self {
        PyramidConfig {
            levels: 3,
            block_depths: vec![1, 1, 1],
            coarse_size: 8,
            feat_dim: 64,
            model_dim: 64,
            backbone_channels: 16,
            kernel: AttentionKernel::Softmax,
            tau: 0.02,
            fusion: FusionMode::Average,
            variant: BlockVariant::Full,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::contract("config: levels must be >= 1"));
        }
        if self.block_depths.len() != self.levels {
            return Err(Error::contract(format!(
                "config: {} block depths for {} levels",
                self.block_depths.len(),
                self.levels
            )));
        }
        if self.coarse_size == 0 || self.feat_dim == 0 || self.backbone_channels == 0 {
            return Err(Error::contract("config: zero-sized dimension"));
        }
        if self.model_dim % 4 != 0 {
            return Err(Error::contract("config: model_dim must divide by 4"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::contract("config: tau must be positive"));
        }
        Ok(())
    }

    /// Square input image side implied by the coarsest size.
    pub fn image_size(&self) -> usize {
        self.coarse_size << (self.levels + 1)
    }

    /// Native spatial size of level l.
    pub fn level_size(&self, l: usize) -> usize {
        self.coarse_size << l
    }

    /// Finest level spatial size (= side of the fused volume grid).
    pub fn finest_size(&self) -> usize {
        self.level_size(self.levels - 1)
    }
}

/// All parameter handles of the network.
pub struct ModelIds {
    pub backbone: BackboneParams,
    /// stride-1 conv over the coarsest raw correlation
    pub initial_conv: SeparableConv4dParams,
    /// per level l >= 1: l stride-2 convs taking the raw correlation
    /// from native resolution down to s
    pub down_chains: Vec<Vec<SeparableConv4dParams>>,
    /// layer norm applied after pooling finer features to s x s
    pub pool_ln: Vec<Option<LnParams>>,
    /// d -> d linear adapters for the level transition, shared between
    /// the two image sides
    pub adapters: Vec<ParamId>,
    pub blocks: Vec<Vec<BlockParams>>,
}

/// Configuration plus parameters; the unit that trains, saves, and
/// loads.
pub struct Model<T: Scalar> {
    pub cfg: PyramidConfig,
    pub set: ParamSet<T>,
    pub ids: ModelIds,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: PyramidConfig, seed: u64) -> Result<Model<T>> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set: ParamSet<T> = ParamSet::new();
        let backbone = BackboneParams::build(
            &mut set,
            &mut rng,
            cfg.levels,
            cfg.backbone_channels,
            cfg.feat_dim,
        );
        let initial_conv = SeparableConv4dParams::build(
            &mut set,
            &mut rng,
            "pyramid.initial_conv",
            3,
            1,
            StagePost::RELU_NORM,
        );
        let mut down_chains = Vec::new();
        for l in 1..cfg.levels {
            let chain = (0..l)
                .map(|step| {
                    SeparableConv4dParams::build(
                        &mut set,
                        &mut rng,
                        &format!("pyramid.down{l}.step{step}"),
                        3,
                        2,
                        StagePost::RELU_NORM,
                    )
                })
                .collect();
            down_chains.push(chain);
        }
        let mut pool_ln = vec![None];
        for l in 1..cfg.levels {
            pool_ln.push(Some(build_ln(
                &mut set,
                &format!("pyramid.pool_ln{l}"),
                cfg.feat_dim,
            )));
        }
        let adapters = (0..cfg.levels.saturating_sub(1))
            .map(|l| {
                set.add(
                    format!("pyramid.adapter{l}.weight"),
                    vec![cfg.feat_dim, cfg.feat_dim],
                    normal_init(&mut rng, &[cfg.feat_dim, cfg.feat_dim], 0.02),
                    ParamGroup::Main,
                )
            })
            .collect();
        let mut blocks = Vec::new();
        for (l, &depth) in cfg.block_depths.iter().enumerate() {
            let level_blocks = (0..depth)
                .map(|b| {
                    BlockParams::build(
                        &mut set,
                        &mut rng,
                        &format!("pyramid.level{l}.block{b}"),
                        cfg.coarse_size,
                        cfg.feat_dim,
                        cfg.model_dim,
                        cfg.variant,
                    )
                })
                .collect();
            blocks.push(level_blocks);
        }
        Ok(Model {
            cfg,
            set,
            ids: ModelIds {
                backbone,
                initial_conv,
                down_chains,
                pool_ln,
                adapters,
                blocks,
            },
        })
    }

    pub fn convert<U: Scalar>(&self) -> Result<Model<U>> {
        let mut m: Model<U> = Model::new(self.cfg.clone(), 0)?;
        m.set = self.set.convert();
        Ok(m)
    }

    /// Full coarse-to-fine pass over an image pair. The flow is
    /// estimated on the first image's grid, pointing at matches in the
    /// second image.
    pub fn forward(&self, g: &mut Graph<T>, img_a: &Image, img_b: &Image) -> Result<ForwardOutputs> {
        let side = self.cfg.image_size();
        if img_a.h != side || img_a.w != side || img_b.h != side || img_b.w != side {
            return Err(Error::contract(format!(
                "forward: config expects {side}x{side} images, got {}x{} and {}x{}",
                img_a.h, img_a.w, img_b.h, img_b.w
            )));
        }
        let node_a = image_node(g, img_a)?;
        let node_b = image_node(g, img_b)?;
        self.forward_nodes(g, node_a, node_b, side, side)
    }

    /// Same as [`Model::forward`] over pre-built [h*w x 3] nodes.
    pub fn forward_nodes(
        &self,
        g: &mut Graph<T>,
        img_a: NodeId,
        img_b: NodeId,
        h: usize,
        w: usize,
    ) -> Result<ForwardOutputs> {
        let cfg = &self.cfg;
        let s = cfg.coarse_size;
        let pyr_a = extract_pyramid(g, img_a, h, w, &self.set, &self.ids.backbone)?;
        let pyr_b = extract_pyramid(g, img_b, h, w, &self.set, &self.ids.backbone)?;
        let ctx = AttnCtx::new(g, s, cfg.model_dim, cfg.kernel)?;

        let mut cost: Option<CostVolume> = None;
        let mut prev_refined: Option<(FeatureLevel, FeatureLevel)> = None;
        let mut levels: Vec<LevelOutput> = Vec::with_capacity(cfg.levels);

        for l in 0..cfg.levels {
            let err_at = |e: Error| match e {
                Error::Contract(msg) => Error::Contract(format!("level {l}: {msg}")),
                other => other,
            };

            // fold this level's raw correlation into the shared volume
            let raw_corr = build_cost_volume(g, &pyr_a.raw[l], &pyr_b.raw[l])?;
            let mut contribution = if l == 0 {
                separable_conv4d_sym(g, &raw_corr, &self.set, &self.ids.initial_conv)?
            } else {
                let mut v = raw_corr;
                for conv in &self.ids.down_chains[l - 1] {
                    v = separable_conv4d_sym(g, &v, &self.set, conv)?;
                }
                v
            };
            if contribution.h_src != s {
                return Err(err_at(Error::contract(format!(
                    "correlation downsampled to {} instead of {s}",
                    contribution.h_src
                ))));
            }
            if let Some(prev) = cost {
                let data = g.add(prev.data, contribution.data)?;
                contribution = CostVolume { data, ..contribution };
            }
            let mut level_cost = contribution;

            // native features for this level
            let (native_s, native_t) = match prev_refined.take() {
                None => (pyr_a.projected[l], pyr_b.projected[l]),
                Some((rs, rt)) => {
                    let adapter = self.ids.adapters[l - 1];
                    let up_s = upsample_adapted(g, &self.set, &rs, adapter)?;
                    let up_t = upsample_adapted(g, &self.set, &rt, adapter)?;
                    let ds = g.add(up_s.data, pyr_a.projected[l].data).map_err(err_at)?;
                    let dt = g.add(up_t.data, pyr_b.projected[l].data).map_err(err_at)?;
                    (
                        FeatureLevel { data: ds, ..pyr_a.projected[l] },
                        FeatureLevel { data: dt, ..pyr_b.projected[l] },
                    )
                }
            };

            // pool into the blocks, refine, write refinements back
            let (pooled_s, pooled_t) = if l == 0 {
                (native_s, native_t)
            } else {
                let ln = self.ids.pool_ln[l].as_ref().expect("pool ln exists for l >= 1");
                (
                    pool_to_coarse(g, &self.set, &native_s, s, ln)?,
                    pool_to_coarse(g, &self.set, &native_t, s, ln)?,
                )
            };
            let (mut block_s, mut block_t) = (pooled_s, pooled_t);
            for p in &self.ids.blocks[l] {
                let out = attention_block(g, &self.set, &ctx, &block_s, &block_t, &level_cost, p)?;
                block_s = out.d_s;
                block_t = out.d_t;
                level_cost = out.cost;
            }
            let refined_s = writeback(g, &native_s, &pooled_s, &block_s)?;
            let refined_t = writeback(g, &native_t, &pooled_t, &block_t)?;

            // flow correlations use unit-normalized tokens so the
            // soft-argmax temperature sees cosine-bounded values; the
            // features passed to the next level stay unnormalized
            let volume = match cfg.variant {
                BlockVariant::Full => {
                    let ns = g.l2_normalize_lastdim(refined_s.data, T::from_f64(1e-8))?;
                    let nt = g.l2_normalize_lastdim(refined_t.data, T::from_f64(1e-8))?;
                    build_cost_volume(
                        g,
                        &FeatureLevel { data: ns, ..refined_s },
                        &FeatureLevel { data: nt, ..refined_t },
                    )?
                }
                BlockVariant::CostOnly => level_cost,
            };
            let flow = soft_argmax_flow(g, &volume, cfg.tau)?;
            levels.push(LevelOutput {
                volume,
                refined_s,
                refined_t,
                flow,
            });

            cost = Some(level_cost);
            prev_refined = Some((refined_s, refined_t));
        }

        let recorded: Vec<CostVolume> = levels.iter().map(|lo| lo.volume).collect();
        let c_star = fuse_final_cost(g, &recorded, cfg.fusion)?;
        let final_flow = soft_argmax_flow(g, &c_star, cfg.tau)?;
        Ok(ForwardOutputs {
            levels,
            c_star,
            final_flow,
        })
    }
}

/// Per-level artifacts of one forward pass.
pub struct LevelOutput {
    /// recorded volume driving this level's flow: the refined-feature
    /// correlation at native resolution (full variant) or the
    /// aggregated cost at the coarsest resolution (cost-only variant)
    pub volume: CostVolume,
    pub refined_s: FeatureLevel,
    pub refined_t: FeatureLevel,
    pub flow: FlowNode,
}

pub struct ForwardOutputs {
    pub levels: Vec<LevelOutput>,
    pub c_star: CostVolume,
    pub final_flow: FlowNode,
}

fn build_ln<T: Scalar>(set: &mut ParamSet<T>, name: &str, dim: usize) -> LnParams {
    LnParams {
        gamma: set.add(format!("{name}.gamma"), vec![dim], ones(&[dim]), ParamGroup::Main),
        beta: set.add(format!("{name}.beta"), vec![dim], zeros(&[dim]), ParamGroup::Main),
    }
}

pub fn image_node<T: Scalar>(g: &mut Graph<T>, img: &Image) -> Result<NodeId> {
    let vals: Vec<T> = img.data.iter().map(|&v| T::from_f64(v as f64)).collect();
    g.constant(vec![img.h * img.w, 3], vals)
}

/// Linear d -> d adapter followed by 2x bilinear upsampling.
fn upsample_adapted<T: Scalar>(
    g: &mut Graph<T>,
    set: &ParamSet<T>,
    f: &FeatureLevel,
    adapter: ParamId,
) -> Result<FeatureLevel> {
    let w = set.node(g, adapter);
    let mapped = g.matmul(f.data, w)?;
    let up = g.bilinear_resize2d(mapped, f.h, f.w, f.h * 2, f.w * 2)?;
    Ok(FeatureLevel {
        level: f.level + 1,
        h: f.h * 2,
        w: f.w * 2,
        channels: f.channels,
        data: up,
    })
}

/// Average-pool a native-resolution feature map to s x s and
/// layer-normalize it for the attention blocks.
fn pool_to_coarse<T: Scalar>(
    g: &mut Graph<T>,
    set: &ParamSet<T>,
    f: &FeatureLevel,
    s: usize,
    ln: &LnParams,
) -> Result<FeatureLevel> {
    if f.h % s != 0 {
        return Err(Error::contract(format!(
            "pool_to_coarse: {}x{} not divisible by {s}",
            f.h, f.w
        )));
    }
    let k = f.h / s;
    let pooled = g.avg_pool2d(f.data, f.h, f.w, k)?;
    let gamma = set.node(g, ln.gamma);
    let beta = set.node(g, ln.beta);
    let normed = g.layer_norm(pooled, gamma, beta, T::from_f64(LN_EPS))?;
    Ok(FeatureLevel {
        level: f.level,
        h: s,
        w: s,
        channels: f.channels,
        data: normed,
    })
}

/// Propagates block refinements back to native resolution as an
/// upsampled residual delta: refined = native + up(block_out - pooled).
fn writeback<T: Scalar>(
    g: &mut Graph<T>,
    native: &FeatureLevel,
    pooled_in: &FeatureLevel,
    block_out: &FeatureLevel,
) -> Result<FeatureLevel> {
    if native.h == pooled_in.h && native.w == pooled_in.w {
        return Ok(*block_out);
    }
    let delta = g.sub(block_out.data, pooled_in.data)?;
    let up = g.bilinear_resize2d(delta, pooled_in.h, pooled_in.w, native.h, native.w)?;
    let data = g.add(native.data, up)?;
    Ok(FeatureLevel { data, ..*native })
}

// ── checkpoint format ────────────────────────────────────────────────
//
// magic "IFC1", then the config block (little-endian u32 fields, f32
// tau, then the per-level block depths), then each parameter in
// registry order as (name_len, name, rank, dims..., f32 values).

const MAGIC: &[u8; 4] = b"IFC1";

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let cfg = &model.cfg;
    for v in [
        cfg.levels as u32,
        cfg.coarse_size as u32,
        cfg.feat_dim as u32,
        cfg.model_dim as u32,
        cfg.backbone_channels as u32,
        match cfg.kernel {
            AttentionKernel::Softmax => 0u32,
            AttentionKernel::Linear => 1,
        },
        match cfg.fusion {
            FusionMode::Average => 0u32,
            FusionMode::Sum => 1,
        },
        match cfg.variant {
            BlockVariant::Full => 0u32,
            BlockVariant::CostOnly => 1,
        },
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&cfg.tau.to_le_bytes());
    for &d in &cfg.block_depths {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(model.set.len() as u32).to_le_bytes());
    for (_, e) in model.set.iter() {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.values {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.off + n > self.data.len() {
            return Err(Error::format(format!(
                "checkpoint truncated reading {what} at offset {}",
                self.off
            )));
        }
        let s = &self.data[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { data: &bytes, off: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {:02x} {:02x} {:02x} {:02x}, expected \"IFC1\"",
            magic[0], magic[1], magic[2], magic[3]
        )));
    }
    let levels = cur.u32("levels")? as usize;
    if levels == 0 || levels > 16 {
        return Err(Error::format(format!("implausible level count {levels}")));
    }
    let coarse_size = cur.u32("coarse_size")? as usize;
    let feat_dim = cur.u32("feat_dim")? as usize;
    let model_dim = cur.u32("model_dim")? as usize;
    let backbone_channels = cur.u32("backbone_channels")? as usize;
    let kernel = match cur.u32("kernel")? {
        0 => AttentionKernel::Softmax,
        1 => AttentionKernel::Linear,
        k => return Err(Error::format(format!("unknown attention kernel tag {k}"))),
    };
    let fusion = match cur.u32("fusion")? {
        0 => FusionMode::Average,
        1 => FusionMode::Sum,
        k => return Err(Error::format(format!("unknown fusion tag {k}"))),
    };
    let variant = match cur.u32("variant")? {
        0 => BlockVariant::Full,
        1 => BlockVariant::CostOnly,
        k => return Err(Error::format(format!("unknown variant tag {k}"))),
    };
    let tau = cur.f64("tau")?;
    let mut block_depths = Vec::with_capacity(levels);
    for _ in 0..levels {
        block_depths.push(cur.u32("block depth")? as usize);
    }
    let cfg = PyramidConfig {
        levels,
        block_depths,
        coarse_size,
        feat_dim,
        model_dim,
        backbone_channels,
        kernel,
        tau,
        fusion,
        variant,
    };
    cfg.validate()
        .map_err(|e| Error::format(format!("checkpoint config invalid: {e}")))?;

    let mut model: Model<f32> = Model::new(cfg, 0)?;
    let count = cur.u32("parameter count")? as usize;
    if count != model.set.len() {
        return Err(Error::format(format!(
            "checkpoint has {count} parameters, config implies {}",
            model.set.len()
        )));
    }
    for (_, e) in model.set.iter_mut() {
        let name_len = cur.u32("name length")? as usize;
        let name_bytes = cur.take(name_len, "parameter name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::format("parameter name is not utf-8"))?;
        if name != e.name {
            return Err(Error::format(format!(
                "parameter order mismatch: file has {name}, expected {}",
                e.name
            )));
        }
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dim")? as usize);
        }
        if shape != e.shape {
            return Err(Error::format(format!(
                "parameter {name} has dims {shape:?}, expected {:?}",
                e.shape
            )));
        }
        for v in e.values.iter_mut() {
            *v = cur.f32("tensor data")?;
        }
    }
    if cur.off != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cur.off
        )));
    }
    Ok(model)
}
