//! Joint feature/cost aggregation with attention.
//!
//! Each attention block refines per-image descriptors and the 4D cost
//! volume together. Self-attention tokens concatenate a descriptor
//! with its cost row; one attention map then aggregates two value
//! streams, one projected from the descriptors and one from the cost
//! rows, so each aggregation is informed by the other. The block runs
//! bidirectionally — once on (D_s, C) and once on (D_t, C^T) with the
//! same parameters, transposed outputs summed — which makes it exactly
//! equivariant to swapping the input images. Cross-attention then
//! treats the aggregated volume itself as the attention logits,
//! conditioning each image's descriptors on the other. Cost volumes
//! are re-built from refined features and folded back in through
//! residual separable 4D convolutions.

use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureLevel;
use crate::costvol::{
    build_cost_volume, separable_conv4d_sym, transpose_cost, CostVolume, SeparableConv4dParams,
    StagePost,
};
use crate::error::{Error, Result};
use crate::params::{normal_init, ones, zeros, ParamGroup, ParamId, ParamSet};
use crate::tensor::{Graph, NodeId, Scalar};

const LN_EPS: f64 = 1e-5;
const LINEAR_ATTN_DEN_MIN: f64 = 1e-8;

/// Attention map computation used inside self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKernel {
    /// Exact scaled dot-product attention.
    Softmax,
    /// elu(x)+1 feature-map kernel evaluated associatively in O(n d^2).
    Linear,
}

impl AttentionKernel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(AttentionKernel::Softmax),
            "linear" => Some(AttentionKernel::Linear),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionKernel::Softmax => "softmax",
            AttentionKernel::Linear => "linear",
        }
    }
}

/// Fixed 2D sinusoidal embedding table for an s x s grid, flattened
/// row-major to [s*s x d_model]. First half of the channels encodes x,
/// second half y. Deterministic given (s, d_model).
pub fn position_table(s: usize, d_model: usize) -> Vec<f64> {
    assert!(d_model % 4 == 0, "d_model must divide by 4");
    let quarter = d_model / 4;
    let mut out = vec![0.0; s * s * d_model];
    for y in 0..s {
        for x in 0..s {
            let base = (y * s + x) * d_model;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(4.0 * i as f64 / d_model as f64);
                out[base + 2 * i] = (x as f64 * freq).sin();
                out[base + 2 * i + 1] = (x as f64 * freq).cos();
                out[base + d_model / 2 + 2 * i] = (y as f64 * freq).sin();
                out[base + d_model / 2 + 2 * i + 1] = (y as f64 * freq).cos();
            }
        }
    }
    out
}

/// Per-graph context shared by all attention calls at one pyramid
/// level: the kernel choice, d_k, and the bound positional table.
#[derive(Clone, Copy, Debug)]
pub struct AttnCtx {
    pub d_model: usize,
    pub kernel: AttentionKernel,
    pub pos: NodeId,
}

impl AttnCtx {
    pub fn new<T: Scalar>(
        g: &mut Graph<T>,
        s: usize,
        d_model: usize,
        kernel: AttentionKernel,
    ) -> Result<Self> {
        let table: Vec<T> = position_table(s, d_model)
            .into_iter()
            .map(T::from_f64)
            .collect();
        let pos = g.constant(vec![s * s, d_model], table)?;
        Ok(AttnCtx { d_model, kernel, pos })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LnParams {
    fn build<T: Scalar>(set: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        LnParams {
            gamma: set.add(format!("{name}.gamma"), vec![dim], ones(&[dim]), ParamGroup::Main),
            beta: set.add(format!("{name}.beta"), vec![dim], zeros(&[dim]), ParamGroup::Main),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, set: &ParamSet<T>, x: NodeId) -> Result<NodeId> {
        let gamma = set.node(g, self.gamma);
        let beta = set.node(g, self.beta);
        g.layer_norm(x, gamma, beta, T::from_f64(LN_EPS))
    }
}

/// Two-layer MLP with relu, expansion factor 2.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    fn build<T: Scalar>(set: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let hidden = 2 * dim;
        FfnParams {
            w1: set.add(
                format!("{name}.w1"),
                vec![dim, hidden],
                normal_init(rng, &[dim, hidden], 0.02),
                ParamGroup::Main,
            ),
            b1: set.add(format!("{name}.b1"), vec![hidden], zeros(&[hidden]), ParamGroup::Main),
            w2: set.add(
                format!("{name}.w2"),
                vec![hidden, dim],
                normal_init(rng, &[hidden, dim], 0.02),
                ParamGroup::Main,
            ),
            b2: set.add(format!("{name}.b2"), vec![dim], zeros(&[dim]), ParamGroup::Main),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, set: &ParamSet<T>, x: NodeId) -> Result<NodeId> {
        let w1 = set.node(g, self.w1);
        let b1 = set.node(g, self.b1);
        let w2 = set.node(g, self.w2);
        let b2 = set.node(g, self.b2);
        let mut h = g.matmul(x, w1)?;
        h = g.add_bias(h, b1)?;
        h = g.relu(h)?;
        let mut y = g.matmul(h, w2)?;
        y = g.add_bias(y, b2)?;
        Ok(y)
    }
}

/// input --(+attn)--> LN --(+FFN)--> LN, the post-norm transformer
/// residual template.
fn residual_ln_ffn<T: Scalar>(
    g: &mut Graph<T>,
    set: &ParamSet<T>,
    input: NodeId,
    attn_out: NodeId,
    ln_attn: &LnParams,
    ffn: &FfnParams,
    ln_ffn: &LnParams,
) -> Result<NodeId> {
    let sum = g.add(input, attn_out)?;
    let h = ln_attn.apply(g, set, sum)?;
    let f = ffn.apply(g, set, h)?;
    let hf = g.add(h, f)?;
    ln_ffn.apply(g, set, hf)
}

/// Descriptor-side value/FFN/norm weights of the self-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttnFeatPath {
    pub p_v: ParamId, // [d x d]
    pub ffn: FfnParams,
    pub ln_attn: LnParams,
    pub ln_ffn: LnParams,
}

/// Weights of one joint self-attention layer. Query/key projections
/// take the concatenated feature-cost token (or the bare cost row in
/// the cost-only ablation, in which case `feat` is absent).
#[derive(Clone, Copy, Debug)]
pub struct SelfAttnParams {
    pub p_q: ParamId, // [token_dim x d_model]
    pub p_k: ParamId,
    pub p_v_cost: ParamId, // [s2 x s2]
    pub ffn_cost: FfnParams,
    pub ln_cost_attn: LnParams,
    pub ln_cost_ffn: LnParams,
    pub feat: Option<SelfAttnFeatPath>,
}

impl SelfAttnParams {
    pub fn build<T: Scalar>(
        set: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        s2: usize,
        d: usize,
        d_model: usize,
        with_features: bool,
    ) -> Self {
        let token_dim = if with_features { d + s2 } else { s2 };
        let p_q = set.add(
            format!("{name}.p_q"),
            vec![token_dim, d_model],
            normal_init(rng, &[token_dim, d_model], 0.02),
            ParamGroup::Main,
        );
        let p_k = set.add(
            format!("{name}.p_k"),
            vec![token_dim, d_model],
            normal_init(rng, &[token_dim, d_model], 0.02),
            ParamGroup::Main,
        );
        let feat = with_features.then(|| SelfAttnFeatPath {
            p_v: set.add(
                format!("{name}.p_v_feat"),
                vec![d, d],
                normal_init(rng, &[d, d], 0.02),
                ParamGroup::Main,
            ),
            ffn: FfnParams::build(set, rng, &format!("{name}.ffn_feat"), d),
            ln_attn: LnParams::build(set, &format!("{name}.ln_feat_attn"), d),
            ln_ffn: LnParams::build(set, &format!("{name}.ln_feat_ffn"), d),
        });
        let p_v_cost = set.add(
            format!("{name}.p_v_cost"),
            vec![s2, s2],
            normal_init(rng, &[s2, s2], 0.02),
            ParamGroup::Main,
        );
        SelfAttnParams {
            p_q,
            p_k,
            p_v_cost,
            ffn_cost: FfnParams::build(set, rng, &format!("{name}.ffn_cost"), s2),
            ln_cost_attn: LnParams::build(set, &format!("{name}.ln_cost_attn"), s2),
            ln_cost_ffn: LnParams::build(set, &format!("{name}.ln_cost_ffn"), s2),
            feat,
        }
    }
}

/// Kernelized attention with feature map elu(x)+1, evaluated through
/// the associative grouping phi(q) . (phi(k)^T v) / (phi(q) . sum phi(k))
/// in O(n d^2). Output equals explicit normalized-kernel attention.
pub fn linear_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    let vs = g.shape(v).to_vec();
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::Shape {
            op: "linear_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let phi_q = g.elu_plus_one(q)?;
    let phi_k = g.elu_plus_one(k)?;
    let phi_k_t = g.transpose2d(phi_k)?;
    let summary = g.matmul(phi_k_t, v)?; // [d x dv]
    let num = g.matmul(phi_q, summary)?; // [n x dv]
    let k_sum = g.sum_axis(phi_k, 0)?; // [d]
    let k_sum_col = g.reshape(k_sum, vec![ks[1], 1])?;
    let den = g.matmul(phi_q, k_sum_col)?; // [n x 1]
    for &d in g.values(den) {
        if d.to_f64() < LINEAR_ATTN_DEN_MIN {
            return Err(Error::numeric(format!(
                "linear_attention: denominator {d} below {LINEAR_ATTN_DEN_MIN}"
            )));
        }
    }
    let den_flat = g.reshape(den, vec![qs[0]])?;
    let inv = g.recip(den_flat)?;
    g.scale_rows(num, inv)
}

/// Attention aggregation of one value stream under the configured
/// kernel. For softmax the map A = softmax(q k^T / sqrt(d_k)) is built
/// once by the caller and shared across value streams.
fn attend<T: Scalar>(
    g: &mut Graph<T>,
    ctx: &AttnCtx,
    attn_map: Option<NodeId>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    match ctx.kernel {
        AttentionKernel::Softmax => {
            let a = attn_map.expect("softmax path builds the map first");
            g.matmul(a, v)
        }
        AttentionKernel::Linear => linear_attention(g, q, k, v),
    }
}

/// Joint self-attention over the feature-cost volume of one image
/// side: tokens concat(D(i), C(i, .)), a single attention map, two
/// value streams. Returns the refined features and cost volume, each
/// behind its own layer-norm + residual-FFN path.
pub fn joint_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    set: &ParamSet<T>,
    ctx: &AttnCtx,
    d: &FeatureLevel,
    c: &CostVolume,
    p: &SelfAttnParams,
) -> Result<(FeatureLevel, CostVolume)> {
    if d.tokens() != c.src_cells() {
        return Err(Error::Shape {
            op: "joint_self_attention",
            lhs: vec![d.tokens(), d.channels],
            rhs: vec![c.src_cells(), c.tgt_cells()],
        });
    }
    let tokens = match p.feat {
        Some(_) => g.concat_lastdim(d.data, c.data)?,
        None => c.data,
    };
    let p_q = set.node(g, p.p_q);
    let p_k = set.node(g, p.p_k);
    let q_proj = g.matmul(tokens, p_q)?;
    let k_proj = g.matmul(tokens, p_k)?;
    let q = g.add(q_proj, ctx.pos)?;
    let k = g.add(k_proj, ctx.pos)?;

    let attn_map = match ctx.kernel {
        AttentionKernel::Softmax => {
            let k_t = g.transpose2d(k)?;
            let logits = g.matmul(q, k_t)?;
            let scale = T::ONE / T::from_usize(ctx.d_model).sqrt();
            Some(g.softmax_lastdim(logits, scale)?)
        }
        AttentionKernel::Linear => None,
    };

    let out_feat = match &p.feat {
        Some(feat) => {
            let p_v = set.node(g, feat.p_v);
            let v_d = g.matmul(d.data, p_v)?;
            let agg = attend(g, ctx, attn_map, q, k, v_d)?;
            let refined = residual_ln_ffn(g, set, d.data, agg, &feat.ln_attn, &feat.ffn, &feat.ln_ffn)?;
            FeatureLevel { data: refined, ..*d }
        }
        None => *d,
    };

    let p_vc = set.node(g, p.p_v_cost);
    let v_c = g.matmul(c.data, p_vc)?;
    let agg_c = attend(g, ctx, attn_map, q, k, v_c)?;
    let refined_c = residual_ln_ffn(
        g,
        set,
        c.data,
        agg_c,
        &p.ln_cost_attn,
        &p.ffn_cost,
        &p.ln_cost_ffn,
    )?;
    Ok((out_feat, CostVolume { data: refined_c, ..*c }))
}

/// Runs the same self-attention on (D_s, C) and (D_t, C^T) and sums
/// the transposed cost outputs. Sharing one parameter set across the
/// two passes is what makes the result exactly equivariant to swapping
/// the images.
pub fn bidirectional_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    set: &ParamSet<T>,
    ctx: &AttnCtx,
    d_s: &FeatureLevel,
    d_t: &FeatureLevel,
    c: &CostVolume,
    p: &SelfAttnParams,
) -> Result<(FeatureLevel, FeatureLevel, CostVolume)> {
    let (d_s1, c_src) = joint_self_attention(g, set, ctx, d_s, c, p)?;
    let c_t = transpose_cost(g, c)?;
    let (d_t1, c_trg) = joint_self_attention(g, set, ctx, d_t, &c_t, p)?;
    let c_trg_t = transpose_cost(g, &c_trg)?;
    let data = g.add(c_src.data, c_trg_t.data)?;
    Ok((d_s1, d_t1, CostVolume { data, ..c_src }))
}

/// Cross-attention weights of one block (shared between directions).
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnParams {
    pub p_v: ParamId, // [d x d], distinct from the self-attention value map
    pub ffn: FfnParams,
    pub ln_attn: LnParams,
    pub ln_ffn: LnParams,
}

impl CrossAttnParams {
    pub fn build<T: Scalar>(
        set: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
    ) -> Self {
        CrossAttnParams {
            p_v: set.add(
                format!("{name}.p_v"),
                vec![d, d],
                normal_init(rng, &[d, d], 0.02),
                ParamGroup::Main,
            ),
            ffn: FfnParams::build(set, rng, &format!("{name}.ffn"), d),
            ln_attn: LnParams::build(set, &format!("{name}.ln_attn"), d),
            ln_ffn: LnParams::build(set, &format!("{name}.ln_ffn"), d),
        }
    }
}

/// Cross-attention whose logits are the aggregated cost volume itself:
/// softmax over a cost row is a matching distribution, so each image's
/// descriptors aggregate the other image's (projected) descriptors at
/// their likely matches.
pub fn matching_cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    set: &ParamSet<T>,
    ctx: &AttnCtx,
    d_s: &FeatureLevel,
    d_t: &FeatureLevel,
    c: &CostVolume,
    p: &CrossAttnParams,
) -> Result<(FeatureLevel, FeatureLevel)> {
    if c.tgt_cells() != d_t.tokens() || c.src_cells() != d_s.tokens() {
        return Err(Error::Shape {
            op: "matching_cross_attention",
            lhs: vec![c.src_cells(), c.tgt_cells()],
            rhs: vec![d_s.tokens(), d_t.tokens()],
        });
    }
    let scale = T::ONE / T::from_usize(ctx.d_model).sqrt();
    let p_v = set.node(g, p.p_v);

    let a_s = g.softmax_lastdim(c.data, scale)?;
    let v_t = g.matmul(d_t.data, p_v)?;
    let agg_s = g.matmul(a_s, v_t)?;
    let out_s = residual_ln_ffn(g, set, d_s.data, agg_s, &p.ln_attn, &p.ffn, &p.ln_ffn)?;

    let c_t = g.transpose2d(c.data)?;
    let a_t = g.softmax_lastdim(c_t, scale)?;
    let v_s = g.matmul(d_s.data, p_v)?;
    let agg_t = g.matmul(a_t, v_s)?;
    let out_t = residual_ln_ffn(g, set, d_t.data, agg_t, &p.ln_attn, &p.ffn, &p.ln_ffn)?;

    Ok((
        FeatureLevel { data: out_s, ..*d_s },
        FeatureLevel { data: out_t, ..*d_t },
    ))
}

/// Which pieces of the block wiring are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockVariant {
    /// Joint self-attention + matching cross-attention + residual
    /// cost-volume convolutions.
    Full,
    /// Cost-row self-attention plus one residual refiner; features
    /// pass through untouched. Ablation baseline.
    CostOnly,
}

impl BlockVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(BlockVariant::Full),
            "cost_only" => Some(BlockVariant::CostOnly),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::Full => "full",
            BlockVariant::CostOnly => "cost_only",
        }
    }
}

/// All weights of one attention block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub variant: BlockVariant,
    pub self_attn: SelfAttnParams,
    pub cross_attn: Option<CrossAttnParams>,
    /// conv over the refreshed feature correlation after self-attention
    pub conv_corr_sa: Option<SeparableConv4dParams>,
    /// residual refiner after self-attention
    pub conv_refine_sa: SeparableConv4dParams,
    /// conv over the refreshed feature correlation after cross-attention
    pub conv_corr_ca: Option<SeparableConv4dParams>,
    /// residual refiner after cross-attention
    pub conv_refine_ca: Option<SeparableConv4dParams>,
}

impl BlockParams {
    pub fn build<T: Scalar>(
        set: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        s: usize,
        d: usize,
        d_model: usize,
        variant: BlockVariant,
    ) -> Self {
        let s2 = s * s;
        let full = variant == BlockVariant::Full;
        let self_attn = SelfAttnParams::build(set, rng, &format!("{name}.self"), s2, d, d_model, full);
        let conv = |set: &mut ParamSet<T>, rng: &mut ChaCha8Rng, tag: &str| {
            SeparableConv4dParams::build(set, rng, &format!("{name}.{tag}"), 3, 1, StagePost::RELU_NORM)
        };
        BlockParams {
            variant,
            self_attn,
            cross_attn: full.then(|| CrossAttnParams::build(set, rng, &format!("{name}.cross"), d)),
            conv_corr_sa: full.then(|| conv(set, rng, "conv_corr_sa")),
            conv_refine_sa: conv(set, rng, "conv_refine_sa"),
            conv_corr_ca: full.then(|| conv(set, rng, "conv_corr_ca")),
            conv_refine_ca: full.then(|| conv(set, rng, "conv_refine_ca")),
        }
    }
}

/// Refined features and cost volume produced by one block; shapes
/// match the block's inputs.
pub struct BlockOutputs {
    pub d_s: FeatureLevel,
    pub d_t: FeatureLevel,
    pub cost: CostVolume,
}

/// One full attention block at the coarsest resolution:
/// bidirectional self-attention, residual cost updates from refreshed
/// feature correlations and 4D convolutions, then matching
/// cross-attention and a second round of residual cost updates.
pub fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    set: &ParamSet<T>,
    ctx: &AttnCtx,
    d_s: &FeatureLevel,
    d_t: &FeatureLevel,
    c: &CostVolume,
    p: &BlockParams,
) -> Result<BlockOutputs> {
    let (d_s1, d_t1, mut cost) =
        bidirectional_self_attention(g, set, ctx, d_s, d_t, c, &p.self_attn)?;

    if let Some(conv) = &p.conv_corr_sa {
        let corr = build_cost_volume(g, &d_s1, &d_t1)?;
        let delta = separable_conv4d_sym(g, &corr, set, conv)?;
        let data = g.add(cost.data, delta.data)?;
        cost = CostVolume { data, ..cost };
    }
    {
        let delta = separable_conv4d_sym(g, &cost, set, &p.conv_refine_sa)?;
        let data = g.add(cost.data, delta.data)?;
        cost = CostVolume { data, ..cost };
    }

    let (d_s2, d_t2) = match (&p.cross_attn, p.variant) {
        (Some(cross), BlockVariant::Full) => {
            matching_cross_attention(g, set, ctx, &d_s1, &d_t1, &cost, cross)?
        }
        _ => (d_s1, d_t1),
    };

    if let Some(conv) = &p.conv_corr_ca {
        let corr = build_cost_volume(g, &d_s2, &d_t2)?;
        let delta = separable_conv4d_sym(g, &corr, set, conv)?;
        let data = g.add(cost.data, delta.data)?;
        cost = CostVolume { data, ..cost };
    }
    if let Some(conv) = &p.conv_refine_ca {
        let delta = separable_conv4d_sym(g, &cost, set, conv)?;
        let data = g.add(cost.data, delta.data)?;
        cost = CostVolume { data, ..cost };
    }

    Ok(BlockOutputs {
        d_s: d_s2,
        d_t: d_t2,
        cost,
    })
}
