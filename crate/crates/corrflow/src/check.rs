//! Reusable verification suites: finite-difference gradient sweeps,
//! algebraic invariants, and brute-force oracle comparisons.
//!
//! The CLI's `selftest` and `gradcheck` subcommands run these at
//! moderate trial counts; the acceptance test suite runs them at the
//! pinned counts and tolerances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_block, linear_attention, AttentionKernel, AttnCtx, BlockParams, BlockVariant,
};
use crate::backbone::FeatureLevel;
use crate::costvol::{
    build_cost_volume, separable_conv4d, transpose_cost, CostVolume, SeparableConv4dParams,
    StagePost,
};
use crate::error::Result;
use crate::flowhead::{aepe_loss, soft_argmax_flow, FlowNode};
use crate::harness::synth::{gen_synthetic_pair, WarpSpec};
use crate::harness::train::{collect_grads, pair_loss, TrainConfig};
use crate::params::{ParamGroup, ParamSet};
use crate::pyramid::{FusionMode, Model, PyramidConfig};
use crate::tensor::{finite_difference_check, Graph, NodeId, Scalar};

/// One named check with its observed worst error and tolerance.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{}: {} (max err {:.3e}, tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_err,
            self.tolerance
        )
    }
}

// ── per-op gradient checks ───────────────────────────────────────────

enum Domain {
    Any,
    /// values in [0.2, 1.2], for ops with kinks or poles near zero
    Positive,
    /// |x| >= 0.1, for relu
    AwayFromZero,
}

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    domain: Domain,
    build: fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            shapes: vec![vec![2, 3], vec![2, 3]],
            domain: Domain::Any,
            build: |g, n| g.add(n[0], n[1]),
        },
        OpCase {
            name: "sub",
            shapes: vec![vec![2, 3], vec![2, 3]],
            domain: Domain::Any,
            build: |g, n| g.sub(n[0], n[1]),
        },
        OpCase {
            name: "mul",
            shapes: vec![vec![2, 3], vec![2, 3]],
            domain: Domain::Any,
            build: |g, n| g.mul(n[0], n[1]),
        },
        OpCase {
            name: "scale",
            shapes: vec![vec![3, 2]],
            domain: Domain::Any,
            build: |g, n| g.scale(n[0], -1.7),
        },
        OpCase {
            name: "add_bias",
            shapes: vec![vec![3, 4], vec![4]],
            domain: Domain::Any,
            build: |g, n| g.add_bias(n[0], n[1]),
        },
        OpCase {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            domain: Domain::Any,
            build: |g, n| g.matmul(n[0], n[1]),
        },
        OpCase {
            name: "transpose2d",
            shapes: vec![vec![3, 4]],
            domain: Domain::Any,
            build: |g, n| g.transpose2d(n[0]),
        },
        OpCase {
            name: "reshape",
            shapes: vec![vec![2, 6]],
            domain: Domain::Any,
            build: |g, n| g.reshape(n[0], vec![3, 4]),
        },
        OpCase {
            name: "softmax_lastdim",
            shapes: vec![vec![3, 5]],
            domain: Domain::Any,
            build: |g, n| g.softmax_lastdim(n[0], 0.7),
        },
        OpCase {
            name: "layer_norm",
            shapes: vec![vec![3, 4], vec![4], vec![4]],
            domain: Domain::Any,
            build: |g, n| g.layer_norm(n[0], n[1], n[2], 1e-5),
        },
        OpCase {
            name: "l2_normalize",
            shapes: vec![vec![3, 4]],
            domain: Domain::Positive,
            build: |g, n| g.l2_normalize_lastdim(n[0], 1e-8),
        },
        OpCase {
            name: "standardize_all",
            shapes: vec![vec![3, 4]],
            domain: Domain::Any,
            build: |g, n| g.standardize_all(n[0], 1e-5),
        },
        OpCase {
            name: "relu",
            shapes: vec![vec![3, 4]],
            domain: Domain::AwayFromZero,
            build: |g, n| g.relu(n[0]),
        },
        OpCase {
            name: "elu_plus_one",
            shapes: vec![vec![3, 4]],
            domain: Domain::Any,
            build: |g, n| g.elu_plus_one(n[0]),
        },
        OpCase {
            name: "recip",
            shapes: vec![vec![3, 3]],
            domain: Domain::Positive,
            build: |g, n| g.recip(n[0]),
        },
        OpCase {
            name: "concat_lastdim",
            shapes: vec![vec![3, 2], vec![3, 4]],
            domain: Domain::Any,
            build: |g, n| g.concat_lastdim(n[0], n[1]),
        },
        OpCase {
            name: "sum_all",
            shapes: vec![vec![3, 4]],
            domain: Domain::Any,
            build: |g, n| g.sum_all(n[0]),
        },
        OpCase {
            name: "sum_axis",
            shapes: vec![vec![2, 3, 2]],
            domain: Domain::Any,
            build: |g, n| g.sum_axis(n[0], 1),
        },
        OpCase {
            name: "mean_axis",
            shapes: vec![vec![2, 3, 2]],
            domain: Domain::Any,
            build: |g, n| g.mean_axis(n[0], 1),
        },
        OpCase {
            name: "scale_rows",
            shapes: vec![vec![3, 4], vec![3]],
            domain: Domain::Any,
            build: |g, n| g.scale_rows(n[0], n[1]),
        },
        OpCase {
            name: "avg_pool2d",
            shapes: vec![vec![16, 3]],
            domain: Domain::Any,
            build: |g, n| g.avg_pool2d(n[0], 4, 4, 2),
        },
        OpCase {
            name: "bilinear_resize2d_up",
            shapes: vec![vec![12, 2]],
            domain: Domain::Any,
            build: |g, n| g.bilinear_resize2d(n[0], 3, 4, 5, 6),
        },
        OpCase {
            name: "bilinear_resize2d_down",
            shapes: vec![vec![16, 2]],
            domain: Domain::Any,
            build: |g, n| g.bilinear_resize2d(n[0], 4, 4, 2, 2),
        },
        OpCase {
            name: "unfold2d_s1",
            shapes: vec![vec![16, 2]],
            domain: Domain::Any,
            build: |g, n| g.unfold2d(n[0], 4, 4, 3, 1),
        },
        OpCase {
            name: "unfold2d_s2",
            shapes: vec![vec![16, 2]],
            domain: Domain::Any,
            build: |g, n| g.unfold2d(n[0], 4, 4, 3, 2),
        },
        OpCase {
            name: "conv2d_shared_s1",
            shapes: vec![vec![16, 2], vec![3, 3]],
            domain: Domain::Any,
            build: |g, n| g.conv2d_shared(n[0], n[1], 4, 4, 1),
        },
        OpCase {
            name: "conv2d_shared_s2",
            shapes: vec![vec![16, 2], vec![3, 3]],
            domain: Domain::Any,
            build: |g, n| g.conv2d_shared(n[0], n[1], 4, 4, 2),
        },
        OpCase {
            name: "euclid_lastdim",
            shapes: vec![vec![4, 3]],
            domain: Domain::Positive,
            build: |g, n| g.euclid_lastdim(n[0]),
        },
        OpCase {
            name: "separable_conv4d",
            shapes: vec![vec![9, 9], vec![3, 3], vec![3, 3]],
            domain: Domain::Any,
            build: |g, n| {
                let c = CostVolume { h_src: 3, w_src: 3, h_tgt: 3, w_tgt: 3, data: n[0] };
                let out = crate::costvol::separable_conv4d_nodes(
                    g,
                    &c,
                    n[1],
                    n[2],
                    1,
                    StagePost::RELU_NORM,
                    StagePost::RELU_NORM,
                )?;
                Ok(out.data)
            },
        },
        OpCase {
            name: "resize_cost4d",
            shapes: vec![vec![9, 9]],
            domain: Domain::Any,
            build: |g, n| {
                let c = CostVolume { h_src: 3, w_src: 3, h_tgt: 3, w_tgt: 3, data: n[0] };
                let out = crate::costvol::resize_cost4d(g, &c, (4, 4, 4, 4))?;
                Ok(out.data)
            },
        },
        OpCase {
            name: "soft_argmax_flow",
            shapes: vec![vec![9, 9]],
            domain: Domain::Any,
            build: |g, n| {
                let c = CostVolume { h_src: 3, w_src: 3, h_tgt: 3, w_tgt: 3, data: n[0] };
                let f = soft_argmax_flow(g, &c, 0.5)?;
                Ok(f.data)
            },
        },
        OpCase {
            name: "linear_attention",
            shapes: vec![vec![4, 3], vec![4, 3], vec![4, 2]],
            domain: Domain::Any,
            build: |g, n| linear_attention(g, n[0], n[1], n[2]),
        },
        OpCase {
            name: "aepe",
            shapes: vec![vec![4, 2], vec![4, 2]],
            domain: Domain::Any,
            build: |g, n| {
                let pred = FlowNode { h: 2, w: 2, data: n[0] };
                let gt = FlowNode { h: 2, w: 2, data: n[1] };
                aepe_loss(g, &pred, &gt, &[true, true, false, true])
            },
        },
    ]
}

fn draw(rng: &mut ChaCha8Rng, domain: &Domain) -> f64 {
    let u = rng.gen::<f64>() * 2.0 - 1.0;
    match domain {
        Domain::Any => u,
        Domain::Positive => 0.7 + 0.5 * u,
        Domain::AwayFromZero => u + 0.1 * if u >= 0.0 { 1.0 } else { -1.0 },
    }
}

fn gradcheck_case(case: &OpCase, seed: u64, h: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = case.shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let point: Vec<f64> = (0..total).map(|_| draw(&mut rng, &case.domain)).collect();

    // loss weights are fixed for the whole check; sized by a dry run
    let out_len = {
        let mut g: Graph<f64> = Graph::new();
        let ids = make_leaves(&mut g, &case.shapes, &point)?;
        let out = (case.build)(&mut g, &ids)?;
        g.values(out).len()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| 0.5 + rng.gen::<f64>()).collect();

    let mut eval = |p: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g: Graph<f64> = Graph::new();
        let ids = make_leaves(&mut g, &case.shapes, p)?;
        let out = (case.build)(&mut g, &ids)?;
        let w = g.constant(g.shape(out).to_vec(), weights.clone())?;
        let prod = g.mul(out, w)?;
        let loss = g.sum_all(prod)?;
        let value = g.value_scalar(loss)?;
        if !want_grad {
            return Ok((value, None));
        }
        g.backward(loss)?;
        let mut grads = Vec::with_capacity(p.len());
        for &id in &ids {
            match g.grad(id) {
                Some(gr) => grads.extend_from_slice(gr),
                None => grads.extend(std::iter::repeat(0.0).take(g.values(id).len())),
            }
        }
        Ok((value, Some(grads)))
    };
    let report = finite_difference_check(&mut eval, &point, h, None)?;
    Ok(report.max_rel_err)
}

fn make_leaves(g: &mut Graph<f64>, shapes: &[Vec<usize>], flat: &[f64]) -> Result<Vec<NodeId>> {
    let mut ids = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for shape in shapes {
        let n: usize = shape.iter().product();
        ids.push(g.leaf(shape.clone(), flat[off..off + n].to_vec(), true)?);
        off += n;
    }
    Ok(ids)
}

/// Finite-difference check of every registered op over the given
/// seeds. Returns one result per op with the worst error seen.
pub fn gradcheck_ops(seeds: u64, h: f64, tolerance: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for case in op_cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let err = gradcheck_case(&case, 1000 + seed, h)?;
            worst = worst.max(err);
        }
        out.push(CheckResult {
            name: format!("grad/{}", case.name),
            max_err: worst,
            tolerance,
        });
    }
    Ok(out)
}

/// Finite-difference check of one full attention block (s=2, d=4,
/// d_model=8) against every block parameter and both inputs.
pub fn gradcheck_block(seeds: u64, h: f64, tolerance: f64) -> Result<CheckResult> {
    let (s, d, dm) = (2usize, 4usize, 8usize);
    let s2 = s * s;
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut set: ParamSet<f64> = ParamSet::new();
        let p = BlockParams::build(&mut set, &mut rng, "gc.block", s, d, dm, BlockVariant::Full);
        let np = set.scalar_count();
        let inputs: Vec<f64> = (0..(2 * s2 * d + s2 * s2))
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        let mut point = set.flatten_f64();
        point.extend_from_slice(&inputs);
        let weights: Vec<f64> = (0..(2 * s2 * d + s2 * s2))
            .map(|_| 0.5 + rng.gen::<f64>())
            .collect();

        let mut scratch = set.clone();
        let mut eval = |pt: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            scratch.load_flat_f64(&pt[..np])?;
            let mut g: Graph<f64> = Graph::new();
            let ctx = AttnCtx::new(&mut g, s, dm, AttentionKernel::Softmax)?;
            let mut off = np;
            let ds_node = g.leaf(vec![s2, d], pt[off..off + s2 * d].to_vec(), true)?;
            off += s2 * d;
            let dt_node = g.leaf(vec![s2, d], pt[off..off + s2 * d].to_vec(), true)?;
            off += s2 * d;
            let c_node = g.leaf(vec![s2, s2], pt[off..off + s2 * s2].to_vec(), true)?;
            let d_s = FeatureLevel { level: 0, h: s, w: s, channels: d, data: ds_node };
            let d_t = FeatureLevel { level: 0, h: s, w: s, channels: d, data: dt_node };
            let c = CostVolume { h_src: s, w_src: s, h_tgt: s, w_tgt: s, data: c_node };
            let out = attention_block(&mut g, &scratch, &ctx, &d_s, &d_t, &c, &p)?;

            let cat1 = g.concat_lastdim(out.d_s.data, out.d_t.data)?;
            let flat_feat = g.reshape(cat1, vec![1, s2 * 2 * d])?;
            let flat_cost = g.reshape(out.cost.data, vec![1, s2 * s2])?;
            let all = g.concat_lastdim(flat_feat, flat_cost)?;
            let w = g.constant(vec![1, weights.len()], weights.clone())?;
            let prod = g.mul(all, w)?;
            let loss = g.sum_all(prod)?;
            let value = g.value_scalar(loss)?;
            if !want_grad {
                return Ok((value, None));
            }
            g.backward(loss)?;
            let mut grads = Vec::with_capacity(pt.len());
            for buf in collect_grads(&g, &scratch) {
                grads.extend_from_slice(&buf);
            }
            for id in [ds_node, dt_node, c_node] {
                grads.extend_from_slice(g.grad(id).unwrap_or(&vec![0.0; g.values(id).len()]));
            }
            Ok((value, Some(grads)))
        };
        let report = finite_difference_check(&mut eval, &point, h, None)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(CheckResult {
        name: "grad/attention_block".into(),
        max_err: worst,
        tolerance,
    })
}

/// End-to-end gradient of the full training loss at a tiny config
/// (L=2, s=2) against a 16-entry random parameter sample per seed.
pub fn gradcheck_end_to_end(seeds: u64, h: f64, tolerance: f64) -> Result<CheckResult> {
    let cfg = TrainConfig {
        model: PyramidConfig {
            levels: 2,
            block_depths: vec![1, 1],
            coarse_size: 2,
            feat_dim: 4,
            model_dim: 8,
            backbone_channels: 4,
            kernel: AttentionKernel::Softmax,
            tau: 0.05,
            fusion: FusionMode::Average,
            variant: BlockVariant::Full,
        },
        warp: WarpSpec::translation(2.0),
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut model: Model<f64> = Model::new(cfg.model.clone(), 3000 + seed)?;
        let pair = gen_synthetic_pair(4000 + seed, cfg.model.image_size(), &cfg.warp)?;
        let point = model.set.flatten_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let subset: Vec<usize> = (0..16).map(|_| rng.gen_range(0..point.len())).collect();

        let mut eval = |pt: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            model.set.load_flat_f64(pt)?;
            let mut g: Graph<f64> = Graph::new();
            let loss = pair_loss(&mut g, &model, &pair)?;
            let value = g.value_scalar(loss)?;
            if !want_grad {
                return Ok((value, None));
            }
            g.backward(loss)?;
            let mut grads = Vec::with_capacity(pt.len());
            for buf in collect_grads(&g, &model.set) {
                grads.extend_from_slice(&buf);
            }
            Ok((value, Some(grads)))
        };
        let report = finite_difference_check(&mut eval, &point, h, Some(&subset))?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(CheckResult {
        name: "grad/end_to_end".into(),
        max_err: worst,
        tolerance,
    })
}

// ── algebraic invariants ─────────────────────────────────────────────

/// Randomized algebraic invariants; `trials` independent draws each.
pub fn invariant_suite(trials: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut softmax_err: f64 = 0.0;
    let mut involution_err: f64 = 0.0;
    let mut build_err: f64 = 0.0;
    let mut delta_err: f64 = 0.0;
    let mut resize_err: f64 = 0.0;

    for _ in 0..trials {
        // softmax row-stochasticity in f32
        {
            let rows = rng.gen_range(1..5usize);
            let cols = rng.gen_range(1..8usize);
            let vals: Vec<f32> = (0..rows * cols)
                .map(|_| (rng.gen::<f32>() - 0.5) * 20.0)
                .collect();
            let mut g: Graph<f32> = Graph::new();
            let x = g.constant(vec![rows, cols], vals)?;
            let y = g.softmax_lastdim(x, 1.3)?;
            for r in 0..rows {
                let sum: f32 = g.values(y)[r * cols..(r + 1) * cols].iter().sum();
                softmax_err = softmax_err.max((sum as f64 - 1.0).abs());
            }
        }
        // transpose involution, bit-exact
        {
            let m = rng.gen_range(1..6usize);
            let n = rng.gen_range(1..6usize);
            let vals: Vec<f64> = (0..m * n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant(vec![m, n], vals.clone())?;
            let t = g.transpose2d(x)?;
            let tt = g.transpose2d(t)?;
            if g.values(tt) != vals.as_slice() {
                involution_err = 1.0;
            }
        }
        // build(d_s, d_t) == build(d_t, d_s)^T, bit-exact
        {
            let (hw, ch) = (rng.gen_range(1..4usize), rng.gen_range(1..5usize));
            let sv: Vec<f64> = (0..hw * hw * ch).map(|_| rng.gen::<f64>() - 0.5).collect();
            let tv: Vec<f64> = (0..hw * hw * ch).map(|_| rng.gen::<f64>() - 0.5).collect();
            let mut g: Graph<f64> = Graph::new();
            let sn = g.constant(vec![hw * hw, ch], sv)?;
            let tn = g.constant(vec![hw * hw, ch], tv)?;
            let d_s = FeatureLevel { level: 0, h: hw, w: hw, channels: ch, data: sn };
            let d_t = FeatureLevel { level: 0, h: hw, w: hw, channels: ch, data: tn };
            let fwd = build_cost_volume(&mut g, &d_s, &d_t)?;
            let rev = build_cost_volume(&mut g, &d_t, &d_s)?;
            let rev_t = transpose_cost(&mut g, &rev)?;
            if g.values(fwd.data) != g.values(rev_t.data) {
                build_err = 1.0;
            }
        }
        // delta-kernel separable conv identity, exact
        {
            let side = rng.gen_range(2..4usize);
            let n = side * side;
            let vals: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let mut set: ParamSet<f64> = ParamSet::new();
            let ks = set.add("ks", vec![1, 1], vec![1.0], ParamGroup::Main);
            let kt = set.add("kt", vec![1, 1], vec![1.0], ParamGroup::Main);
            let p = SeparableConv4dParams {
                kernel_src: ks,
                kernel_tgt: kt,
                stride: 1,
                post_src: StagePost::NONE,
                post_tgt: StagePost::NONE,
            };
            let mut g: Graph<f64> = Graph::new();
            let data = g.constant(vec![n, n], vals.clone())?;
            let c = CostVolume { h_src: side, w_src: side, h_tgt: side, w_tgt: side, data };
            let out = separable_conv4d(&mut g, &c, &set, &p)?;
            if g.values(out.data) != vals.as_slice() {
                delta_err = 1.0;
            }
        }
        // same-size 4D resize identity, bit-exact
        {
            let side = rng.gen_range(2..4usize);
            let n = side * side;
            let vals: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let mut g: Graph<f64> = Graph::new();
            let data = g.constant(vec![n, n], vals.clone())?;
            let c = CostVolume { h_src: side, w_src: side, h_tgt: side, w_tgt: side, data };
            let out = crate::costvol::resize_cost4d(&mut g, &c, (side, side, side, side))?;
            if g.values(out.data) != vals.as_slice() {
                resize_err = 1.0;
            }
        }
    }

    Ok(vec![
        CheckResult { name: "invariant/softmax_row_stochastic".into(), max_err: softmax_err, tolerance: 1e-6 },
        CheckResult { name: "invariant/transpose_involution".into(), max_err: involution_err, tolerance: 0.0 },
        CheckResult { name: "invariant/build_transpose_identity".into(), max_err: build_err, tolerance: 0.0 },
        CheckResult { name: "invariant/delta_conv_identity".into(), max_err: delta_err, tolerance: 0.0 },
        CheckResult { name: "invariant/resize_same_size_identity".into(), max_err: resize_err, tolerance: 0.0 },
    ])
}

// ── equivariance ─────────────────────────────────────────────────────

fn block_equivariance_once<T: Scalar>(seed: u64) -> Result<f64> {
    let (s, d, dm) = (2usize, 4usize, 8usize);
    let s2 = s * s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set: ParamSet<T> = ParamSet::new();
    let p = BlockParams::build(&mut set, &mut rng, "eq.block", s, d, dm, BlockVariant::Full);
    let mut g: Graph<T> = Graph::new();
    let ctx = AttnCtx::new(&mut g, s, dm, AttentionKernel::Softmax)?;
    let mut mk = |n: usize| -> Vec<T> {
        (0..n).map(|_| T::from_f64(rng.gen::<f64>() * 2.0 - 1.0)).collect()
    };
    let sv = mk(s2 * d);
    let tv = mk(s2 * d);
    let cv = mk(s2 * s2);
    let ds_node = g.leaf(vec![s2, d], sv, false)?;
    let dt_node = g.leaf(vec![s2, d], tv, false)?;
    let c_node = g.leaf(vec![s2, s2], cv, false)?;
    let d_s = FeatureLevel { level: 0, h: s, w: s, channels: d, data: ds_node };
    let d_t = FeatureLevel { level: 0, h: s, w: s, channels: d, data: dt_node };
    let c = CostVolume { h_src: s, w_src: s, h_tgt: s, w_tgt: s, data: c_node };

    let fwd = attention_block(&mut g, &set, &ctx, &d_s, &d_t, &c, &p)?;
    let c_t = transpose_cost(&mut g, &c)?;
    let swp = attention_block(&mut g, &set, &ctx, &d_t, &d_s, &c_t, &p)?;
    let swp_t = transpose_cost(&mut g, &swp.cost)?;

    let mut dev: f64 = 0.0;
    for (a, b) in g.values(fwd.cost.data).iter().zip(g.values(swp_t.data)) {
        dev = dev.max((a.to_f64() - b.to_f64()).abs());
    }
    for (a, b) in g.values(fwd.d_s.data).iter().zip(g.values(swp.d_t.data)) {
        dev = dev.max((a.to_f64() - b.to_f64()).abs());
    }
    Ok(dev)
}

fn network_equivariance_once<T: Scalar>(seed: u64) -> Result<f64> {
    let cfg = PyramidConfig {
        levels: 2,
        block_depths: vec![1, 1],
        coarse_size: 2,
        feat_dim: 4,
        model_dim: 8,
        backbone_channels: 4,
        kernel: AttentionKernel::Softmax,
        tau: 0.05,
        fusion: FusionMode::Average,
        variant: BlockVariant::Full,
    };
    let model: Model<T> = Model::new(cfg.clone(), seed)?;
    let pair = gen_synthetic_pair(seed ^ 0xabcd, cfg.image_size(), &WarpSpec::affine(2.0, 0.1))?;
    let mut g: Graph<T> = Graph::new();
    let fwd = model.forward(&mut g, &pair.source, &pair.target)?;
    let rev = model.forward(&mut g, &pair.target, &pair.source)?;
    let rev_t = transpose_cost(&mut g, &rev.c_star)?;
    let mut dev: f64 = 0.0;
    for (a, b) in g.values(fwd.c_star.data).iter().zip(g.values(rev_t.data)) {
        dev = dev.max((a.to_f64() - b.to_f64()).abs());
    }
    Ok(dev)
}

/// Input-order equivariance at the block and whole-network level, in
/// both precisions, over `draws` random parameter draws.
pub fn equivariance_suite(draws: u64) -> Result<Vec<CheckResult>> {
    let mut block64: f64 = 0.0;
    let mut block32: f64 = 0.0;
    let mut net64: f64 = 0.0;
    let mut net32: f64 = 0.0;
    for i in 0..draws {
        block64 = block64.max(block_equivariance_once::<f64>(100 + i)?);
        block32 = block32.max(block_equivariance_once::<f32>(100 + i)?);
        net64 = net64.max(network_equivariance_once::<f64>(200 + i)?);
        net32 = net32.max(network_equivariance_once::<f32>(200 + i)?);
    }
    Ok(vec![
        CheckResult { name: "equivariance/block_f64".into(), max_err: block64, tolerance: 1e-10 },
        CheckResult { name: "equivariance/block_f32".into(), max_err: block32, tolerance: 1e-5 },
        CheckResult { name: "equivariance/network_f64".into(), max_err: net64, tolerance: 1e-10 },
        CheckResult { name: "equivariance/network_f32".into(), max_err: net32, tolerance: 1e-5 },
    ])
}

// ── brute-force oracles ──────────────────────────────────────────────

/// Dense 6-nested-loop evaluation of the separable 4D convolution
/// definition, independent of the production kernels.
pub fn naive_separable_conv4d(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    kernel_src: &[f64],
    kernel_tgt: &[f64],
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let (hs, ws, ht, wt) = dims;
    let pad = k / 2;
    let (ohs, ows) = (hs.div_ceil(stride), ws.div_ceil(stride));
    let (oht, owt) = (ht.div_ceil(stride), wt.div_ceil(stride));
    let mut stage1 = vec![0.0; ohs * ows * ht * wt];
    for oy in 0..ohs {
        for ox in 0..ows {
            for ty in 0..ht {
                for tx in 0..wt {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if iy < 0 || iy >= hs as isize || ix < 0 || ix >= ws as isize {
                                continue;
                            }
                            acc += kernel_src[dy * k + dx]
                                * x[(iy as usize * ws + ix as usize) * ht * wt + ty * wt + tx];
                        }
                    }
                    stage1[(oy * ows + ox) * ht * wt + ty * wt + tx] = acc;
                }
            }
        }
    }
    let mut out = vec![0.0; ohs * ows * oht * owt];
    for sy in 0..ohs {
        for sx in 0..ows {
            for oy in 0..oht {
                for ox in 0..owt {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if iy < 0 || iy >= ht as isize || ix < 0 || ix >= wt as isize {
                                continue;
                            }
                            acc += kernel_tgt[dy * k + dx]
                                * stage1[(sy * ows + sx) * ht * wt
                                    + iy as usize * wt
                                    + ix as usize];
                        }
                    }
                    out[(sy * ows + sx) * oht * owt + oy * owt + ox] = acc;
                }
            }
        }
    }
    out
}

/// Oracle-equivalence checks: separable conv vs the naive definition,
/// linear attention vs explicit normalized-kernel attention, and
/// soft-argmax vs hard argmax on peaked volumes.
pub fn oracle_suite(trials: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut conv_err: f64 = 0.0;
    for _ in 0..trials {
        let stride = if rng.gen::<bool>() { 1 } else { 2 };
        let vals: Vec<f64> = (0..256).map(|_| rng.gen::<f64>() - 0.5).collect();
        let ks: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() - 0.5).collect();
        let kt: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut set: ParamSet<f64> = ParamSet::new();
        let kernel_src = set.add("ks", vec![3, 3], ks.clone(), ParamGroup::Main);
        let kernel_tgt = set.add("kt", vec![3, 3], kt.clone(), ParamGroup::Main);
        let p = SeparableConv4dParams {
            kernel_src,
            kernel_tgt,
            stride,
            post_src: StagePost::NONE,
            post_tgt: StagePost::NONE,
        };
        let mut g: Graph<f64> = Graph::new();
        let data = g.constant(vec![16, 16], vals.clone())?;
        let c = CostVolume { h_src: 4, w_src: 4, h_tgt: 4, w_tgt: 4, data };
        let out = separable_conv4d(&mut g, &c, &set, &p)?;
        let oracle = naive_separable_conv4d(&vals, (4, 4, 4, 4), &ks, &kt, 3, stride);
        for (a, b) in g.values(out.data).iter().zip(&oracle) {
            conv_err = conv_err.max((a - b).abs());
        }
    }

    let mut lin_err: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(1..=16usize);
        let d_k = rng.gen_range(1..6usize);
        let dv = rng.gen_range(1..5usize);
        let qv: Vec<f64> = (0..n * d_k).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let kv: Vec<f64> = (0..n * d_k).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let vv: Vec<f64> = (0..n * dv).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(vec![n, d_k], qv.clone(), false)?;
        let k = g.leaf(vec![n, d_k], kv.clone(), false)?;
        let v = g.leaf(vec![n, dv], vv.clone(), false)?;
        let out = linear_attention(&mut g, q, k, v)?;
        let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
        for i in 0..n {
            let mut den = 0.0;
            let mut weights = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for t in 0..d_k {
                    dot += phi(qv[i * d_k + t]) * phi(kv[j * d_k + t]);
                }
                weights[j] = dot;
                den += dot;
            }
            for c in 0..dv {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += weights[j] / den * vv[j * dv + c];
                }
                lin_err = lin_err.max((g.values(out)[i * dv + c] - acc).abs());
            }
        }
    }

    // soft vs hard argmax at tau = 1e-3 on rows whose unique maximum
    // is separated by at least 0.1
    let mut disagreements = 0usize;
    let mut rows_total = 0usize;
    let side = 4usize;
    let n = side * side;
    while rows_total < 1000 {
        let mut vals = vec![0.0; n * n];
        let mut args = vec![0usize; n];
        for r in 0..n {
            for j in 0..n {
                vals[r * n + j] = rng.gen::<f64>() * 0.8;
            }
            let j_star = rng.gen_range(0..n);
            let mx = vals[r * n..(r + 1) * n].iter().cloned().fold(f64::MIN, f64::max);
            vals[r * n + j_star] = mx + 0.1;
            args[r] = j_star;
        }
        let mut g: Graph<f64> = Graph::new();
        let data = g.constant(vec![n, n], vals)?;
        let c = CostVolume { h_src: side, w_src: side, h_tgt: side, w_tgt: side, data };
        let f = soft_argmax_flow(&mut g, &c, 1e-3)?;
        let uv = g.values(f.data);
        for r in 0..n {
            let hard_u = (args[r] % side) as f64 - (r % side) as f64;
            let hard_v = (args[r] / side) as f64 - (r / side) as f64;
            if (uv[2 * r] - hard_u).abs() > 0.01 || (uv[2 * r + 1] - hard_v).abs() > 0.01 {
                disagreements += 1;
            }
            rows_total += 1;
        }
    }
    let agree = 1.0 - disagreements as f64 / rows_total as f64;

    Ok(vec![
        CheckResult { name: "oracle/separable_conv4d_vs_naive".into(), max_err: conv_err, tolerance: 1e-10 },
        CheckResult { name: "oracle/linear_attention_vs_quadratic".into(), max_err: lin_err, tolerance: 1e-6 },
        CheckResult {
            name: "oracle/soft_vs_hard_argmax_agreement".into(),
            max_err: 1.0 - agree,
            tolerance: 0.01,
        },
    ])
}
