//! Training loop and evaluation protocol over synthetic pairs.
//!
//! Each step draws a seeded pair, runs the coarse-to-fine forward on
//! (warped view, texture) so the predicted flow lives on the ground
//! truth's grid, sums AEPE losses over every per-level flow plus the
//! fused-volume flow, backpropagates, and applies AdamW with two
//! learning-rate groups. Everything is deterministic given the seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowhead::{aepe_loss, aepe_stats, FlowField, FlowNode};
use crate::harness::optim::{adamw_step, AdamHyper, AdamState};
use crate::harness::synth::{gen_synthetic_pair, pair_seed, SyntheticPair, WarpSpec};
use crate::params::ParamSet;
use crate::pyramid::{ForwardOutputs, Model, PyramidConfig};
use crate::tensor::{Graph, NodeId, Precision, Scalar};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    /// fractions of total steps at which the learning rate halves
    pub milestones: Vec<f64>,
    pub seed: u64,
    pub precision: Precision,
    pub model: PyramidConfig,
    pub warp: WarpSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 600,
            batch_size: 1,
            lr_main: 1e-4,
            lr_backbone: 1e-6,
            weight_decay: 0.05,
            milestones: vec![0.6, 0.8],
            seed: 17,
            precision: Precision::F32,
            model: PyramidConfig::default(),
            warp: WarpSpec::translation(8.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::contract("train config: batch_size must be positive"));
        }
        if !(self.lr_main > 0.0) || !(self.lr_backbone > 0.0) {
            return Err(Error::contract("train config: learning rates must be positive"));
        }
        Ok(())
    }
}

/// Downsamples a validity mask to a coarser grid by nearest
/// (align-corners) sampling.
fn downsample_mask(mask: &[bool], h: usize, w: usize, oh: usize, ow: usize) -> Vec<bool> {
    if oh == h && ow == w {
        return mask.to_vec();
    }
    let mut out = vec![false; oh * ow];
    for y in 0..oh {
        let sy = if oh > 1 {
            ((y as f64 * (h - 1) as f64 / (oh - 1) as f64).round() as usize).min(h - 1)
        } else {
            0
        };
        for x in 0..ow {
            let sx = if ow > 1 {
                ((x as f64 * (w - 1) as f64 / (ow - 1) as f64).round() as usize).min(w - 1)
            } else {
                0
            };
            out[y * ow + x] = mask[sy * w + sx];
        }
    }
    out
}

fn flow_const<T: Scalar>(g: &mut Graph<T>, f: &FlowField) -> Result<FlowNode> {
    let vals: Vec<T> = f.uv.iter().map(|&v| T::from_f64(v as f64)).collect();
    let data = g.constant(vec![f.h * f.w, 2], vals)?;
    Ok(FlowNode { h: f.h, w: f.w, data })
}

/// Multi-level AEPE objective for one pair: per-level flows against
/// rescaled ground truth plus the fused-volume flow, equal weights.
pub fn pair_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    pair: &SyntheticPair,
) -> Result<NodeId> {
    let out = model.forward(g, &pair.target, &pair.source)?;
    forward_loss(g, &out, pair)
}

/// Loss over already-computed forward outputs.
pub fn forward_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardOutputs,
    pair: &SyntheticPair,
) -> Result<NodeId> {
    let (h, w) = (pair.gt_flow.h, pair.gt_flow.w);
    let mut total: Option<NodeId> = None;
    let mut flows: Vec<&FlowNode> = out.levels.iter().map(|l| &l.flow).collect();
    flows.push(&out.final_flow);
    for f in flows {
        let gt = pair.gt_flow.rescale(f.h, f.w);
        let mask = downsample_mask(&pair.mask, h, w, f.h, f.w);
        let gt_node = flow_const(g, &gt)?;
        let l = aepe_loss(g, f, &gt_node, &mask)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    total.ok_or_else(|| Error::contract("forward produced no flows"))
}

/// Reads one gradient buffer per parameter out of the graph; params
/// untouched by the loss get zeros.
pub fn collect_grads<T: Scalar>(g: &Graph<T>, set: &ParamSet<T>) -> Vec<Vec<T>> {
    set.iter()
        .map(|(id, e)| match g.bound_node(id.0).and_then(|n| g.grad(n)) {
            Some(gr) => gr.to_vec(),
            None => vec![T::ZERO; e.values.len()],
        })
        .collect()
}

pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    /// line-oriented `step<TAB>loss` log
    pub loss_log: String,
    /// set when training aborted on a non-finite loss; the model holds
    /// the last parameters that produced a finite loss
    pub aborted: Option<String>,
}

/// Runs the seeded training loop at the configured precision.
pub fn train<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut model: Model<T> = Model::new(cfg.model.clone(), cfg.seed)?;
    let hyper = AdamHyper {
        lr_main: cfg.lr_main,
        lr_backbone: cfg.lr_backbone,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = AdamState::new(&model.set);
    let mut log = String::new();
    let size = cfg.model.image_size();

    let milestone_steps: Vec<usize> = cfg
        .milestones
        .iter()
        .map(|&f| (f * cfg.steps as f64).floor() as usize)
        .collect();

    let mut last_good: Option<ParamSet<T>> = None;
    for step in 0..cfg.steps {
        let mut g: Graph<T> = Graph::new();
        let mut batch_loss: Option<NodeId> = None;
        for b in 0..cfg.batch_size {
            let seed = pair_seed(cfg.seed, (step * cfg.batch_size + b) as u64, false);
            let pair = gen_synthetic_pair(seed, size, &cfg.warp)?;
            let l = pair_loss(&mut g, &model, &pair)?;
            batch_loss = Some(match batch_loss {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let mut loss = batch_loss.expect("batch_size >= 1");
        if cfg.batch_size > 1 {
            loss = g.scale(loss, T::ONE / T::from_usize(cfg.batch_size))?;
        }
        let loss_val = g.value_scalar(loss)?.to_f64();
        if !loss_val.is_finite() {
            let msg = format!("non-finite loss at step {step}, aborting");
            if let Some(good) = last_good {
                model.set = good;
            }
            return Ok(TrainOutcome {
                model,
                loss_log: log,
                aborted: Some(msg),
            });
        }
        log.push_str(&format!("{step}\t{loss_val:.6}\n"));
        last_good = Some(model.set.clone());

        g.backward(loss)?;
        let grads = collect_grads(&g, &model.set);
        let halvings = milestone_steps.iter().filter(|&&m| step >= m).count();
        let lr_scale = 0.5f64.powi(halvings as i32);
        adamw_step(&mut model.set, &grads, &mut state, &hyper, lr_scale)?;
    }
    Ok(TrainOutcome {
        model,
        loss_log: log,
        aborted: None,
    })
}

#[derive(Clone, Debug)]
pub struct EvalSpec {
    pub pairs: usize,
    pub seed: u64,
    pub warp: WarpSpec,
    pub alphas: Vec<f64>,
    pub keypoints_per_pair: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            pairs: 16,
            seed: 17,
            warp: WarpSpec::translation(8.0),
            alphas: vec![0.05, 0.10, 0.15],
            keypoints_per_pair: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub pairs: usize,
    pub aepe_mean: f64,
    pub aepe_median: f64,
    /// (alpha, pck) in alpha order
    pub pck: Vec<(f64, f64)>,
}

impl EvalReport {
    /// `name=value` lines, deterministic formatting.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("pairs={}\n", self.pairs));
        out.push_str(&format!("aepe_mean={:.6}\n", self.aepe_mean));
        out.push_str(&format!("aepe_median={:.6}\n", self.aepe_median));
        for (alpha, v) in &self.pck {
            out.push_str(&format!("pck@{alpha:.2}={v:.6}\n"));
        }
        out
    }
}

/// Deterministic metric aggregation over a seeded synthetic test set.
/// The final flow comes from the fused volume, is rescaled to image
/// resolution, and is scored on valid pixels.
pub fn evaluate<T: Scalar>(model: &Model<T>, spec: &EvalSpec) -> Result<EvalReport> {
    if spec.pairs == 0 {
        return Err(Error::contract("evaluate: need at least one pair"));
    }
    let size = model.cfg.image_size();
    let mut per_pair_aepe: Vec<f64> = Vec::with_capacity(spec.pairs);
    let mut pck_hits: Vec<(usize, usize)> = spec.alphas.iter().map(|_| (0usize, 0usize)).collect();

    for i in 0..spec.pairs {
        let seed = pair_seed(spec.seed, i as u64, true);
        let pair = gen_synthetic_pair(seed, size, &spec.warp)?;
        let mut g: Graph<T> = Graph::new();
        let out = model.forward(&mut g, &pair.target, &pair.source)?;
        let flow = out.final_flow.to_field(&g).rescale(size, size);
        let (mean, _) = aepe_stats(&flow, &pair.gt_flow, &pair.mask)?;
        per_pair_aepe.push(mean);

        // keypoint transfer on valid pixels of the flow grid
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4b50);
        let mut pred_pts = Vec::new();
        let mut gt_pts = Vec::new();
        let mut attempts = 0;
        while pred_pts.len() < spec.keypoints_per_pair && attempts < spec.keypoints_per_pair * 20 {
            attempts += 1;
            let x = rng.gen_range(0..size);
            let y = rng.gen_range(0..size);
            if !pair.mask[y * size + x] {
                continue;
            }
            let (gu, gv) = pair.gt_flow.uv_at(x, y);
            let (pu, pv) = flow.uv_at(x, y);
            gt_pts.push((x as f64 + gu as f64, y as f64 + gv as f64));
            pred_pts.push((x as f64 + pu as f64, y as f64 + pv as f64));
        }
        if !pred_pts.is_empty() {
            for (ai, &alpha) in spec.alphas.iter().enumerate() {
                let threshold = alpha * size as f64;
                let hits = pred_pts
                    .iter()
                    .zip(&gt_pts)
                    .filter(|(&(px, py), &(gx, gy))| {
                        ((px - gx).powi(2) + (py - gy).powi(2)).sqrt() <= threshold
                    })
                    .count();
                pck_hits[ai].0 += hits;
                pck_hits[ai].1 += pred_pts.len();
            }
        }
    }

    let aepe_mean = per_pair_aepe.iter().sum::<f64>() / per_pair_aepe.len() as f64;
    let mut sorted = per_pair_aepe.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let aepe_median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let pck_vals = spec
        .alphas
        .iter()
        .zip(&pck_hits)
        .map(|(&a, &(hits, total))| (a, if total > 0 { hits as f64 / total as f64 } else { 0.0 }))
        .collect();
    Ok(EvalReport {
        pairs: spec.pairs,
        aepe_mean,
        aepe_median,
        pck: pck_vals,
    })
}
