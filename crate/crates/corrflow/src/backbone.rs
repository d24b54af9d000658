//! Toy multi-level feature extractor.
//!
//! A pretrained backbone is out of scope here; instead a short stack
//! of stride-2 "conv" blocks (3x3 local mixing via unfold + matmul,
//! relu, layer norm) produces L pyramid levels, coarsest first. Each
//! level is kept in two variants: raw (backbone channels, used for raw
//! correlations) and projected (linear map to the working channel
//! width followed by per-token l2 normalization).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{normal_init, ones, zeros, ParamGroup, ParamId, ParamSet};
use crate::tensor::{Graph, NodeId, Scalar};

const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-8;

/// One pyramid level of per-token features: `data` is a row-major
/// token list of shape [h*w x channels]. Levels are indexed coarse to
/// fine; level l+1 doubles the spatial size of level l.
#[derive(Clone, Copy, Debug)]
pub struct FeatureLevel {
    pub level: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: NodeId,
}

impl FeatureLevel {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// Raw and projected variants of every level, coarsest first.
pub struct FeaturePyramid {
    pub raw: Vec<FeatureLevel>,
    pub projected: Vec<FeatureLevel>,
}

struct ConvBlockIds {
    weight: ParamId, // [9*c_in x c_out]
    bias: ParamId,   // [c_out]
    ln_gamma: ParamId,
    ln_beta: ParamId,
    c_out: usize,
}

/// Parameters of the extractor: L+1 stride-2 blocks plus one linear
/// projection per level.
pub struct BackboneParams {
    blocks: Vec<ConvBlockIds>,
    projections: Vec<ParamId>, // per level, [c_feat x proj_dim]
    pub levels: usize,
    pub channels: usize,
    pub proj_dim: usize,
}

impl BackboneParams {
    /// Registers all extractor weights. `levels` pyramid levels over
    /// `channels`-wide raw features, projected to `proj_dim`.
    pub fn build<T: Scalar>(
        set: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        levels: usize,
        channels: usize,
        proj_dim: usize,
    ) -> Self {
        let mut blocks = Vec::new();
        for b in 0..levels + 1 {
            let c_in = if b == 0 { 3 } else { channels };
            let name = format!("backbone.block{b}");
            blocks.push(ConvBlockIds {
                weight: set.add(
                    format!("{name}.weight"),
                    vec![9 * c_in, channels],
                    normal_init(rng, &[9 * c_in, channels], 0.02),
                    ParamGroup::Backbone,
                ),
                bias: set.add(
                    format!("{name}.bias"),
                    vec![channels],
                    zeros(&[channels]),
                    ParamGroup::Backbone,
                ),
                ln_gamma: set.add(
                    format!("{name}.ln_gamma"),
                    vec![channels],
                    ones(&[channels]),
                    ParamGroup::Backbone,
                ),
                ln_beta: set.add(
                    format!("{name}.ln_beta"),
                    vec![channels],
                    zeros(&[channels]),
                    ParamGroup::Backbone,
                ),
                c_out: channels,
            });
        }
        // the channel-reduction projections feed the attention layers
        // and train at the main rate; only the conv stack is held at
        // the slow backbone rate
        let projections = (0..levels)
            .map(|l| {
                set.add(
                    format!("backbone.proj{l}.weight"),
                    vec![channels, proj_dim],
                    normal_init(rng, &[channels, proj_dim], 0.02),
                    ParamGroup::Main,
                )
            })
            .collect();
        BackboneParams {
            blocks,
            projections,
            levels,
            channels,
            proj_dim,
        }
    }
}

/// Runs the stride-2 stack on an [H*W x 3] image node and returns L
/// levels, raw and projected, coarsest first. Level l has spatial
/// H/2^(L+1-l) x W/2^(L+1-l), so H and W must divide by 2^(L+1).
pub fn extract_pyramid<T: Scalar>(
    g: &mut Graph<T>,
    image: NodeId,
    h: usize,
    w: usize,
    set: &ParamSet<T>,
    p: &BackboneParams,
) -> Result<FeaturePyramid> {
    let div = 1usize << (p.levels + 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::contract(format!(
            "extract_pyramid: image {h}x{w} not divisible by 2^{} = {div}",
            p.levels + 1
        )));
    }
    if g.shape(image) != [h * w, 3] {
        return Err(Error::Shape {
            op: "extract_pyramid",
            lhs: g.shape(image).to_vec(),
            rhs: vec![h * w, 3],
        });
    }

    let mut x = image;
    let (mut ch, mut cw) = (h, w);
    // fine-to-coarse stack; the last `levels` block outputs become the
    // pyramid, reversed so index 0 is coarsest
    let mut fine_to_coarse: Vec<FeatureLevel> = Vec::new();
    for (b, blk) in p.blocks.iter().enumerate() {
        let unfolded = g.unfold2d(x, ch, cw, 3, 2)?;
        let weight = set.node(g, blk.weight);
        let bias = set.node(g, blk.bias);
        let mut y = g.matmul(unfolded, weight)?;
        y = g.add_bias(y, bias)?;
        y = g.relu(y)?;
        let gamma = set.node(g, blk.ln_gamma);
        let beta = set.node(g, blk.ln_beta);
        y = g.layer_norm(y, gamma, beta, T::from_f64(LN_EPS))?;
        ch /= 2;
        cw /= 2;
        x = y;
        if b >= 1 {
            fine_to_coarse.push(FeatureLevel {
                level: 0, // fixed up below
                h: ch,
                w: cw,
                channels: blk.c_out,
                data: x,
            });
        }
    }
    let mut raw: Vec<FeatureLevel> = fine_to_coarse.into_iter().rev().collect();
    for (l, lvl) in raw.iter_mut().enumerate() {
        lvl.level = l;
    }

    let mut projected = Vec::with_capacity(p.levels);
    for (l, lvl) in raw.iter().enumerate() {
        projected.push(project_features(g, lvl, set, p.projections[l], p.proj_dim)?);
    }
    Ok(FeaturePyramid { raw, projected })
}

/// Linear channel map followed by per-token l2 normalization. Token
/// count and spatial size are preserved.
pub fn project_features<T: Scalar>(
    g: &mut Graph<T>,
    f: &FeatureLevel,
    set: &ParamSet<T>,
    weight: ParamId,
    proj_dim: usize,
) -> Result<FeatureLevel> {
    let w_node = set.node(g, weight);
    let ws = g.shape(w_node);
    if ws != [f.channels, proj_dim] {
        return Err(Error::Shape {
            op: "project_features",
            lhs: vec![f.tokens(), f.channels],
            rhs: ws.to_vec(),
        });
    }
    let mapped = g.matmul(f.data, w_node)?;
    let data = g.l2_normalize_lastdim(mapped, T::from_f64(L2_EPS))?;
    Ok(FeatureLevel {
        level: f.level,
        h: f.h,
        w: f.w,
        channels: proj_dim,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn image_node<T: Scalar>(g: &mut Graph<T>, h: usize, w: usize, vals: Vec<T>) -> NodeId {
        g.leaf(vec![h * w, 3], vals, false).unwrap()
    }

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
        (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn level_sizes_follow_stride_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set: ParamSet<f64> = ParamSet::new();
        let p = BackboneParams::build(&mut set, &mut rng, 3, 4, 8);
        let mut g: Graph<f64> = Graph::new();
        let img = image_node(&mut g, 64, 64, rand_image(&mut rng, 64, 64));
        let pyr = extract_pyramid(&mut g, img, 64, 64, &set, &p).unwrap();
        let dims: Vec<(usize, usize)> = pyr.raw.iter().map(|l| (l.h, l.w)).collect();
        assert_eq!(dims, vec![(4, 4), (8, 8), (16, 16)]);
        for (l, lvl) in pyr.raw.iter().enumerate() {
            assert_eq!(lvl.level, l);
            assert_eq!(g.shape(lvl.data), &[lvl.h * lvl.w, 4]);
        }
    }

    #[test]
    fn non_divisible_image_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut set: ParamSet<f64> = ParamSet::new();
        let p = BackboneParams::build(&mut set, &mut rng, 3, 4, 8);
        let mut g: Graph<f64> = Graph::new();
        let img = image_node(&mut g, 40, 40, vec![0.0; 40 * 40 * 3]);
        assert!(extract_pyramid(&mut g, img, 40, 40, &set, &p).is_err());
    }

    #[test]
    fn identical_images_give_bit_identical_pyramids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set: ParamSet<f64> = ParamSet::new();
        let p = BackboneParams::build(&mut set, &mut rng, 2, 4, 8);
        let vals = rand_image(&mut rng, 32, 32);
        let mut g: Graph<f64> = Graph::new();
        let img1 = image_node(&mut g, 32, 32, vals.clone());
        let img2 = image_node(&mut g, 32, 32, vals);
        let pyr1 = extract_pyramid(&mut g, img1, 32, 32, &set, &p).unwrap();
        let pyr2 = extract_pyramid(&mut g, img2, 32, 32, &set, &p).unwrap();
        for (a, b) in pyr1.projected.iter().zip(&pyr2.projected) {
            assert_eq!(g.values(a.data), g.values(b.data));
        }
    }

    #[test]
    fn zero_image_zero_params_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set: ParamSet<f64> = ParamSet::new();
        let p = BackboneParams::build(&mut set, &mut rng, 2, 4, 8);
        // zero every weight and bias; layer-norm affines stay (1, 0)
        for (_, e) in set.iter_mut() {
            if e.name.contains("weight") || e.name.contains("bias") {
                e.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g: Graph<f64> = Graph::new();
        let img = image_node(&mut g, 32, 32, vec![0.0; 32 * 32 * 3]);
        let pyr = extract_pyramid(&mut g, img, 32, 32, &set, &p).unwrap();
        for lvl in pyr.raw.iter().chain(&pyr.projected) {
            assert!(g.values(lvl.data).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projection_normalizes_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set: ParamSet<f64> = ParamSet::new();
        let p = BackboneParams::build(&mut set, &mut rng, 2, 4, 8);
        let mut g: Graph<f64> = Graph::new();
        let img = image_node(&mut g, 32, 32, rand_image(&mut rng, 32, 32));
        let pyr = extract_pyramid(&mut g, img, 32, 32, &set, &p).unwrap();
        for lvl in &pyr.projected {
            assert_eq!(lvl.channels, 8);
            for token in g.values(lvl.data).chunks(8) {
                let n: f64 = token.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(n == 0.0 || (n - 1.0).abs() < 1e-5, "norm {n}");
            }
        }
    }

    #[test]
    fn identity_projection_keeps_unit_tokens() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let mut eye = vec![0.0; 4];
        eye[0] = 1.0;
        eye[3] = 1.0;
        let weight = set.add("w", vec![2, 2], eye, ParamGroup::Backbone);
        let mut g: Graph<f64> = Graph::new();
        let data = g
            .leaf(vec![2, 2], vec![1.0, 0.0, 0.6, 0.8], false)
            .unwrap();
        let f = FeatureLevel { level: 0, h: 2, w: 1, channels: 2, data };
        let out = project_features(&mut g, &f, &set, weight, 2).unwrap();
        let got = g.values(out.data);
        assert!((got[0] - 1.0).abs() < 1e-12 && got[1].abs() < 1e-12);
        assert!((got[2] - 0.6).abs() < 1e-12 && (got[3] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut set: ParamSet<f64> = ParamSet::new();
        let wv: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
        let weight = set.add("w", vec![3, 4], wv.clone(), ParamGroup::Backbone);
        let xv: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut g: Graph<f64> = Graph::new();
        let data = g.leaf(vec![2, 3], xv.clone(), false).unwrap();
        let f = FeatureLevel { level: 0, h: 2, w: 1, channels: 3, data };
        let out = project_features(&mut g, &f, &set, weight, 4).unwrap();
        for t in 0..2 {
            let mut row = [0.0; 4];
            for (c, r) in row.iter_mut().enumerate() {
                for k in 0..3 {
                    *r += xv[t * 3 + k] * wv[k * 4 + c];
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            for (c, r) in row.iter().enumerate() {
                let got = g.values(out.data)[t * 4 + c];
                assert!((got - r / norm).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_dim_mismatch_is_shape_error() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let weight = set.add("w", vec![3, 4], vec![0.0; 12], ParamGroup::Backbone);
        let mut g: Graph<f64> = Graph::new();
        let data = g.leaf(vec![2, 2], vec![0.0; 4], false).unwrap();
        let f = FeatureLevel { level: 0, h: 2, w: 1, channels: 2, data };
        assert!(project_features(&mut g, &f, &set, weight, 4).is_err());
    }
}
