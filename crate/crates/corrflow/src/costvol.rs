//! 4D cost volumes: construction, transposition, separable 4D
//! convolution, and 4D resizing.
//!
//! A volume over source grid (hs, ws) and target grid (ht, wt) is
//! stored as its matrix view [(hs*ws) x (ht*wt)]; rows are source
//! positions, columns target positions. The separable 4D convolution
//! factors into a 2D convolution over the source dims (target cells as
//! channels) followed by one over the target dims.

use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureLevel;
use crate::error::{Error, Result};
use crate::params::{normal_init, ParamGroup, ParamId, ParamSet};
use crate::tensor::{Graph, NodeId, Scalar};

/// Handle to a 4D similarity volume living in a graph.
#[derive(Clone, Copy, Debug)]
pub struct CostVolume {
    pub h_src: usize,
    pub w_src: usize,
    pub h_tgt: usize,
    pub w_tgt: usize,
    pub data: NodeId,
}

impl CostVolume {
    pub fn src_cells(&self) -> usize {
        self.h_src * self.w_src
    }

    pub fn tgt_cells(&self) -> usize {
        self.h_tgt * self.w_tgt
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.h_src, self.w_src, self.h_tgt, self.w_tgt)
    }
}

/// C[i][j] = dot(source token i, target token j); equal channel dims
/// required. Equals matmul(D_s, D_t^T) and is differentiable into both
/// feature sets.
pub fn build_cost_volume<T: Scalar>(
    g: &mut Graph<T>,
    d_s: &FeatureLevel,
    d_t: &FeatureLevel,
) -> Result<CostVolume> {
    if d_s.channels != d_t.channels {
        return Err(Error::Shape {
            op: "build_cost_volume",
            lhs: vec![d_s.tokens(), d_s.channels],
            rhs: vec![d_t.tokens(), d_t.channels],
        });
    }
    let t_t = g.transpose2d(d_t.data)?;
    let data = g.matmul(d_s.data, t_t)?;
    Ok(CostVolume {
        h_src: d_s.h,
        w_src: d_s.w,
        h_tgt: d_t.h,
        w_tgt: d_t.w,
        data,
    })
}

/// Swaps source and target roles: out[j][i] = in[i][j].
pub fn transpose_cost<T: Scalar>(g: &mut Graph<T>, c: &CostVolume) -> Result<CostVolume> {
    let data = g.transpose2d(c.data)?;
    Ok(CostVolume {
        h_src: c.h_tgt,
        w_src: c.w_tgt,
        h_tgt: c.h_src,
        w_tgt: c.w_src,
        data,
    })
}

/// Per-stage post-processing applied after each spatial convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePost {
    pub relu: bool,
    /// Whole-volume standardization; for a single-channel volume this
    /// is the layer-norm analogue that commutes with transposition.
    pub norm: bool,
}

impl StagePost {
    pub const NONE: StagePost = StagePost { relu: false, norm: false };
    pub const RELU_NORM: StagePost = StagePost { relu: true, norm: true };
}

/// Parameters of one separable 4D convolution: a k x k kernel over the
/// source dims, another over the target dims, a shared stride, and
/// per-stage activation flags. Volumes are single-channel.
#[derive(Clone, Copy, Debug)]
pub struct SeparableConv4dParams {
    pub kernel_src: ParamId,
    pub kernel_tgt: ParamId,
    pub stride: usize,
    pub post_src: StagePost,
    pub post_tgt: StagePost,
}

impl SeparableConv4dParams {
    /// Registers two k x k kernels under `name` with seeded init.
    pub fn build<T: Scalar>(
        set: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        k: usize,
        stride: usize,
        post: StagePost,
    ) -> Self {
        let kernel_src = set.add(
            format!("{name}.kernel_src"),
            vec![k, k],
            normal_init(rng, &[k, k], 0.02),
            ParamGroup::Main,
        );
        let kernel_tgt = set.add(
            format!("{name}.kernel_tgt"),
            vec![k, k],
            normal_init(rng, &[k, k], 0.02),
            ParamGroup::Main,
        );
        SeparableConv4dParams {
            kernel_src,
            kernel_tgt,
            stride,
            post_src: post,
            post_tgt: post,
        }
    }
}

const NORM_EPS: f64 = 1e-5;

/// Separable 4D convolution with zero padding k/2. Stage 1 convolves
/// the source dims treating target cells as batch; stage 2 convolves
/// the target dims treating the (possibly strided) source cells as
/// batch. Stride 2 in both stages halves all four dims.
pub fn separable_conv4d<T: Scalar>(
    g: &mut Graph<T>,
    c: &CostVolume,
    set: &ParamSet<T>,
    p: &SeparableConv4dParams,
) -> Result<CostVolume> {
    let k_src = set.node(g, p.kernel_src);
    let k_tgt = set.node(g, p.kernel_tgt);
    separable_conv4d_nodes(g, c, k_src, k_tgt, p.stride, p.post_src, p.post_tgt)
}

/// Same as [`separable_conv4d`] but over pre-bound kernel nodes.
pub fn separable_conv4d_nodes<T: Scalar>(
    g: &mut Graph<T>,
    c: &CostVolume,
    kernel_src: NodeId,
    kernel_tgt: NodeId,
    stride: usize,
    post_src: StagePost,
    post_tgt: StagePost,
) -> Result<CostVolume> {
    let ks = g.shape(kernel_src).to_vec();
    if ks.len() != 2 || ks[0] != ks[1] || ks[0] % 2 == 0 {
        return Err(Error::contract(format!(
            "separable_conv4d: kernels must be square with odd size, got {ks:?}"
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::contract("separable_conv4d: stride must be 1 or 2"));
    }

    // stage 1: source dims are the grid, target cells the channels
    let mut x = g.conv2d_shared(c.data, kernel_src, c.h_src, c.w_src, stride)?;
    x = apply_post(g, x, post_src)?;
    let (h_src, w_src) = (c.h_src.div_ceil(stride), c.w_src.div_ceil(stride));

    // stage 2: flip the matrix view so target dims become the grid
    let mut xt = g.transpose2d(x)?;
    xt = g.conv2d_shared(xt, kernel_tgt, c.h_tgt, c.w_tgt, stride)?;
    xt = apply_post(g, xt, post_tgt)?;
    let (h_tgt, w_tgt) = (c.h_tgt.div_ceil(stride), c.w_tgt.div_ceil(stride));

    let data = g.transpose2d(xt)?;
    Ok(CostVolume {
        h_src,
        w_src,
        h_tgt,
        w_tgt,
        data,
    })
}

fn apply_post<T: Scalar>(g: &mut Graph<T>, x: NodeId, post: StagePost) -> Result<NodeId> {
    let mut out = x;
    if post.relu {
        out = g.relu(out)?;
    }
    if post.norm {
        out = g.standardize_all(out, T::from_f64(NORM_EPS))?;
    }
    Ok(out)
}

/// Transpose-commuting wrapper: applies the convolution to the volume
/// and to its transpose and averages, mirroring the bidirectional
/// treatment of the attention layers. sym(X^T) == sym(X)^T bit-exactly
/// because the two summands merely swap under transposition.
pub fn separable_conv4d_sym<T: Scalar>(
    g: &mut Graph<T>,
    c: &CostVolume,
    set: &ParamSet<T>,
    p: &SeparableConv4dParams,
) -> Result<CostVolume> {
    let fwd = separable_conv4d(g, c, set, p)?;
    let ct = transpose_cost(g, c)?;
    let bwd = separable_conv4d(g, &ct, set, p)?;
    let bwd_t = transpose_cost(g, &bwd)?;
    if g.shape(fwd.data) != g.shape(bwd_t.data) {
        return Err(Error::contract(
            "separable_conv4d_sym requires a square-grid volume",
        ));
    }
    let sum = g.add(fwd.data, bwd_t.data)?;
    let data = g.scale(sum, T::from_f64(0.5))?;
    Ok(CostVolume { data, ..fwd })
}

/// Separable bilinear 4D resize, align-corners true: first over the
/// source dims, then over the target dims. Same-size calls return the
/// input node untouched.
pub fn resize_cost4d<T: Scalar>(
    g: &mut Graph<T>,
    c: &CostVolume,
    dims: (usize, usize, usize, usize),
) -> Result<CostVolume> {
    let (h_src, w_src, h_tgt, w_tgt) = dims;
    if h_src == 0 || w_src == 0 || h_tgt == 0 || w_tgt == 0 {
        return Err(Error::contract("resize_cost4d: target dims must be positive"));
    }
    if dims == c.dims() {
        return Ok(*c);
    }
    let x = g.bilinear_resize2d(c.data, c.h_src, c.w_src, h_src, w_src)?;
    let xt = g.transpose2d(x)?;
    let yt = g.bilinear_resize2d(xt, c.h_tgt, c.w_tgt, h_tgt, w_tgt)?;
    let data = g.transpose2d(yt)?;
    Ok(CostVolume {
        h_src,
        w_src,
        h_tgt,
        w_tgt,
        data,
    })
}

/// Transpose-commuting resize used by the pyramid fusion; same
/// symmetrization trick as [`separable_conv4d_sym`].
pub fn resize_cost4d_sym<T: Scalar>(
    g: &mut Graph<T>,
    c: &CostVolume,
    dims: (usize, usize, usize, usize),
) -> Result<CostVolume> {
    if dims == c.dims() {
        return Ok(*c);
    }
    let fwd = resize_cost4d(g, c, dims)?;
    let ct = transpose_cost(g, c)?;
    let bwd = resize_cost4d(g, &ct, (dims.2, dims.3, dims.0, dims.1))?;
    let bwd_t = transpose_cost(g, &bwd)?;
    let sum = g.add(fwd.data, bwd_t.data)?;
    let data = g.scale(sum, T::from_f64(0.5))?;
    Ok(CostVolume { data, ..fwd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn feature<T: Scalar>(
        g: &mut Graph<T>,
        h: usize,
        w: usize,
        ch: usize,
        vals: Vec<T>,
    ) -> FeatureLevel {
        let data = g.leaf(vec![h * w, ch], vals, true).unwrap();
        FeatureLevel { level: 0, h, w, channels: ch, data }
    }

    fn rand_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn orthonormal_features_give_identity_volume() {
        let mut g: Graph<f64> = Graph::new();
        // 2x1 grid of 2-channel orthonormal tokens
        let d = feature(&mut g, 2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let c = build_cost_volume(&mut g, &d, &d).unwrap();
        assert_eq!(g.values(c.data), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn orthogonal_feature_sets_give_zero_volume() {
        let mut g: Graph<f64> = Graph::new();
        let d_s = feature(&mut g, 2, 1, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let d_t = feature(&mut g, 2, 1, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let c = build_cost_volume(&mut g, &d_s, &d_t).unwrap();
        assert_eq!(g.values(c.data), &[0.0; 4]);
    }

    #[test]
    fn cost_volume_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w, ch) = (2, 2, 5);
        let sv = rand_vals(&mut rng, h * w * ch);
        let tv = rand_vals(&mut rng, h * w * ch);
        let mut g: Graph<f64> = Graph::new();
        let d_s = feature(&mut g, h, w, ch, sv.clone());
        let d_t = feature(&mut g, h, w, ch, tv.clone());
        let c = build_cost_volume(&mut g, &d_s, &d_t).unwrap();
        for i in 0..h * w {
            for j in 0..h * w {
                let mut dot = 0.0;
                for k in 0..ch {
                    dot += sv[i * ch + k] * tv[j * ch + k];
                }
                assert!((g.values(c.data)[i * h * w + j] - dot).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut g: Graph<f64> = Graph::new();
        let d_s = feature(&mut g, 1, 1, 2, vec![1.0, 0.0]);
        let d_t = feature(&mut g, 1, 1, 3, vec![1.0, 0.0, 0.0]);
        assert!(build_cost_volume(&mut g, &d_s, &d_t).is_err());
    }

    #[test]
    fn transpose_is_involution_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g: Graph<f64> = Graph::new();
        let vals = rand_vals(&mut rng, 36);
        let data = g.constant(vec![6, 6], vals.clone()).unwrap();
        let c = CostVolume { h_src: 2, w_src: 3, h_tgt: 2, w_tgt: 3, data };
        let ct = transpose_cost(&mut g, &c).unwrap();
        let ctt = transpose_cost(&mut g, &ct).unwrap();
        assert_eq!(g.values(ctt.data), vals.as_slice());
        // index-swap oracle
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(g.values(ct.data)[j * 6 + i], vals[i * 6 + j]);
            }
        }
    }

    #[test]
    fn symmetric_inputs_give_symmetric_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g: Graph<f64> = Graph::new();
        let vals = rand_vals(&mut rng, 12);
        let d = feature(&mut g, 2, 2, 3, vals);
        let c = build_cost_volume(&mut g, &d, &d).unwrap();
        let ct = transpose_cost(&mut g, &c).unwrap();
        assert_eq!(g.values(c.data), g.values(ct.data));
    }

    #[test]
    fn build_commutes_with_transpose_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g: Graph<f64> = Graph::new();
        let sv = rand_vals(&mut rng, 12);
        let tv = rand_vals(&mut rng, 12);
        let d_s = feature(&mut g, 2, 2, 3, sv);
        let d_t = feature(&mut g, 2, 2, 3, tv);
        let fwd = build_cost_volume(&mut g, &d_s, &d_t).unwrap();
        let rev = build_cost_volume(&mut g, &d_t, &d_s).unwrap();
        let rev_t = transpose_cost(&mut g, &rev).unwrap();
        assert_eq!(g.values(fwd.data), g.values(rev_t.data));
    }

    #[test]
    fn delta_kernel_conv_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut set: ParamSet<f64> = ParamSet::new();
        let kernel_src = set.add("t.ks", vec![1, 1], vec![1.0], ParamGroup::Main);
        let kernel_tgt = set.add("t.kt", vec![1, 1], vec![1.0], ParamGroup::Main);
        let p = SeparableConv4dParams {
            kernel_src,
            kernel_tgt,
            stride: 1,
            post_src: StagePost::NONE,
            post_tgt: StagePost::NONE,
        };
        let mut g: Graph<f64> = Graph::new();
        let vals = rand_vals(&mut rng, 81);
        let data = g.constant(vec![9, 9], vals.clone()).unwrap();
        let c = CostVolume { h_src: 3, w_src: 3, h_tgt: 3, w_tgt: 3, data };
        let out = separable_conv4d(&mut g, &c, &set, &p).unwrap();
        assert_eq!(g.values(out.data), vals.as_slice());
    }

    #[test]
    fn ones_kernel_interior_sums_to_81() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let kernel_src = set.add("t.ks", vec![3, 3], vec![1.0; 9], ParamGroup::Main);
        let kernel_tgt = set.add("t.kt", vec![3, 3], vec![1.0; 9], ParamGroup::Main);
        let p = SeparableConv4dParams {
            kernel_src,
            kernel_tgt,
            stride: 1,
            post_src: StagePost::NONE,
            post_tgt: StagePost::NONE,
        };
        let mut g: Graph<f64> = Graph::new();
        let data = g.constant(vec![16, 16], vec![1.0; 256]).unwrap();
        let c = CostVolume { h_src: 4, w_src: 4, h_tgt: 4, w_tgt: 4, data };
        let out = separable_conv4d(&mut g, &c, &set, &p).unwrap();
        // interior in all four dims: 9 contributions per stage
        let idx = |ys: usize, xs: usize, yt: usize, xt: usize| (ys * 4 + xs) * 16 + yt * 4 + xt;
        assert_eq!(g.values(out.data)[idx(1, 1, 1, 1)], 81.0);
        assert_eq!(g.values(out.data)[idx(2, 2, 2, 2)], 81.0);
    }

    /// Brute-force 6-nested-loop oracle of the separable definition.
    fn naive_separable(
        x: &[f64],
        dims: (usize, usize, usize, usize),
        ks: &[f64],
        kt: &[f64],
        k: usize,
        stride: usize,
    ) -> Vec<f64> {
        let (hs, ws, ht, wt) = dims;
        let pad = k / 2;
        let (ohs, ows) = (hs.div_ceil(stride), ws.div_ceil(stride));
        let (oht, owt) = (ht.div_ceil(stride), wt.div_ceil(stride));
        // stage 1 over source dims
        let mut s1 = vec![0.0; ohs * ows * ht * wt];
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
                                let src =
                                    (iy as usize * ws + ix as usize) * ht * wt + ty * wt + tx;
                                acc += ks[dy * k + dx] * x[src];
                            }
                        }
                        s1[(oy * ows + ox) * ht * wt + ty * wt + tx] = acc;
                    }
                }
            }
        }
        // stage 2 over target dims
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
                                let src =
                                    (sy * ows + sx) * ht * wt + iy as usize * wt + ix as usize;
                                acc += kt[dy * k + dx] * s1[src];
                            }
                        }
                        out[(sy * ows + sx) * oht * owt + oy * owt + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv4d_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for stride in [1usize, 2] {
            let vals = rand_vals(&mut rng, 256);
            let ks = rand_vals(&mut rng, 9);
            let kt = rand_vals(&mut rng, 9);
            let mut set: ParamSet<f64> = ParamSet::new();
            let kernel_src = set.add("t.ks", vec![3, 3], ks.clone(), ParamGroup::Main);
            let kernel_tgt = set.add("t.kt", vec![3, 3], kt.clone(), ParamGroup::Main);
            let p = SeparableConv4dParams {
                kernel_src,
                kernel_tgt,
                stride,
                post_src: StagePost::NONE,
                post_tgt: StagePost::NONE,
            };
            let mut g: Graph<f64> = Graph::new();
            let data = g.constant(vec![16, 16], vals.clone()).unwrap();
            let c = CostVolume { h_src: 4, w_src: 4, h_tgt: 4, w_tgt: 4, data };
            let out = separable_conv4d(&mut g, &c, &set, &p).unwrap();
            let oracle = naive_separable(&vals, (4, 4, 4, 4), &ks, &kt, 3, stride);
            for (a, b) in g.values(out.data).iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn even_kernel_is_contract_error() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let kernel_src = set.add("t.ks", vec![2, 2], vec![1.0; 4], ParamGroup::Main);
        let kernel_tgt = set.add("t.kt", vec![2, 2], vec![1.0; 4], ParamGroup::Main);
        let p = SeparableConv4dParams {
            kernel_src,
            kernel_tgt,
            stride: 1,
            post_src: StagePost::NONE,
            post_tgt: StagePost::NONE,
        };
        let mut g: Graph<f64> = Graph::new();
        let data = g.constant(vec![4, 4], vec![0.0; 16]).unwrap();
        let c = CostVolume { h_src: 2, w_src: 2, h_tgt: 2, w_tgt: 2, data };
        assert!(matches!(
            separable_conv4d(&mut g, &c, &set, &p),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sym_conv_commutes_with_transpose_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals = rand_vals(&mut rng, 81);
        let mut set: ParamSet<f64> = ParamSet::new();
        let kernel_src = set.add("t.ks", vec![3, 3], rand_vals(&mut rng, 9), ParamGroup::Main);
        let kernel_tgt = set.add("t.kt", vec![3, 3], rand_vals(&mut rng, 9), ParamGroup::Main);
        let p = SeparableConv4dParams {
            kernel_src,
            kernel_tgt,
            stride: 1,
            post_src: StagePost::RELU_NORM,
            post_tgt: StagePost::RELU_NORM,
        };
        let mut g: Graph<f64> = Graph::new();
        let data = g.constant(vec![9, 9], vals.clone()).unwrap();
        let c = CostVolume { h_src: 3, w_src: 3, h_tgt: 3, w_tgt: 3, data };
        let a = separable_conv4d_sym(&mut g, &c, &set, &p).unwrap();
        let ct = transpose_cost(&mut g, &c).unwrap();
        let b = separable_conv4d_sym(&mut g, &ct, &set, &p).unwrap();
        let bt = transpose_cost(&mut g, &b).unwrap();
        assert_eq!(g.values(a.data), g.values(bt.data));
    }

    #[test]
    fn resize_same_size_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vals = rand_vals(&mut rng, 16);
        let mut g: Graph<f64> = Graph::new();
        let data = g.constant(vec![4, 4], vals.clone()).unwrap();
        let c = CostVolume { h_src: 2, w_src: 2, h_tgt: 2, w_tgt: 2, data };
        let same = resize_cost4d(&mut g, &c, (2, 2, 2, 2)).unwrap();
        assert_eq!(same.data, c.data);

        let const_data = g.constant(vec![4, 4], vec![0.3; 16]).unwrap();
        let cc = CostVolume { h_src: 2, w_src: 2, h_tgt: 2, w_tgt: 2, data: const_data };
        let up = resize_cost4d(&mut g, &cc, (3, 3, 3, 3)).unwrap();
        for &v in g.values(up.data) {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_matches_two_pass_2d_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals = rand_vals(&mut rng, 16);
        let mut g: Graph<f64> = Graph::new();
        let data = g.constant(vec![4, 4], vals.clone()).unwrap();
        let c = CostVolume { h_src: 2, w_src: 2, h_tgt: 2, w_tgt: 2, data };
        let out = resize_cost4d(&mut g, &c, (4, 4, 4, 4)).unwrap();

        // oracle: 2d bilinear over source dims, then over target dims
        let lerp1d = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let i0 = (pos.floor() as usize).min(n_in - 1);
            (i0, (i0 + 1).min(n_in - 1), pos - pos.floor())
        };
        let bil2d = |f: &dyn Fn(usize, usize) -> f64, h: usize, w: usize, oy: usize, ox: usize| {
            let (y0, y1, wy) = lerp1d(oy, h, 4);
            let (x0, x1, wx) = lerp1d(ox, w, 4);
            (1.0 - wy) * (1.0 - wx) * f(y0, x0)
                + (1.0 - wy) * wx * f(y0, x1)
                + wy * (1.0 - wx) * f(y1, x0)
                + wy * wx * f(y1, x1)
        };
        for sy in 0..4 {
            for sx in 0..4 {
                for ty in 0..4 {
                    for tx in 0..4 {
                        // pass 2 over target dims of the pass-1 result
                        let pass1 = |py: usize, px: usize| {
                            bil2d(
                                &|qy: usize, qx: usize| vals[(qy * 2 + qx) * 4 + py * 2 + px],
                                2,
                                2,
                                sy,
                                sx,
                            )
                        };
                        let expect = bil2d(&pass1, 2, 2, ty, tx);
                        let got = g.values(out.data)[(sy * 4 + sx) * 16 + ty * 4 + tx];
                        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
                    }
                }
            }
        }
    }

    #[test]
    fn resize_preserves_value_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let vals = rand_vals(&mut rng, 81);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut g: Graph<f64> = Graph::new();
            let data = g.constant(vec![9, 9], vals.clone()).unwrap();
            let c = CostVolume { h_src: 3, w_src: 3, h_tgt: 3, w_tgt: 3, data };
            let out = resize_cost4d(&mut g, &c, (5, 5, 5, 5)).unwrap();
            for &v in g.values(out.data) {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn unit_features_bound_volume_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g: Graph<f64> = Graph::new();
        let raw_s = g.leaf(vec![4, 3], rand_vals(&mut rng, 12), false).unwrap();
        let raw_t = g.leaf(vec![4, 3], rand_vals(&mut rng, 12), false).unwrap();
        let ns = g.l2_normalize_lastdim(raw_s, 1e-8).unwrap();
        let nt = g.l2_normalize_lastdim(raw_t, 1e-8).unwrap();
        let d_s = FeatureLevel { level: 0, h: 2, w: 2, channels: 3, data: ns };
        let d_t = FeatureLevel { level: 0, h: 2, w: 2, channels: 3, data: nt };
        let c = build_cost_volume(&mut g, &d_s, &d_t).unwrap();
        for &v in g.values(c.data) {
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
        }
    }
}
