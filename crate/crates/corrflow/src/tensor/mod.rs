//! Minimal reverse-mode differentiable tensor core.
//!
//! A [`Graph`] is a tape of immutable ND value nodes plus the op that
//! produced each one. The op set is fixed and data-independent — no
//! broadcasting — which keeps the surface small enough to gradient-test
//! exhaustively. Forward kernels may run in parallel internally but
//! compute every output element as a fixed-order reduction, so results
//! are bit-identical for any thread count. Values are immutable after
//! creation; only grad slots mutate.
//!
//! `backward` accumulates: grads sum across fan-out and across repeated
//! `backward` calls. Build a fresh graph per training step.

mod gradcheck;
mod kernels;
mod scalar;

pub use gradcheck::{finite_difference_check, FdReport};
pub use scalar::{Precision, Scalar};

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddBias { x: NodeId, bias: NodeId },
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose2d { x: NodeId, rows: usize, cols: usize },
    SoftmaxLastDim { x: NodeId, scale: T },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    L2NormalizeLastDim { x: NodeId, eps: T },
    StandardizeAll { x: NodeId, eps: T },
    Relu(NodeId),
    EluPlusOne(NodeId),
    Recip(NodeId),
    ConcatLastDim { a: NodeId, b: NodeId, ca: usize, cb: usize },
    SumAll(NodeId),
    SumAxis { x: NodeId, axis: usize },
    MeanAxis { x: NodeId, axis: usize },
    ScaleRows { x: NodeId, s: NodeId },
    AvgPool2d { x: NodeId, h: usize, w: usize, k: usize },
    BilinearResize2d { x: NodeId, h: usize, w: usize, oh: usize, ow: usize },
    Unfold2d { x: NodeId, h: usize, w: usize, k: usize, stride: usize },
    Conv2dShared { x: NodeId, kernel: NodeId, h: usize, w: usize, k: usize, stride: usize },
    EuclidLastDim(NodeId),
    Reshape(NodeId),
}

struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bindings: HashMap<usize, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> Result<NodeId> {
        if numel(&shape) != values.len() {
            return Err(Error::contract(format!(
                "leaf: shape {:?} implies {} values, got {}",
                shape,
                numel(&shape),
                values.len()
            )));
        }
        Ok(self.push(shape, values, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<NodeId> {
        self.leaf(shape, values, false)
    }

    pub fn scalar_const(&mut self, v: T) -> NodeId {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    /// Binds an external parameter (keyed by its registry index) as a
    /// grad-requiring leaf, reusing the node on repeated binds so that
    /// fan-out gradients accumulate onto one slot.
    pub fn bind_param(&mut self, key: usize, shape: &[usize], values: &[T]) -> NodeId {
        if let Some(&id) = self.bindings.get(&key) {
            return id;
        }
        let id = self.push(shape.to_vec(), values.to_vec(), Op::Leaf, true);
        self.bindings.insert(key, id);
        id
    }

    pub fn bound_node(&self, key: usize) -> Option<NodeId> {
        self.bindings.get(&key).copied()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value_scalar(&self, id: NodeId) -> Result<T> {
        let v = self.values(id);
        if v.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar node, got shape {:?}",
                self.shape(id)
            )));
        }
        Ok(v[0])
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::contract(format!("{op}: expected 2-d node, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Last-dim decomposition: (rows, cols) where rows spans all
    /// leading dims.
    fn lastdim(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.is_empty() {
            return Err(Error::contract(format!("{op}: node has empty shape")));
        }
        let cols = s[s.len() - 1];
        Ok((numel(s) / cols, cols))
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), values, op, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let values = self.values(x).iter().map(|&v| v * factor).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), values, Op::Scale(x, factor), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let values = self
            .values(x)
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), values, Op::Relu(x), rg))
    }

    /// elu(x) + 1: x + 1 for x > 0, exp(x) otherwise. Strictly positive
    /// feature map used by kernelized attention.
    pub fn elu_plus_one(&mut self, x: NodeId) -> Result<NodeId> {
        let values = self
            .values(x)
            .iter()
            .map(|&v| if v > T::ZERO { v + T::ONE } else { v.exp() })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), values, Op::EluPlusOne(x), rg))
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        let mut values = Vec::with_capacity(self.values(x).len());
        for &v in self.values(x) {
            let r = T::ONE / v;
            if !r.is_finite() {
                return Err(Error::numeric(format!("recip: non-finite result for input {v}")));
            }
            values.push(r);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), values, Op::Recip(x), rg))
    }

    /// y[i, :] = x[i, :] + bias
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.lastdim("add_bias", x)?;
        if self.shape(bias) != [cols] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut values = Vec::with_capacity(rows * cols);
        let xv = self.values(x);
        let bv = self.values(bias);
        for r in 0..rows {
            for c in 0..cols {
                values.push(xv[r * cols + c] + bv[c]);
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), values, Op::AddBias { x, bias }, rg))
    }

    /// y[i, :] = x[i, :] * s[i]
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.lastdim("scale_rows", x)?;
        if self.shape(s) != [rows] {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let xv = self.values(x);
        let sv = self.values(s);
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(xv[r * cols + c] * sv[r]);
            }
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), values, Op::ScaleRows { x, s }, rg))
    }

    /// Same scalars under a new shape of equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel(&shape) != self.values(x).len() {
            return Err(Error::contract(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let values = self.values(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, values, Op::Reshape(x), rg))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = kernels::matmul_nn(self.values(a), self.values(b), m, ka, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], values, Op::Matmul { a, b, m, k: ka, n }, rg))
    }

    pub fn transpose2d(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.dims2("transpose2d", x)?;
        let values = kernels::transpose(self.values(x), rows, cols);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![cols, rows], values, Op::Transpose2d { x, rows, cols }, rg))
    }

    pub fn concat_lastdim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.dims2("concat_lastdim", a)?;
        let (rb, cb) = self.dims2("concat_lastdim", b)?;
        if ra != rb {
            return Err(Error::Shape {
                op: "concat_lastdim",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut values = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            values.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            values.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![ra, ca + cb], values, Op::ConcatLastDim { a, b, ca, cb }, rg))
    }

    // ── normalizations ───────────────────────────────────────────────

    /// softmax over the last dim of `scale * x`, max-subtracted.
    pub fn softmax_lastdim(&mut self, x: NodeId, scale: T) -> Result<NodeId> {
        if !scale.is_finite() {
            return Err(Error::numeric("softmax_lastdim: non-finite scale"));
        }
        let (rows, cols) = self.lastdim("softmax_lastdim", x)?;
        let values = kernels::softmax_rows(self.values(x), rows, cols, scale)
            .ok_or_else(|| Error::numeric("softmax_lastdim: non-finite input"))?;
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), values, Op::SoftmaxLastDim { x, scale }, rg))
    }

    /// Per-slice standardization over the last dim followed by an
    /// affine map: y = gamma * (x - mean) / sqrt(var + eps) + beta.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (rows, cols) = self.lastdim("layer_norm", x)?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.values(x);
        let gv = self.values(gamma);
        let bv = self.values(beta);
        let inv_c = T::ONE / T::from_usize(cols);
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = T::ONE / (var + eps).sqrt();
            for (c, &v) in row.iter().enumerate() {
                values.push(gv[c] * ((v - mean) * inv_std) + bv[c]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(self.shape(x).to_vec(), values, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    /// Each last-dim slice divided by max(L2 norm, eps).
    pub fn l2_normalize_lastdim(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        if !(eps > T::ZERO) {
            return Err(Error::contract("l2_normalize_lastdim: eps must be positive"));
        }
        let (rows, cols) = self.lastdim("l2_normalize_lastdim", x)?;
        let xv = self.values(x);
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut sq = T::ZERO;
            for &v in row {
                sq += v * v;
            }
            let denom = sq.sqrt().maximum(eps);
            for &v in row {
                values.push(v / denom);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), values, Op::L2NormalizeLastDim { x, eps }, rg))
    }

    /// Standardizes the entire tensor to zero mean, unit variance (no
    /// affine). Transpose-symmetric by construction.
    pub fn standardize_all(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let xv = self.values(x);
        let n = xv.len();
        if n == 0 {
            return Err(Error::contract("standardize_all: empty tensor"));
        }
        let inv_n = T::ONE / T::from_usize(n);
        let mut mean = T::ZERO;
        for &v in xv {
            mean += v;
        }
        mean *= inv_n;
        let mut var = T::ZERO;
        for &v in xv {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv_std = T::ONE / (var + eps).sqrt();
        let values = xv.iter().map(|&v| (v - mean) * inv_std).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), values, Op::StandardizeAll { x, eps }, rg))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = T::ZERO;
        for &v in self.values(x) {
            acc += v;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![acc], Op::SumAll(x), rg))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    fn reduce_axis(&mut self, op_name: &'static str, x: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "{op_name}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.values(x);
        let mut values = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    values[o * inner + i] += xv[base + i];
                }
            }
        }
        if mean {
            let inv = T::ONE / T::from_usize(len);
            for v in values.iter_mut() {
                *v *= inv;
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[x]);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        Ok(self.push(out_shape, values, op, rg))
    }

    /// L2 norm of each last-dim slice; subgradient 0 at exactly-zero
    /// slices.
    pub fn euclid_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.lastdim("euclid_lastdim", x)?;
        let xv = self.values(x);
        let mut values = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut sq = T::ZERO;
            for &v in &xv[r * cols..(r + 1) * cols] {
                sq += v * v;
            }
            values.push(sq.sqrt());
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows], values, Op::EuclidLastDim(x), rg))
    }

    // ── spatial ──────────────────────────────────────────────────────

    /// Mean over non-overlapping k x k windows; window == stride.
    pub fn avg_pool2d(&mut self, x: NodeId, h: usize, w: usize, k: usize) -> Result<NodeId> {
        let (rows, ch) = self.dims2("avg_pool2d", x)?;
        if rows != h * w {
            return Err(Error::contract(format!(
                "avg_pool2d: node has {rows} rows, expected h*w = {}",
                h * w
            )));
        }
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::contract(format!(
                "avg_pool2d: window {k} must divide spatial dims {h}x{w}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let xv = self.values(x);
        let inv = T::ONE / T::from_usize(k * k);
        let mut values = vec![T::ZERO; oh * ow * ch];
        for oy in 0..oh {
            for ox in 0..ow {
                let out_base = (oy * ow + ox) * ch;
                for dy in 0..k {
                    for dx in 0..k {
                        let in_base = ((oy * k + dy) * w + (ox * k + dx)) * ch;
                        for c in 0..ch {
                            values[out_base + c] += xv[in_base + c];
                        }
                    }
                }
            }
        }
        for v in values.iter_mut() {
            *v *= inv;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![oh * ow, ch], values, Op::AvgPool2d { x, h, w, k }, rg))
    }

    /// Bilinear resize of an (h, w) grid of channel vectors,
    /// align-corners true. Same-size resize copies values verbatim.
    pub fn bilinear_resize2d(
        &mut self,
        x: NodeId,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) -> Result<NodeId> {
        let (rows, ch) = self.dims2("bilinear_resize2d", x)?;
        if rows != h * w {
            return Err(Error::contract(format!(
                "bilinear_resize2d: node has {rows} rows, expected h*w = {}",
                h * w
            )));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::contract("bilinear_resize2d: zero output dims"));
        }
        let xv = self.values(x);
        let mut values = vec![T::ZERO; oh * ow * ch];
        for oy in 0..oh {
            let (y0, y1, wy) = kernels::resize_coord(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, wx) = kernels::resize_coord(ox, w, ow);
                let out = &mut values[(oy * ow + ox) * ch..][..ch];
                if wy == 0.0 && wx == 0.0 {
                    out.copy_from_slice(&xv[(y0 * w + x0) * ch..][..ch]);
                    continue;
                }
                let (wy, wx) = (T::from_f64(wy), T::from_f64(wx));
                let w00 = (T::ONE - wy) * (T::ONE - wx);
                let w01 = (T::ONE - wy) * wx;
                let w10 = wy * (T::ONE - wx);
                let w11 = wy * wx;
                let r00 = &xv[(y0 * w + x0) * ch..][..ch];
                let r01 = &xv[(y0 * w + x1) * ch..][..ch];
                let r10 = &xv[(y1 * w + x0) * ch..][..ch];
                let r11 = &xv[(y1 * w + x1) * ch..][..ch];
                for c in 0..ch {
                    out[c] = w00 * r00[c] + w01 * r01[c] + w10 * r10[c] + w11 * r11[c];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![oh * ow, ch],
            values,
            Op::BilinearResize2d { x, h, w, oh, ow },
            rg,
        ))
    }

    /// im2col over an (h, w) grid: output row p holds the k*k taps of
    /// the window at output position p, tap-major then channel, zero
    /// padded by k/2.
    pub fn unfold2d(&mut self, x: NodeId, h: usize, w: usize, k: usize, stride: usize) -> Result<NodeId> {
        let (rows, ch) = self.dims2("unfold2d", x)?;
        if rows != h * w {
            return Err(Error::contract(format!(
                "unfold2d: node has {rows} rows, expected h*w = {}",
                h * w
            )));
        }
        if k % 2 == 0 {
            return Err(Error::contract("unfold2d: kernel size must be odd"));
        }
        if stride == 0 {
            return Err(Error::contract("unfold2d: stride must be positive"));
        }
        let pad = k / 2;
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let xv = self.values(x);
        let mut values = vec![T::ZERO; oh * ow * k * k * ch];
        for oy in 0..oh {
            for ox in 0..ow {
                let out_base = (oy * ow + ox) * k * k * ch;
                for dy in 0..k {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let tap = dy * k + dx;
                        let dst = &mut values[out_base + tap * ch..][..ch];
                        dst.copy_from_slice(&xv[(iy as usize * w + ix as usize) * ch..][..ch]);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![oh * ow, k * k * ch],
            values,
            Op::Unfold2d { x, h, w, k, stride },
            rg,
        ))
    }

    /// Convolution over an (h, w) grid with a single shared k x k
    /// kernel applied identically to every channel; zero padding k/2.
    pub fn conv2d_shared(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        h: usize,
        w: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let (rows, ch) = self.dims2("conv2d_shared", x)?;
        if rows != h * w {
            return Err(Error::contract(format!(
                "conv2d_shared: node has {rows} rows, expected h*w = {}",
                h * w
            )));
        }
        let ks = self.shape(kernel);
        if ks.len() != 2 || ks[0] != ks[1] {
            return Err(Error::contract(format!(
                "conv2d_shared: kernel must be square 2-d, got {ks:?}"
            )));
        }
        let k = ks[0];
        if k % 2 == 0 {
            return Err(Error::contract("conv2d_shared: kernel size must be odd"));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::contract("conv2d_shared: stride must be 1 or 2"));
        }
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let values = kernels::conv2d_shared(self.values(x), self.values(kernel), h, w, ch, k, stride);
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            vec![oh * ow, ch],
            values,
            Op::Conv2dShared { x, kernel, h, w, k, stride },
            rg,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-topological gradient propagation from a scalar loss.
    /// Accumulates into existing grad slots.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.ensure_grad(loss);
        self.nodes[loss.0].grad.as_mut().unwrap()[0] += T::ONE;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.distribute(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: NodeId) {
        if self.nodes[id.0].grad.is_none() {
            let n = self.nodes[id.0].values.len();
            self.nodes[id.0].grad = Some(vec![T::ZERO; n]);
        }
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[T]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        self.ensure_grad(id);
        let g = self.nodes[id.0].grad.as_mut().unwrap();
        for (gv, &cv) in g.iter_mut().zip(contrib) {
            *gv += cv;
        }
    }

    fn distribute(&mut self, idx: usize, g: &[T]) {
        // The op is copied out field-by-field to end the borrow of
        // self.nodes[idx] before mutating parent grads.
        match self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let da: Vec<T> = g.iter().zip(self.values(b)).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate(a, &da);
                }
                if self.requires_grad(b) {
                    let db: Vec<T> = g.iter().zip(self.values(a)).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale(x, factor) => {
                let dx: Vec<T> = g.iter().map(|&v| v * factor).collect();
                self.accumulate(x, &dx);
            }
            Op::AddBias { x, bias } => {
                self.accumulate(x, g);
                if self.requires_grad(bias) {
                    let cols = self.values(bias).len();
                    let mut db = vec![T::ZERO; cols];
                    for row in g.chunks(cols) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let da = kernels::matmul_nt(g, self.values(b), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.requires_grad(b) {
                    let db = kernels::matmul_tn(self.values(a), g, k, m, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose2d { x, rows, cols } => {
                let dx = kernels::transpose(g, cols, rows);
                debug_assert_eq!(dx.len(), rows * cols);
                self.accumulate(x, &dx);
            }
            Op::SoftmaxLastDim { x, scale } => {
                let (rows, cols) = {
                    let s = &self.nodes[idx].shape;
                    let c = s[s.len() - 1];
                    (numel(s) / c, c)
                };
                let y = &self.nodes[idx].values;
                let dx = kernels::softmax_rows_backward(y, g, rows, cols, scale);
                self.accumulate(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.layer_norm_backward(idx, x, gamma, beta, eps, g);
            }
            Op::L2NormalizeLastDim { x, eps } => {
                let shape = self.nodes[idx].shape.clone();
                let cols = shape[shape.len() - 1];
                let rows = numel(&shape) / cols;
                let xv = self.values(x);
                let mut dx = vec![T::ZERO; rows * cols];
                for r in 0..rows {
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut sq = T::ZERO;
                    for &v in xr {
                        sq += v * v;
                    }
                    let norm = sq.sqrt();
                    let out = &mut dx[r * cols..(r + 1) * cols];
                    if norm > eps {
                        let inv = T::ONE / norm;
                        let mut dot = T::ZERO;
                        for (&gv, &xvv) in gr.iter().zip(xr) {
                            dot += gv * xvv;
                        }
                        let k = dot * inv * inv * inv;
                        for ((d, &gv), &xvv) in out.iter_mut().zip(gr).zip(xr) {
                            *d = gv * inv - xvv * k;
                        }
                    } else {
                        let inv = T::ONE / eps;
                        for (d, &gv) in out.iter_mut().zip(gr) {
                            *d = gv * inv;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::StandardizeAll { x, eps } => {
                let xv = self.values(x);
                let n = xv.len();
                let inv_n = T::ONE / T::from_usize(n);
                let mut mean = T::ZERO;
                for &v in xv {
                    mean += v;
                }
                mean *= inv_n;
                let mut var = T::ZERO;
                for &v in xv {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_n;
                let inv_std = T::ONE / (var + eps).sqrt();
                let mut g_mean = T::ZERO;
                let mut gx_mean = T::ZERO;
                for (i, &gv) in g.iter().enumerate() {
                    g_mean += gv;
                    gx_mean += gv * ((xv[i] - mean) * inv_std);
                }
                g_mean *= inv_n;
                gx_mean *= inv_n;
                let dx: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let xh = (xv[i] - mean) * inv_std;
                        (gv - g_mean - xh * gx_mean) * inv_std
                    })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.values(x))
                    .map(|(&gv, &xv)| if xv > T::ZERO { gv } else { T::ZERO })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::EluPlusOne(x) => {
                let y = &self.nodes[idx].values;
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.values(x).iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| if xv > T::ZERO { gv } else { gv * yv })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Recip(x) => {
                let y = &self.nodes[idx].values;
                let dx: Vec<T> = g.iter().zip(y).map(|(&gv, &yv)| -gv * yv * yv).collect();
                self.accumulate(x, &dx);
            }
            Op::ConcatLastDim { a, b, ca, cb } => {
                let rows = self.values(a).len() / ca;
                if self.requires_grad(a) {
                    let mut da = vec![T::ZERO; rows * ca];
                    for r in 0..rows {
                        da[r * ca..(r + 1) * ca].copy_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    self.accumulate(a, &da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![T::ZERO; rows * cb];
                    for r in 0..rows {
                        db[r * cb..(r + 1) * cb]
                            .copy_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::SumAll(x) => {
                let n = self.values(x).len();
                let dx = vec![g[0]; n];
                self.accumulate(x, &dx);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let mean = matches!(self.nodes[idx].op, Op::MeanAxis { .. });
                let shape = self.nodes[x.0].shape.clone();
                let (outer, len, inner) = axis_split(&shape, axis);
                let factor = if mean {
                    T::ONE / T::from_usize(len)
                } else {
                    T::ONE
                };
                let mut dx = vec![T::ZERO; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * factor;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::ScaleRows { x, s } => {
                let cols = {
                    let sh = &self.nodes[x.0].shape;
                    sh[sh.len() - 1]
                };
                let rows = self.values(s).len();
                if self.requires_grad(x) {
                    let sv = self.values(s);
                    let mut dx = vec![T::ZERO; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = g[r * cols + c] * sv[r];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.requires_grad(s) {
                    let xv = self.values(x);
                    let mut ds = vec![T::ZERO; rows];
                    for r in 0..rows {
                        let mut acc = T::ZERO;
                        for c in 0..cols {
                            acc += g[r * cols + c] * xv[r * cols + c];
                        }
                        ds[r] = acc;
                    }
                    self.accumulate(s, &ds);
                }
            }
            Op::AvgPool2d { x, h, w, k } => {
                let ch = {
                    let sh = &self.nodes[x.0].shape;
                    sh[1]
                };
                let (oh, ow) = (h / k, w / k);
                let inv = T::ONE / T::from_usize(k * k);
                let mut dx = vec![T::ZERO; h * w * ch];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let src = &g[(oy * ow + ox) * ch..][..ch];
                        for dy in 0..k {
                            for dx_t in 0..k {
                                let dst = &mut dx[((oy * k + dy) * w + (ox * k + dx_t)) * ch..][..ch];
                                for (d, &gv) in dst.iter_mut().zip(src) {
                                    *d += gv * inv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::BilinearResize2d { x, h, w, oh, ow } => {
                let ch = {
                    let sh = &self.nodes[x.0].shape;
                    sh[1]
                };
                let mut dx = vec![T::ZERO; h * w * ch];
                for oy in 0..oh {
                    let (y0, y1, wy) = kernels::resize_coord(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1, wx) = kernels::resize_coord(ox, w, ow);
                        let src = &g[(oy * ow + ox) * ch..][..ch];
                        let (wy_t, wx_t) = (T::from_f64(wy), T::from_f64(wx));
                        let taps = [
                            (y0, x0, (T::ONE - wy_t) * (T::ONE - wx_t)),
                            (y0, x1, (T::ONE - wy_t) * wx_t),
                            (y1, x0, wy_t * (T::ONE - wx_t)),
                            (y1, x1, wy_t * wx_t),
                        ];
                        for (ty, tx, tw) in taps {
                            if tw == T::ZERO {
                                continue;
                            }
                            let dst = &mut dx[(ty * w + tx) * ch..][..ch];
                            for (d, &gv) in dst.iter_mut().zip(src) {
                                *d += gv * tw;
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Unfold2d { x, h, w, k, stride } => {
                let ch = {
                    let sh = &self.nodes[x.0].shape;
                    sh[1]
                };
                let pad = k / 2;
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let mut dx = vec![T::ZERO; h * w * ch];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let out_base = (oy * ow + ox) * k * k * ch;
                        for dy in 0..k {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx_t in 0..k {
                                let ix = (ox * stride + dx_t) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let tap = dy * k + dx_t;
                                let src = &g[out_base + tap * ch..][..ch];
                                let dst = &mut dx[(iy as usize * w + ix as usize) * ch..][..ch];
                                for (d, &gv) in dst.iter_mut().zip(src) {
                                    *d += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Conv2dShared { x, kernel, h, w, k, stride } => {
                let ch = {
                    let sh = &self.nodes[x.0].shape;
                    sh[1]
                };
                if self.requires_grad(x) {
                    let dx = kernels::conv2d_shared_backward_input(
                        g,
                        self.values(kernel),
                        h,
                        w,
                        ch,
                        k,
                        stride,
                    );
                    self.accumulate(x, &dx);
                }
                if self.requires_grad(kernel) {
                    let dk = kernels::conv2d_shared_backward_kernel(
                        self.values(x),
                        g,
                        h,
                        w,
                        ch,
                        k,
                        stride,
                    );
                    self.accumulate(kernel, &dk);
                }
            }
            Op::Reshape(x) => {
                self.accumulate(x, g);
            }
            Op::EuclidLastDim(x) => {
                let y = &self.nodes[idx].values;
                let cols = {
                    let sh = &self.nodes[x.0].shape;
                    sh[sh.len() - 1]
                };
                let xv = self.values(x);
                let rows = y.len();
                let mut dx = vec![T::ZERO; rows * cols];
                for r in 0..rows {
                    if y[r] > T::ZERO {
                        let s = g[r] / y[r];
                        for c in 0..cols {
                            dx[r * cols + c] = xv[r * cols + c] * s;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
        }
    }

    fn layer_norm_backward(
        &mut self,
        idx: usize,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        g: &[T],
    ) {
        let shape = self.nodes[idx].shape.clone();
        let cols = shape[shape.len() - 1];
        let rows = numel(&shape) / cols;
        let inv_c = T::ONE / T::from_usize(cols);
        let xv = self.values(x).to_vec();
        let gv = self.values(gamma).to_vec();

        let mut dx = vec![T::ZERO; rows * cols];
        let mut dgamma = vec![T::ZERO; cols];
        let mut dbeta = vec![T::ZERO; cols];
        for r in 0..rows {
            let xr = &xv[r * cols..(r + 1) * cols];
            let gr = &g[r * cols..(r + 1) * cols];
            let mut mean = T::ZERO;
            for &v in xr {
                mean += v;
            }
            mean *= inv_c;
            let mut var = T::ZERO;
            for &v in xr {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = T::ONE / (var + eps).sqrt();

            let mut m1 = T::ZERO; // mean of dxhat
            let mut m2 = T::ZERO; // mean of dxhat * xhat
            for (c, &gvv) in gr.iter().enumerate() {
                let xh = (xr[c] - mean) * inv_std;
                dgamma[c] += gvv * xh;
                dbeta[c] += gvv;
                let dxh = gvv * gv[c];
                m1 += dxh;
                m2 += dxh * xh;
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for (c, &gvv) in gr.iter().enumerate() {
                let xh = (xr[c] - mean) * inv_std;
                let dxh = gvv * gv[c];
                dx[r * cols + c] = (dxh - m1 - xh * m2) * inv_std;
            }
        }
        self.accumulate(x, &dx);
        self.accumulate(gamma, &dgamma);
        self.accumulate(beta, &dbeta);
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
