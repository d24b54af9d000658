//! Flow regression and matching metrics.
//!
//! Soft-argmax turns each cost row into an expected match position,
//! giving a differentiable flow field. AEPE is both the training loss
//! and the dense metric; PCK is the keypoint-transfer metric. Flow
//! vectors are (u, v) = (dx, dy) in pixels of the field's own grid;
//! rescaling a field scales the vectors proportionally.

use crate::costvol::CostVolume;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar};

/// Plain dense flow container, (u, v) interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub uv: Vec<f32>,
}

impl FlowField {
    pub fn new(h: usize, w: usize, uv: Vec<f32>) -> Result<Self> {
        if uv.len() != h * w * 2 {
            return Err(Error::contract(format!(
                "flow field {h}x{w} needs {} scalars, got {}",
                h * w * 2,
                uv.len()
            )));
        }
        Ok(FlowField { h, w, uv })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { h, w, uv: vec![0.0; h * w * 2] }
    }

    pub fn uv_at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = (y * self.w + x) * 2;
        (self.uv[i], self.uv[i + 1])
    }

    /// Bilinear sample at fractional coordinates (align-corners),
    /// clamped to the border.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let xc = x.clamp(0.0, (self.w - 1) as f64);
        let yc = y.clamp(0.0, (self.h - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let wx = xc - x0 as f64;
        let wy = yc - y0 as f64;
        let at = |xx: usize, yy: usize, c: usize| self.uv[(yy * self.w + xx) * 2 + c] as f64;
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (1.0 - wy) * ((1.0 - wx) * at(x0, y0, c) + wx * at(x1, y0, c))
                + wy * ((1.0 - wx) * at(x0, y1, c) + wx * at(x1, y1, c));
        }
        (out[0], out[1])
    }

    /// Resamples onto a new grid and scales vectors by the resolution
    /// ratio.
    pub fn rescale(&self, oh: usize, ow: usize) -> FlowField {
        if oh == self.h && ow == self.w {
            return self.clone();
        }
        let sx = ow as f64 / self.w as f64;
        let sy = oh as f64 / self.h as f64;
        let mut uv = vec![0.0f32; oh * ow * 2];
        for y in 0..oh {
            let src_y = if oh > 1 {
                y as f64 * (self.h - 1) as f64 / (oh - 1) as f64
            } else {
                0.0
            };
            for x in 0..ow {
                let src_x = if ow > 1 {
                    x as f64 * (self.w - 1) as f64 / (ow - 1) as f64
                } else {
                    0.0
                };
                let (u, v) = self.sample(src_x, src_y);
                uv[(y * ow + x) * 2] = (u * sx) as f32;
                uv[(y * ow + x) * 2 + 1] = (v * sy) as f32;
            }
        }
        FlowField { h: oh, w: ow, uv }
    }
}

/// Keypoints in pixel coordinates plus the frame they are measured in.
#[derive(Clone, Debug)]
pub struct KeypointSet {
    pub points: Vec<(f64, f64)>,
    /// (height, width) of the evaluation frame (image or bounding box)
    pub frame: (usize, usize),
}

impl KeypointSet {
    pub fn new(points: Vec<(f64, f64)>, frame: (usize, usize)) -> Result<Self> {
        for &(x, y) in &points {
            if x < 0.0 || y < 0.0 || x > frame.1 as f64 || y > frame.0 as f64 {
                return Err(Error::contract(format!(
                    "keypoint ({x}, {y}) outside frame {frame:?}"
                )));
            }
        }
        Ok(KeypointSet { points, frame })
    }
}

/// Differentiable flow handle inside a graph: node shape [h*w x 2].
#[derive(Clone, Copy, Debug)]
pub struct FlowNode {
    pub h: usize,
    pub w: usize,
    pub data: NodeId,
}

impl FlowNode {
    pub fn to_field<T: Scalar>(&self, g: &Graph<T>) -> FlowField {
        FlowField {
            h: self.h,
            w: self.w,
            uv: g.values(self.data).iter().map(|v| v.to_f64() as f32).collect(),
        }
    }
}

/// Integer cell-center coordinate table [(h*w) x 2] as (x, y).
fn grid_positions<T: Scalar>(g: &mut Graph<T>, h: usize, w: usize) -> Result<NodeId> {
    let mut vals = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            vals.push(T::from_usize(x));
            vals.push(T::from_usize(y));
        }
    }
    g.constant(vec![h * w, 2], vals)
}

/// Expected match displacement per source cell: softmax over each cost
/// row at temperature tau weights the target cell centers; the flow is
/// that expectation minus the source cell center.
pub fn soft_argmax_flow<T: Scalar>(
    g: &mut Graph<T>,
    c: &CostVolume,
    tau: f64,
) -> Result<FlowNode> {
    if !(tau > 0.0) {
        return Err(Error::contract("soft_argmax_flow: tau must be positive"));
    }
    let weights = g.softmax_lastdim(c.data, T::from_f64(1.0 / tau))?;
    let pos_t = grid_positions(g, c.h_tgt, c.w_tgt)?;
    let matched = g.matmul(weights, pos_t)?;
    let pos_s = grid_positions(g, c.h_src, c.w_src)?;
    let data = g.sub(matched, pos_s)?;
    Ok(FlowNode {
        h: c.h_src,
        w: c.w_src,
        data,
    })
}

/// Average end-point error over masked cells, differentiable in the
/// prediction. This is also the training objective.
pub fn aepe_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: &FlowNode,
    gt: &FlowNode,
    mask: &[bool],
) -> Result<NodeId> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::Shape {
            op: "aepe",
            lhs: vec![pred.h, pred.w],
            rhs: vec![gt.h, gt.w],
        });
    }
    if mask.len() != pred.h * pred.w {
        return Err(Error::contract(format!(
            "aepe: mask has {} cells for a {}x{} field",
            mask.len(),
            pred.h,
            pred.w
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::contract("aepe: empty validity mask"));
    }
    let diff = g.sub(pred.data, gt.data)?;
    let dist = g.euclid_lastdim(diff)?;
    let mask_vals: Vec<T> = mask
        .iter()
        .map(|&m| if m { T::ONE } else { T::ZERO })
        .collect();
    let mask_node = g.constant(vec![mask.len()], mask_vals)?;
    let masked = g.mul(dist, mask_node)?;
    let total = g.sum_all(masked)?;
    g.scale(total, T::ONE / T::from_usize(count))
}

/// Plain AEPE over masked cells: (mean, median).
pub fn aepe_stats(pred: &FlowField, gt: &FlowField, mask: &[bool]) -> Result<(f64, f64)> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::Shape {
            op: "aepe",
            lhs: vec![pred.h, pred.w],
            rhs: vec![gt.h, gt.w],
        });
    }
    let mut dists: Vec<f64> = Vec::new();
    for i in 0..pred.h * pred.w {
        if mask[i] {
            let du = pred.uv[2 * i] as f64 - gt.uv[2 * i] as f64;
            let dv = pred.uv[2 * i + 1] as f64 - gt.uv[2 * i + 1] as f64;
            dists.push((du * du + dv * dv).sqrt());
        }
    }
    if dists.is_empty() {
        return Err(Error::contract("aepe: empty validity mask"));
    }
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    Ok((mean, median))
}

/// Fraction of keypoints whose prediction lands within
/// alpha * max(frame height, frame width) of the ground truth.
pub fn pck(pred: &KeypointSet, gt: &KeypointSet, alpha: f64) -> Result<f64> {
    if pred.points.len() != gt.points.len() {
        return Err(Error::contract(format!(
            "pck: {} predictions vs {} ground-truth keypoints",
            pred.points.len(),
            gt.points.len()
        )));
    }
    if alpha < 0.0 {
        return Err(Error::contract("pck: alpha must be non-negative"));
    }
    if pred.points.is_empty() {
        return Err(Error::contract("pck: empty keypoint sets"));
    }
    let threshold = alpha * pred.frame.0.max(pred.frame.1) as f64;
    let hits = pred
        .points
        .iter()
        .zip(&gt.points)
        .filter(|(&(px, py), &(gx, gy))| {
            let d = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
            d <= threshold
        })
        .count();
    Ok(hits as f64 / pred.points.len() as f64)
}

/// RGB image in [0, 1], channels interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::contract(format!(
                "image {h}x{w} needs {} scalars, got {}",
                h * w * 3,
                data.len()
            )));
        }
        Ok(Image { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; h * w * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Backward-warps `image` by `flow`: out(p) = image(p + flow(p)) with
/// bilinear sampling. Out-of-bounds samples produce zeros and a false
/// mask entry. Integer in-bounds displacements copy pixels exactly.
pub fn warp(image: &Image, flow: &FlowField) -> Result<(Image, Vec<bool>)> {
    if image.h != flow.h || image.w != flow.w {
        return Err(Error::Shape {
            op: "warp",
            lhs: vec![image.h, image.w],
            rhs: vec![flow.h, flow.w],
        });
    }
    let (h, w) = (image.h, image.w);
    let mut out = vec![0.0f32; h * w * 3];
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.uv_at(x, y);
            let sx = x as f64 + u as f64;
            let sy = y as f64 + v as f64;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            mask[y * w + x] = true;
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let wx = sx - x0 as f64;
            let wy = sy - y0 as f64;
            let dst = &mut out[(y * w + x) * 3..][..3];
            if wx == 0.0 && wy == 0.0 {
                dst.copy_from_slice(&image.data[(y0 * w + x0) * 3..][..3]);
                continue;
            }
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for c in 0..3 {
                let at = |xx: usize, yy: usize| image.data[(yy * w + xx) * 3 + c] as f64;
                let val = (1.0 - wy) * ((1.0 - wx) * at(x0, y0) + wx * at(x1, y0))
                    + wy * ((1.0 - wx) * at(x0, y1) + wx * at(x1, y1));
                dst[c] = val as f32;
            }
        }
    }
    Ok((Image { h, w, data: out }, mask))
}
