//! Raw dense kernels behind the graph ops.
//!
//! Every kernel computes each output element as a fixed-order
//! sequential reduction, so results are bit-identical no matter how
//! many threads rayon uses: parallelism only splits disjoint output
//! ranges. Anything below `PAR_THRESHOLD` units of work runs
//! sequentially to dodge the fork/join overhead.

use rayon::prelude::*;

use super::scalar::Scalar;

const PAR_THRESHOLD: usize = 1 << 16;

/// c[m x n] = a[m x k] . b[k x n]
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    let row_job = |i: usize, c_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_it * b_v;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    c
}

/// c[m x n] = a[m x k] . b[n x k]^T  (both operands row-major)
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    let row_job = |i: usize, c_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, c_v) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c_v = acc;
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    c
}

/// c[m x n] = a[k x m]^T . b[k x n]  (both operands row-major)
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    let row_job = |i: usize, c_row: &mut [T]| {
        for t in 0..k {
            let a_ti = a[t * m + i];
            let b_row = &b[t * n..(t + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ti * b_v;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    c
}

/// out[n x m] = x[m x n]^T
pub fn transpose<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Row-wise softmax of `scale * x` with max subtraction.
/// Rows are processed independently; returns an error flag for
/// non-finite input via Option (caller turns it into an Error).
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, scale: T) -> Option<Vec<T>> {
    let mut out = vec![T::ZERO; rows * cols];
    let finite = std::sync::atomic::AtomicBool::new(true);
    let job = |i: usize, o_row: &mut [T]| {
        let x_row = &x[i * cols..(i + 1) * cols];
        let mut mx = T::neg_infinity();
        for &v in x_row {
            if !v.is_finite() {
                finite.store(false, std::sync::atomic::Ordering::Relaxed);
                return;
            }
            let s = scale * v;
            if s > mx {
                mx = s;
            }
        }
        let mut sum = T::ZERO;
        for (o, &v) in o_row.iter_mut().zip(x_row) {
            let e = (scale * v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in o_row.iter_mut() {
            *o = *o / sum;
        }
    };
    if rows * cols >= PAR_THRESHOLD && rows > 1 {
        out.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| job(i, row));
    } else {
        for (i, row) in out.chunks_mut(cols).enumerate() {
            job(i, row);
        }
    }
    if finite.load(std::sync::atomic::Ordering::Relaxed) {
        Some(out)
    } else {
        None
    }
}

/// Backward of row-wise softmax: dx = scale * y * (g - <g, y>).
pub fn softmax_rows_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    rows: usize,
    cols: usize,
    scale: T,
) -> Vec<T> {
    let mut dx = vec![T::ZERO; rows * cols];
    let job = |i: usize, d_row: &mut [T]| {
        let y_row = &y[i * cols..(i + 1) * cols];
        let g_row = &g[i * cols..(i + 1) * cols];
        let mut dot = T::ZERO;
        for (&gv, &yv) in g_row.iter().zip(y_row) {
            dot += gv * yv;
        }
        for ((d, &gv), &yv) in d_row.iter_mut().zip(g_row).zip(y_row) {
            *d = scale * yv * (gv - dot);
        }
    };
    if rows * cols >= PAR_THRESHOLD && rows > 1 {
        dx.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| job(i, row));
    } else {
        for (i, row) in dx.chunks_mut(cols).enumerate() {
            job(i, row);
        }
    }
    dx
}

/// Conv over a (h, w) grid with a single shared k x k kernel applied
/// to every channel independently; zero padding k/2, square stride.
/// x is [h*w x ch] row-major, output is [oh*ow x ch].
pub fn conv2d_shared<T: Scalar>(
    x: &[T],
    kernel: &[T],
    h: usize,
    w: usize,
    ch: usize,
    k: usize,
    stride: usize,
) -> Vec<T> {
    let pad = k / 2;
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut out = vec![T::ZERO; oh * ow * ch];
    let job = |p: usize, o_row: &mut [T]| {
        let oy = p / ow;
        let ox = p % ow;
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
                let kv = kernel[dy * k + dx];
                let x_row = &x[(iy as usize * w + ix as usize) * ch..][..ch];
                for (o, &xv) in o_row.iter_mut().zip(x_row) {
                    *o += kv * xv;
                }
            }
        }
    };
    if oh * ow * ch * k * k >= PAR_THRESHOLD && oh * ow > 1 {
        out.par_chunks_mut(ch)
            .enumerate()
            .for_each(|(p, row)| job(p, row));
    } else {
        for (p, row) in out.chunks_mut(ch).enumerate() {
            job(p, row);
        }
    }
    out
}

/// Gradient of conv2d_shared w.r.t. its input, written as a gather per
/// input cell (deterministic under parallel split).
pub fn conv2d_shared_backward_input<T: Scalar>(
    g: &[T],
    kernel: &[T],
    h: usize,
    w: usize,
    ch: usize,
    k: usize,
    stride: usize,
) -> Vec<T> {
    let pad = k / 2;
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut dx = vec![T::ZERO; h * w * ch];
    let job = |p: usize, d_row: &mut [T]| {
        let iy = p / w;
        let ix = p % w;
        // input (iy, ix) contributes to output (oy, ox) at tap (dy, dx)
        // when oy*stride + dy - pad == iy, similarly for x.
        for dy in 0..k {
            let oy_num = iy as isize + pad as isize - dy as isize;
            if oy_num < 0 || (oy_num as usize) % stride != 0 {
                continue;
            }
            let oy = oy_num as usize / stride;
            if oy >= oh {
                continue;
            }
            for dx_t in 0..k {
                let ox_num = ix as isize + pad as isize - dx_t as isize;
                if ox_num < 0 || (ox_num as usize) % stride != 0 {
                    continue;
                }
                let ox = ox_num as usize / stride;
                if ox >= ow {
                    continue;
                }
                let kv = kernel[dy * k + dx_t];
                let g_row = &g[(oy * ow + ox) * ch..][..ch];
                for (d, &gv) in d_row.iter_mut().zip(g_row) {
                    *d += kv * gv;
                }
            }
        }
    };
    if h * w * ch * k * k >= PAR_THRESHOLD && h * w > 1 {
        dx.par_chunks_mut(ch)
            .enumerate()
            .for_each(|(p, row)| job(p, row));
    } else {
        for (p, row) in dx.chunks_mut(ch).enumerate() {
            job(p, row);
        }
    }
    dx
}

/// Gradient of conv2d_shared w.r.t. the kernel.
pub fn conv2d_shared_backward_kernel<T: Scalar>(
    x: &[T],
    g: &[T],
    h: usize,
    w: usize,
    ch: usize,
    k: usize,
    stride: usize,
) -> Vec<T> {
    let pad = k / 2;
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut dk = vec![T::ZERO; k * k];
    for (tap, dk_v) in dk.iter_mut().enumerate() {
        let dy = tap / k;
        let dx = tap % k;
        let mut acc = T::ZERO;
        for oy in 0..oh {
            let iy = (oy * stride + dy) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let ix = (ox * stride + dx) as isize - pad as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let g_row = &g[(oy * ow + ox) * ch..][..ch];
                let x_row = &x[(iy as usize * w + ix as usize) * ch..][..ch];
                for (&gv, &xv) in g_row.iter().zip(x_row) {
                    acc += gv * xv;
                }
            }
        }
        *dk_v = acc;
    }
    dk
}

/// Source coordinate and lerp weights for align-corners-true resizing.
/// Returns (i0, i1, w1): out = (1-w1)*x[i0] + w1*x[i1].
pub fn resize_coord(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if out_len <= 1 || in_len <= 1 {
        return (0, 0, 0.0);
    }
    let pos = out_i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let i0 = pos.floor() as usize;
    let i0 = i0.min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, pos - i0 as f64)
}
