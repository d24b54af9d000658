//! Synthetic warped-pair generation.
//!
//! A pair is a band-limited random texture plus a warped view of it
//! under a known geometric map, so dense ground-truth flow exists
//! analytically. The map M sends a pixel of the warped view to its
//! sample position in the texture; the ground-truth flow on the warped
//! view's grid is M(p) - p, which by construction satisfies
//! warp(source, flow) == target.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowhead::{warp, FlowField, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpKind {
    Translation,
    Affine,
    Homography,
}

impl WarpKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "translation" => Some(WarpKind::Translation),
            "affine" => Some(WarpKind::Affine),
            "homography" => Some(WarpKind::Homography),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WarpKind::Translation => "translation",
            WarpKind::Affine => "affine",
            WarpKind::Homography => "homography",
        }
    }
}

/// Parameter ranges for the random warp draw.
#[derive(Clone, Copy, Debug)]
pub struct WarpSpec {
    pub kind: WarpKind,
    /// per-axis translation bound in pixels
    pub max_translation: f64,
    /// bound on the linear-part perturbation (affine / homography)
    pub max_linear: f64,
    /// bound on the perspective terms, scaled by 1/size (homography)
    pub max_perspective: f64,
}

impl WarpSpec {
    pub fn translation(max_translation: f64) -> Self {
        WarpSpec {
            kind: WarpKind::Translation,
            max_translation,
            max_linear: 0.0,
            max_perspective: 0.0,
        }
    }

    pub fn affine(max_translation: f64, max_linear: f64) -> Self {
        WarpSpec {
            kind: WarpKind::Affine,
            max_translation,
            max_linear,
            max_perspective: 0.0,
        }
    }

    pub fn homography(max_translation: f64, max_linear: f64, max_perspective: f64) -> Self {
        WarpSpec {
            kind: WarpKind::Homography,
            max_translation,
            max_linear,
            max_perspective,
        }
    }
}

/// Row-major 3x3 projective map applied to pixel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let d = m[6] * x + m[7] * y + m[8];
        ((m[0] * x + m[1] * y + m[2]) / d, (m[3] * x + m[4] * y + m[5]) / d)
    }

    fn det3(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }
}

/// One generated training or evaluation example.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub source: Image,
    pub target: Image,
    /// on the target grid: target(p) = source(p + gt_flow(p))
    pub gt_flow: FlowField,
    pub mask: Vec<bool>,
    pub seed: u64,
    pub warp: Homography,
    pub descriptor: String,
}

/// Smooth random texture: seeded Gaussian blobs followed by one box
/// smoothing pass, normalized to [0, 1].
pub fn random_texture(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let blobs = 24;
    let mut field = vec![0.0f64; size * size * 3];
    for _ in 0..blobs {
        let cx = rng.gen::<f64>() * size as f64;
        let cy = rng.gen::<f64>() * size as f64;
        let sigma = size as f64 * (0.03 + 0.10 * rng.gen::<f64>());
        let amp: [f64; 3] = [
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        ];
        let inv = 1.0 / (2.0 * sigma * sigma);
        // blobs decay fast; only touch a window around the center
        let r = (3.0 * sigma).ceil() as isize;
        let x0 = ((cx as isize) - r).max(0) as usize;
        let x1 = (((cx as isize) + r) as usize).min(size - 1);
        let y0 = ((cy as isize) - r).max(0) as usize;
        let y1 = (((cy as isize) + r) as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let w = (-(dx * dx + dy * dy) * inv).exp();
                for c in 0..3 {
                    field[(y * size + x) * 3 + c] += amp[c] * w;
                }
            }
        }
    }
    // 3x3 box smoothing
    let mut smooth = field.clone();
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = y as isize + dy;
                        let xx = x as isize + dx;
                        if yy >= 0 && yy < size as isize && xx >= 0 && xx < size as isize {
                            acc += field[(yy as usize * size + xx as usize) * 3 + c];
                            n += 1.0;
                        }
                    }
                }
                smooth[(y * size + x) * 3 + c] = acc / n;
            }
        }
    }
    let lo = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = 1.0 / (hi - lo).max(1e-9);
    Image {
        h: size,
        w: size,
        data: smooth.iter().map(|&v| ((v - lo) * scale) as f32).collect(),
    }
}

fn draw_warp(rng: &mut ChaCha8Rng, size: usize, spec: &WarpSpec) -> (Homography, String) {
    let u = |rng: &mut ChaCha8Rng, b: f64| rng.gen::<f64>() * 2.0 * b - b;
    let tx = u(rng, spec.max_translation);
    let ty = u(rng, spec.max_translation);
    match spec.kind {
        WarpKind::Translation => (
            Homography([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0]),
            format!("translation tx={tx:.3} ty={ty:.3}"),
        ),
        WarpKind::Affine => {
            let (a, b, c, d) = (
                u(rng, spec.max_linear),
                u(rng, spec.max_linear),
                u(rng, spec.max_linear),
                u(rng, spec.max_linear),
            );
            (
                Homography([1.0 + a, b, tx, c, 1.0 + d, ty, 0.0, 0.0, 1.0]),
                format!("affine tx={tx:.3} ty={ty:.3} a={a:.4} b={b:.4} c={c:.4} d={d:.4}"),
            )
        }
        WarpKind::Homography => {
            let (a, b, c, d) = (
                u(rng, spec.max_linear),
                u(rng, spec.max_linear),
                u(rng, spec.max_linear),
                u(rng, spec.max_linear),
            );
            let g = u(rng, spec.max_perspective) / size as f64;
            let h = u(rng, spec.max_perspective) / size as f64;
            (
                Homography([1.0 + a, b, tx, c, 1.0 + d, ty, g, h, 1.0]),
                format!("homography tx={tx:.3} ty={ty:.3} a={a:.4} b={b:.4} c={c:.4} d={d:.4} g={g:.6} h={h:.6}"),
            )
        }
    }
}

/// Deterministic pair generation. Degenerate draws (near-zero
/// determinant) re-draw from the same seeded stream, so a given seed
/// always produces the same pair.
pub fn gen_synthetic_pair(seed: u64, size: usize, spec: &WarpSpec) -> Result<SyntheticPair> {
    if size == 0 {
        return Err(Error::contract("gen_synthetic_pair: zero size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x53_59_4e_54_48); // "SYNTH" salt
    let source = random_texture(&mut rng, size);

    let (warp_map, descriptor) = {
        let mut attempt = 0;
        loop {
            let (m, d) = draw_warp(&mut rng, size, spec);
            if m.det3().abs() > 1e-4 {
                break (m, d);
            }
            attempt += 1;
            if attempt > 64 {
                return Err(Error::numeric(
                    "gen_synthetic_pair: could not draw a non-degenerate warp",
                ));
            }
        }
    };

    let mut uv = vec![0.0f32; size * size * 2];
    for y in 0..size {
        for x in 0..size {
            let (mx, my) = warp_map.apply(x as f64, y as f64);
            uv[(y * size + x) * 2] = (mx - x as f64) as f32;
            uv[(y * size + x) * 2 + 1] = (my - y as f64) as f32;
        }
    }
    let gt_flow = FlowField { h: size, w: size, uv };
    let (target, mask) = warp(&source, &gt_flow)?;
    Ok(SyntheticPair {
        source,
        target,
        gt_flow,
        mask,
        seed,
        warp: warp_map,
        descriptor,
    })
}

/// Stable per-step seed derivation; train and eval draw from disjoint
/// streams.
pub fn pair_seed(base: u64, index: u64, eval: bool) -> u64 {
    let salt = if eval { 0x45_56_41_4c_u64 } else { 0x54_52_41_4e_u64 };
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index)
        .wrapping_mul(0x2545_f491_4f6c_dd1d)
        ^ salt
}
