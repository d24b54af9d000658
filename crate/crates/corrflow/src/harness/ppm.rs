//! Binary P6 PPM input/output and flow color rendering.
//!
//! PPM is the only image codec here: 8-bit binary RGB with a
//! whitespace-delimited header. The flow renderer uses the standard
//! color wheel — hue from the flow angle, saturation from magnitude —
//! so zero flow is white.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flowhead::{FlowField, Image};

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(img))?;
    Ok(())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String> {
        // skip whitespace and # comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(format!("ppm: missing {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token("magic")?;
    if magic != "P6" {
        return Err(Error::format(format!("ppm: magic {magic:?}, expected \"P6\"")));
    }
    let w: usize = token("width")?
        .parse()
        .map_err(|_| Error::format("ppm: bad width"))?;
    let h: usize = token("height")?
        .parse()
        .map_err(|_| Error::format("ppm: bad height"))?;
    let maxval: usize = token("maxval")?
        .parse()
        .map_err(|_| Error::format("ppm: bad maxval"))?;
    if maxval != 255 {
        return Err(Error::format(format!("ppm: maxval {maxval}, only 255 supported")));
    }
    if w == 0 || h == 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(Error::format(format!("ppm: implausible dims {w}x{h}")));
    }
    // exactly one whitespace byte separates header and payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("ppm: missing header terminator"));
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() - pos < need {
        return Err(Error::format(format!(
            "ppm: payload holds {} bytes, {w}x{h} needs {need}",
            bytes.len() - pos
        )));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Image::new(h, w, data)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_ppm(&bytes)
}

/// Standard optical-flow color wheel: hue = atan2(v, u), saturation =
/// min(magnitude / max_mag, 1), full value. Returns P6 bytes.
pub fn flow_to_color(flow: &FlowField, max_mag: f64) -> Result<Vec<u8>> {
    if !(max_mag > 0.0) {
        return Err(Error::contract("flow_to_color: max_mag must be positive"));
    }
    let mut img = Image::zeros(flow.h, flow.w);
    for i in 0..flow.h * flow.w {
        let u = flow.uv[2 * i] as f64;
        let v = flow.uv[2 * i + 1] as f64;
        let mag = (u * u + v * v).sqrt();
        let sat = (mag / max_mag).min(1.0);
        let hue = {
            let a = v.atan2(u) / (2.0 * std::f64::consts::PI);
            if a < 0.0 {
                a + 1.0
            } else {
                a
            }
        };
        let rgb = hsv_to_rgb(hue, sat, 1.0);
        img.data[3 * i] = rgb[0];
        img.data[3 * i + 1] = rgb[1];
        img.data[3 * i + 2] = rgb[2];
    }
    Ok(encode_ppm(&img))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}
