//! Middlebury .flo flow-file format.
//!
//! Layout: 4 magic bytes "PIEH" (the f32 202021.25 little-endian),
//! width and height as little-endian 32-bit integers, then row-major
//! interleaved (u, v) little-endian f32 pairs. Round trips are
//! bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flowhead::FlowField;

pub const FLO_TAG: f32 = 202021.25;
const MAX_DIM: usize = 1 << 20;

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    if flow.uv.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("write_flo: non-finite flow values"));
    }
    let mut buf: Vec<u8> = Vec::with_capacity(12 + flow.uv.len() * 4);
    buf.extend_from_slice(&FLO_TAG.to_le_bytes());
    buf.extend_from_slice(&(flow.w as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.h as i32).to_le_bytes());
    for v in &flow.uv {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::format(format!(
            "flo file is {} bytes, smaller than the 12-byte header",
            bytes.len()
        )));
    }
    let magic = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != FLO_TAG {
        return Err(Error::format(format!(
            "bad flo magic bytes {:02x} {:02x} {:02x} {:02x} (expected 50 49 45 48)",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let w = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let h = i32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if w <= 0 || h <= 0 || w as usize > MAX_DIM || h as usize > MAX_DIM {
        return Err(Error::format(format!("implausible flo dims {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expect = 12 + w * h * 2 * 4;
    if bytes.len() != expect {
        return Err(Error::format(format!(
            "flo file holds {} bytes, {w}x{h} flow needs exactly {expect}",
            bytes.len()
        )));
    }
    let mut uv = Vec::with_capacity(w * h * 2);
    for chunk in bytes[12..].chunks_exact(4) {
        uv.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    FlowField::new(h, w, uv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("corrflow_flo_test");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let uv: Vec<f32> = (0..5 * 3 * 2).map(|_| rng.gen::<f32>() * 40.0 - 20.0).collect();
        let flow = FlowField::new(3, 5, uv.clone()).unwrap();
        let path = tmp("roundtrip.flo");
        write_flo(&flow, &path).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(back.h, 3);
        assert_eq!(back.w, 5);
        assert_eq!(back.uv.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   uv.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn magic_bytes_are_pieh() {
        let flow = FlowField::zeros(2, 2);
        let path = tmp("magic.flo");
        write_flo(&flow, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"PIEH");
        // sanity: the independent reference encoding of the tag float
        assert_eq!(&FLO_TAG.to_le_bytes(), &[0x50, 0x49, 0x45, 0x48]);
    }

    #[test]
    fn truncated_file_is_rejected_without_partial_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let uv: Vec<f32> = (0..4 * 4 * 2).map(|_| rng.gen()).collect();
        let flow = FlowField::new(4, 4, uv).unwrap();
        let path = tmp("truncated.flo");
        write_flo(&flow, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_flo(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_is_named_in_the_error() {
        let path = tmp("badmagic.flo");
        fs::write(&path, [0xde, 0xad, 0xbe, 0xef, 1, 0, 0, 0, 1, 0, 0, 0]).unwrap();
        let err = read_flo(&path).err().expect("must fail");
        let msg = err.to_string();
        assert!(msg.contains("de ad be ef"), "{msg}");
    }

    #[test]
    fn non_finite_flow_is_not_written() {
        let mut flow = FlowField::zeros(2, 2);
        flow.uv[0] = f32::INFINITY;
        assert!(matches!(
            write_flo(&flow, &tmp("inf.flo")),
            Err(Error::Numeric(_))
        ));
    }
}
