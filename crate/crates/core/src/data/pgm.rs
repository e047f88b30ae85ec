//! Binary 16-bit PGM (`P5`, maxval 65535, big-endian samples).

use std::fs;
use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAXVAL: f64 = 65535.0;

/// Encodes a `(1, H, W)` tensor with values in `[0, 1]` as `round(p * 65535)`.
pub fn encode_pgm(pixels: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *pixels.shape() {
        [1, h, w] => (h, w),
        ref s => {
            return Err(Error::shape(
                "write_pgm",
                format!("expected (1, H, W), got {s:?}"),
            ))
        }
    };
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * w * h);
    for &p in pixels.data() {
        let q = (p.clamp(0.0, 1.0) * MAXVAL).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P5" {
        return Err(fail(&format!(
            "unsupported magic `{}` (only binary P5 is accepted)",
            String::from_utf8_lossy(fields[0])
        )));
    }
    let num = |f: &[u8], what: &str| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(&format!("bad {what}")))
    };
    let w = num(fields[1], "width")?;
    let h = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(fail("dimensions or maxval out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bpp = if maxval > 255 { 2 } else { 1 };
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h * bpp {
        return Err(fail(&format!(
            "expected {} raster bytes, found {}",
            w * h * bpp,
            raster.len()
        )));
    }
    let scale = maxval as f64;
    let data = if bpp == 2 {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    } else {
        raster.iter().map(|&b| b as f64 / scale).collect()
    };
    let t = Tensor::new(vec![1, h, w], data)?;
    if t.data().iter().any(|&v| v > 1.0) {
        return Err(fail("sample exceeds maxval"));
    }
    Ok(t)
}

pub fn write_pgm(path: &Path, pixels: &Tensor) -> Result<()> {
    write_atomic(path, &encode_pgm(pixels)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn zero_image_layout() {
        let bytes = encode_pgm(&Tensor::zeros(vec![1, 2, 3])).unwrap();
        let header = b"P5\n3 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 12);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn samples_are_big_endian() {
        let t = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let bytes = encode_pgm(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[0xFF, 0xFF]);
        let t = Tensor::new(vec![1, 1, 1], vec![256.0 / 65535.0]).unwrap();
        let bytes = encode_pgm(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[0x01, 0x00]);
    }

    #[test]
    fn rejects_ascii_and_truncation() {
        let p = Path::new("x.pgm");
        let err = decode_pgm(b"P2\n1 1\n255\n0\n", p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(decode_pgm(b"P5\n2 2\n65535\n\0\0", p).is_err());
        assert!(decode_pgm(b"P5\n2", p).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let t = decode_pgm(b"P5\n# made by hand\n1 1\n255\n\x80", Path::new("c.pgm")).unwrap();
        assert!((t.data()[0] - 128.0 / 255.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
            let mut rng = Rng::new(seed);
            let data: Vec<f64> = (0..h * w).map(|_| rng.next_f64()).collect();
            let t = Tensor::new(vec![1, h, w], data).unwrap();
            let back = decode_pgm(&encode_pgm(&t).unwrap(), Path::new("p.pgm")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.max_abs_diff(&t) <= 0.5 / 65535.0 + 1e-15);
        }
    }
}
