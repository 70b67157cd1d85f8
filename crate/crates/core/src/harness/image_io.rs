//! Binary 8-bit PPM (P6, colour) and PGM (P5, grayscale).
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]`; writing clamps
//! and rounds to 8 bits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn encode_pnm(img: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::InvalidParameter(format!("image shape {:?}", img.shape())));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::InvalidParameter(format!("{c} channels cannot be stored as PNM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            let v = img.data()[ch * plane + p];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_pnm(img: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pnm(img)?)?;
    Ok(())
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("expected P5 or P6 magic number")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only 8-bit (maxval 255) images are supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    pos += 1;
    let n = w * h * channels;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated raster"))?;
    let plane = w * h;
    let mut data = vec![0.0; n];
    for p in 0..plane {
        for ch in 0..channels {
            data[ch * plane + p] = raster[p * channels + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    decode_pnm(&std::fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantized(c: usize) -> Tensor {
        Tensor::from_fn(&[c, 5, 7], |i| ((i * 37) % 256) as f64 / 255.0)
    }

    #[test]
    fn round_trip_is_lossless_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let img = quantized(c);
            let path = dir.path().join(format!("img{c}.pnm"));
            write_pnm(&img, &path).unwrap();
            assert_eq!(read_pnm(&path).unwrap(), img);
        }
    }

    #[test]
    fn black_image_size_is_header_plus_raster() {
        let img = Tensor::zeros(&[3, 4, 6]);
        let bytes = encode_pnm(&img).unwrap();
        let header = "P6\n6 4\n255\n".len();
        assert_eq!(bytes.len(), header + 4 * 6 * 3);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = encode_pnm(&quantized(1)).unwrap();
        bytes[1] = b'2';
        assert!(matches!(decode_pnm(&bytes, Path::new("x")), Err(Error::Format { .. })));
        let bytes = encode_pnm(&quantized(3)).unwrap();
        assert!(decode_pnm(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = decode_pnm(&bytes, Path::new("x")).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }
}
