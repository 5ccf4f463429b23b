//! Binary PPM (P6, maxval 255) codec for `[3, H, W]` tensors in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::DataError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<(), DataError> {
    let bad = |detail: String| DataError::Ppm { path: path.to_path_buf(), detail };
    let &[3, h, w] = image.shape() else {
        return Err(bad(format!("expected [3, H, W] tensor, got {:?}", image.shape())));
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = image.data();
    bytes.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = data[c * plane + i].to_f64_lossy().clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let bad = |detail: &str| DataError::Ppm { path: path.to_path_buf(), detail: detail.to_string() };

    // Header: magic, width, height, maxval separated by whitespace, with
    // optional comments, then a single whitespace byte.
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let plane = h * w;
    let pixels = bytes.get(pos..pos + 3 * plane).ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![T::zero(); 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = T::from_f64_lossy(pixels[3 * i + c] as f64 / 255.0);
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}
