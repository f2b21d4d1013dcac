//! Binary portable pixmap (P6) and graymap (P5) encoding, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn to_byte<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `h×w×3` image in `[0, 1]` → P6 bytes.
pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::dim("encode_ppm", format!("{s:?} is not h×w×3")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// `h×w` or `h×w×1` image in `[0, 1]` → P5 bytes.
pub fn encode_pgm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = img.shape();
    if !(s.len() == 2 || (s.len() == 3 && s[2] == 1)) {
        return Err(Error::dim("encode_pgm", format!("{s:?} is not h×w")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Corrupt {
            offset: start,
            detail: "truncated header".into(),
        });
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decodes P5 (→ `h×w`) or P6 (→ `h×w×3`) bytes into `[0, 1]` values.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => {
            return Err(Error::Corrupt {
                offset: 0,
                detail: format!("unsupported magic {m:?}"),
            })
        }
    };
    let mut num = |what: &str| -> Result<usize> {
        let at = pos;
        header_token(bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::Corrupt {
                offset: at,
                detail: format!("bad {what}"),
            })
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Corrupt {
            offset: pos,
            detail: format!("maxval {maxval} unsupported"),
        });
    }
    pos += 1;
    let n = w * h * channels;
    if bytes.len() < pos + n {
        return Err(Error::Corrupt {
            offset: bytes.len(),
            detail: format!("expected {n} pixel bytes"),
        });
    }
    let data = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    if channels == 1 {
        Tensor::new([h, w], data)
    } else {
        Tensor::new([h, w, 3], data)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_byte_levels() {
        let img = Tensor::<f64>::from_fn([3, 4, 3], |i| ((i * 23) % 256) as f64 / 255.0);
        let back = decode_pnm(&encode_ppm(&img).unwrap()).unwrap();
        assert!(back.bit_eq(&img));
    }

    #[test]
    fn pgm_round_trip_and_shape() {
        let img = Tensor::<f64>::from_fn([16, 64], |i| (i % 2) as f64);
        let bytes = encode_pgm(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n64 16\n255\n"));
        assert!(decode_pnm(&bytes).unwrap().bit_eq(&img));
    }

    #[test]
    fn truncated_data_reports_offset() {
        let img = Tensor::<f64>::zeros([2, 2, 3]);
        let bytes = encode_ppm(&img).unwrap();
        assert!(matches!(
            decode_pnm(&bytes[..bytes.len() - 1]),
            Err(Error::Corrupt { .. })
        ));
    }
}
