//! Binary 8-bit PGM (`P5`) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Raw 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Cursor<'_> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.to_string(),
            pos: self.pos,
            msg: msg.into(),
        })
    }

    /// Skip whitespace and `#` comments.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.fail(format!("{what} {text} is out of range"))
            }
        }
    }
}

/// Parse a `P5` byte stream. `path` only labels errors.
pub fn parse_pgm(bytes: &[u8], path: &str) -> Result<Gray8> {
    let mut c = Cursor { bytes, pos: 0, path };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return c.fail("not a binary PGM (magic must be P5)");
    }
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return c.fail(format!("empty image {width}x{height}"));
    }
    if maxval != 255 {
        return c.fail(format!("maxval {maxval} unsupported (only 8-bit, 255)"));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return c.fail("expected a single whitespace byte after maxval"),
    }
    let need = width * height;
    let have = bytes.len() - c.pos;
    if have < need {
        c.pos = bytes.len();
        return c.fail(format!("truncated payload: {have} of {need} bytes"));
    }
    Ok(Gray8 {
        width,
        height,
        pixels: bytes[c.pos..c.pos + need].to_vec(),
    })
}

pub fn encode_pgm(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_gray8(path: &Path) -> Result<Gray8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, &path.display().to_string())
}

pub fn write_gray8(img: &Gray8, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Image as `[1, H, W]` with values `byte / 255`.
pub fn read_image_pgm(path: &Path) -> Result<Tensor> {
    let img = read_gray8(path)?;
    let data = img.pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[1, img.height, img.width], data)
}

/// Mask as `[1, H, W]` in {0, 1}, thresholding bytes at 128.
pub fn read_mask_pgm(path: &Path) -> Result<Tensor> {
    let img = read_gray8(path)?;
    let data = img.pixels.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, img.height, img.width], data)
}

fn raster(t: &Tensor, f: impl Fn(f64) -> u8) -> Result<Gray8> {
    let s = t.shape();
    let (h, w) = match s {
        [1, h, w] | [1, 1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::shape(format!("cannot write {s:?} as a single-channel image"))),
    };
    Ok(Gray8 {
        width: w,
        height: h,
        pixels: t.data().iter().map(|&v| f(v)).collect(),
    })
}

/// Intensities in [0, 1] mapped to `round(255 v)`.
pub fn to_gray8(t: &Tensor) -> Result<Gray8> {
    raster(t, |v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Binary mask written as 0 / 255; anything >= 0.5 counts as foreground.
pub fn mask_to_gray8(t: &Tensor) -> Result<Gray8> {
    raster(t, |v| if v >= 0.5 { 255 } else { 0 })
}

pub fn write_image_pgm(t: &Tensor, path: &Path) -> Result<()> {
    write_gray8(&to_gray8(t)?, path)
}

pub fn write_mask_pgm(mask: &Tensor, path: &Path) -> Result<()> {
    write_gray8(&mask_to_gray8(mask)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_pos(bytes: &[u8]) -> usize {
        match parse_pgm(bytes, "t.pgm").unwrap_err() {
            Error::Format { pos, .. } => pos,
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn byte_values_scale_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = Gray8 { width: 2, height: 2, pixels: vec![0, 128, 255, 64] };
        write_gray8(&img, &p).unwrap();
        let t = read_image_pgm(&p).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_mask_pgm(&Tensor::ones(&[1, 3, 5]), &p).unwrap();
        assert_eq!(read_mask_pgm(&p).unwrap(), Tensor::ones(&[1, 3, 5]));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = parse_pgm(b"P5\n# made by hand\n2 1\n255\n\x07\x08", "c").unwrap();
        assert_eq!(img.pixels, vec![7, 8]);
    }

    #[test]
    fn malformed_inputs_report_positions() {
        assert_eq!(err_pos(b"P2\n2 2\n255\n0 0 0 0"), 0);
        assert_eq!(err_pos(b"P5\n2 x\n255\n"), 5);
        assert_eq!(err_pos(b"P5\n2 2\n65535\n"), 12);
        assert_eq!(err_pos(b"P5\n2 2\n255\n\x01\x02"), 13);
    }
}
