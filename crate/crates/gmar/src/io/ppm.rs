//! Binary PPM (P6) decode and encode.
//!
//! Only maxval 255 is supported. Decoding maps bytes to `[0,1]` by
//! dividing by 255; encoding clamps to `[0,1]` and rounds, so a
//! save/load round trip is lossless for 8-bit content. Format errors
//! carry the byte offset where parsing failed.

use super::Image;
use crate::error::{Error, Result};
use std::path::Path;

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Scanner { bytes, pos: 0 }
    }

    fn fail(&self, what: &str) -> Error {
        Error::format(format!("{what} at byte offset {}", self.pos))
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        Some(b)
    }

    /// Skips PPM whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(b) = self.peek() {
            match b {
                b' ' | b'\t' | b'\r' | b'\n' => {
                    self.pos += 1;
                }
                b'#' => {
                    while let Some(c) = self.bump() {
                        if c == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(b) = self.peek() {
            if b.is_ascii_digit() {
                value = value
                    .checked_mul(10)
                    .and_then(|v| v.checked_add((b - b'0') as usize))
                    .ok_or_else(|| self.fail(&format!("{what} overflows")))?;
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.fail(&format!("expected {what}")));
        }
        Ok(value)
    }
}

/// Decodes a binary PPM (P6, maxval 255) byte buffer.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut s = Scanner::new(bytes);
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(s.fail("bad magic, expected P6"));
    }
    s.pos = 2;
    let width = s.read_uint("width")?;
    let height = s.read_uint("height")?;
    let maxval = s.read_uint("maxval")?;
    if maxval != 255 {
        return Err(s.fail(&format!("unsupported maxval {maxval}, only 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let header_end = s.pos;
    match s.bump() {
        Some(b' ' | b'\t' | b'\r' | b'\n') => {}
        _ => {
            return Err(Error::format(format!(
                "expected single whitespace before raster at byte offset {header_end}"
            )))
        }
    }
    if width == 0 || height == 0 {
        return Err(s.fail("zero image dimension"));
    }
    let need = width * height * 3;
    let raster = &bytes[s.pos..];
    if raster.len() < need {
        return Err(Error::format(format!(
            "truncated raster: need {need} bytes, have {} at byte offset {}",
            raster.len(),
            s.pos
        )));
    }
    let pixels = raster[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(width, height, pixels)
}

/// Encodes an image as binary PPM, clamping values into `[0,1]`.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(
        image
            .pixels()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn load_image_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    decode_ppm(&bytes)
}

pub fn save_image_ppm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_ppm(image))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_reference_2x2() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 2);
        assert_eq!(
            img.pixels(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn rejects_wrong_maxval() {
        let mut bytes = b"P6\n1 1\n65535\n".to_vec();
        bytes.extend([0, 0, 0, 0, 0, 0]);
        let err = decode_ppm(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("maxval"));
    }

    #[test]
    fn rejects_bad_magic_with_offset() {
        let err = decode_ppm(b"P5\n1 1\n255\n\0").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("magic") && msg.contains("offset 0"), "{msg}");
    }

    #[test]
    fn rejects_truncated_raster() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255, 0, 0]);
        let err = decode_ppm(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn handles_comments_in_header() {
        let mut bytes = b"P6\n# a comment\n2 1 # another\n255\n".to_vec();
        bytes.extend([10, 20, 30, 40, 50, 60]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.width(), 2);
        assert!((img.get(0, 0, 0) - 10.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn round_trip_is_lossless_for_8bit_content() {
        let pixels: Vec<f64> = (0..27).map(|i| (i * 9 % 256) as f64 / 255.0).collect();
        let img = Image::new(3, 3, pixels).unwrap();
        let encoded = encode_ppm(&img);
        let back = decode_ppm(&encoded).unwrap();
        assert_eq!(back, img);
        // Encoding again yields identical bytes.
        assert_eq!(encode_ppm(&back), encoded);
    }
}
