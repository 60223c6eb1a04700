//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::io::{Read, Write};

use crate::error::{bail, Result};

/// Interleaved 8-bit image; `channels` is 1 (PGM) or 3 (PPM).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl PnmImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            bail!(InvalidArgument, "PNM images have 1 or 3 channels, got {channels}");
        }
        if pixels.len() != width * height * channels {
            bail!(Shape, "{}x{}x{} image needs {} bytes, got {}", width, height, channels, width * height * channels, pixels.len());
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Planar `[C, H, W]` floats in `[0, 1]`.
    pub fn to_planar(&self) -> Vec<f32> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = f32::from(self.pixels[(y * w + x) * c + ch]) / 255.0;
                }
            }
        }
        out
    }

    /// Inverse of [`PnmImage::to_planar`]; values are clamped and rounded.
    pub fn from_planar(channels: usize, height: usize, width: usize, data: &[f32]) -> Result<Self> {
        if data.len() != channels * height * width {
            bail!(Shape, "planar buffer has {} values, expected {}", data.len(), channels * height * width);
        }
        let mut pixels = vec![0u8; data.len()];
        for ch in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    pixels[(y * width + x) * channels + ch] = quantize(data[(ch * height + y) * width + x]);
                }
            }
        }
        Self::new(width, height, channels, pixels)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut pos = 0;
        let magic = header_token(&bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => bail!(Format, "unsupported PNM magic '{other}' (need P5 or P6)"),
        };
        let width = header_number(&bytes, &mut pos)?;
        let height = header_number(&bytes, &mut pos)?;
        let maxval = header_number(&bytes, &mut pos)?;
        if maxval != 255 {
            bail!(Format, "only maxval 255 is supported, got {maxval}");
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * channels;
        if bytes.len() < pos + need {
            bail!(Format, "raster truncated: need {need} bytes");
        }
        Self::new(width, height, channels, bytes[pos..pos + need].to_vec())
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
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
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        bail!(Format, "unexpected end of PNM header");
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| crate::error::Error::Format(format!("bad PNM header number '{tok}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_pgm_bytes() {
        let img = PnmImage::new(2, 1, 1, vec![0, 255]).unwrap();
        let mut buf = Vec::new();
        img.write(&mut buf).unwrap();
        assert_eq!(buf, b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn reads_comments_and_round_trips() {
        let raw = b"P6\n# made by hand\n2 2\n255\n\x01\x02\x03\x04\x05\x06\x07\x08\x09\x0a\x0b\x0c";
        let img = PnmImage::read(&raw[..]).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 3));
        let planar = img.to_planar();
        let back = PnmImage::from_planar(3, 2, 2, &planar).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PnmImage::read(&b"P3\n1 1\n255\n"[..]).is_err());
        assert!(PnmImage::read(&b"P5\n2 2\n255\n\x00"[..]).is_err());
        assert!(PnmImage::read(&b"P5\n1 1\n65535\n\x00\x00"[..]).is_err());
    }
}
