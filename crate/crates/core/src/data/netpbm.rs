//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw 8-bit raster, channel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn img_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.into() }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(img_err(path, "expected P6 or P5 magic")),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let (Some(width), Some(height), Some(maxval)) = (hdr.number(), hdr.number(), hdr.number()) else {
        return Err(img_err(path, "malformed header"));
    };
    if width == 0 || height == 0 {
        return Err(img_err(path, "zero image extent"));
    }
    if maxval != 255 {
        return Err(img_err(path, format!("maxval {maxval} unsupported (need 255)")));
    }
    if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(img_err(path, "missing whitespace after maxval"));
    }
    let data = &bytes[hdr.pos + 1..];
    let need = width * height * channels;
    if data.len() < need {
        return Err(img_err(path, format!("truncated pixel data: {} of {need} bytes", data.len())));
    }
    Ok(Raster { width, height, channels, pixels: data[..need].to_vec() })
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| img_err(path, e.to_string()))?;
    decode(&bytes, path)
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    fs::write(path, encode(r)).map_err(|e| img_err(path, e.to_string()))
}

pub fn byte_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn unit_to_byte(x: f32) -> u8 {
    (x.clamp(-1.0, 1.0) * 127.5 + 127.5).round() as u8
}

/// Interleaved RGB bytes to a `(3, H, W)` tensor in [-1, 1].
pub fn raster_to_tensor(r: &Raster) -> Result<Tensor<f32>> {
    if r.channels != 3 {
        return Err(Error::InvalidArgument("expected an RGB raster".into()));
    }
    let hw = r.width * r.height;
    let mut data = vec![0.0; 3 * hw];
    for (i, px) in r.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + i] = byte_to_unit(px[c]);
        }
    }
    Tensor::from_vec(data, &[3, r.height, r.width])
}

fn planar(t: &Tensor<f32>, channels: usize) -> Result<(usize, usize)> {
    let s = t.shape();
    let (h, w) = match s {
        [c, h, w] if *c == channels => (*h, *w),
        [1, c, h, w] if *c == channels => (*h, *w),
        [h, w] if channels == 1 => (*h, *w),
        _ => return Err(Error::InvalidShape(s.to_vec(), "unexpected image tensor shape")),
    };
    Ok((h, w))
}

pub fn tensor_to_raster(t: &Tensor<f32>) -> Result<Raster> {
    let (h, w) = planar(t, 3)?;
    let hw = h * w;
    let d = t.data();
    let mut pixels = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            pixels.push(unit_to_byte(d[c * hw + i]));
        }
    }
    Ok(Raster { width: w, height: h, channels: 3, pixels })
}

pub fn image_read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let r = read_raster(path)?;
    if r.channels != 3 {
        return Err(img_err(path, "expected a P6 image"));
    }
    raster_to_tensor(&r)
}

/// Writes a `(3, H, W)` or `(1, 3, H, W)` tensor in [-1, 1].
pub fn image_write_ppm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_raster(path, &tensor_to_raster(t)?)
}

/// Writes a `(1, H, W)`, `(1, 1, H, W)` or `(H, W)` tensor in [0, 1].
pub fn mask_write_pgm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = planar(t, 1)?;
    let pixels = t.data().iter().map(|m| (m.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_raster(path, &Raster { width: w, height: h, channels: 1, pixels })
}
