//! 8-bit RGB images and the binary PPM (P6) / PGM (P5) codecs used by the
//! on-disk dataset format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * height * width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "RGB image {height}×{width} needs {} bytes, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-first tensor `[3×H×W]` scaled to `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("consistent dims")
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8], path: &Path) -> Result<Self> {
        let (w, h, body) = parse_pnm(bytes, b"P6", path)?;
        if body.len() != 3 * w * h {
            return Err(ingestion(path, "pixel data length does not match header"));
        }
        Self::new(h, w, body.to_vec()).map_err(|_| ingestion(path, "empty image"))
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes, path)
    }
}

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses a binary PNM header with maxval 255; returns `(width, height, body)`.
fn parse_pnm<'a>(bytes: &'a [u8], magic: &[u8], path: &Path) -> Result<(usize, usize, &'a [u8])> {
    if !bytes.starts_with(magic) {
        return Err(ingestion(
            path,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ingestion(path, "malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ingestion(path, "malformed header"));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(ingestion(path, format!("unsupported maxval {maxval}")));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

/// Mask as P5 with values 0 and 255.
pub fn mask_to_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Parses a P5 mask; any value other than 0 or 255 is an ingestion error.
pub fn mask_from_pgm(bytes: &[u8], path: &Path) -> Result<BinaryMask> {
    let (w, h, body) = parse_pnm(bytes, b"P5", path)?;
    if body.len() != w * h {
        return Err(ingestion(path, "pixel data length does not match header"));
    }
    let mut bits = Vec::with_capacity(body.len());
    for (i, &v) in body.iter().enumerate() {
        match v {
            0 => bits.push(false),
            255 => bits.push(true),
            other => {
                return Err(ingestion(
                    path,
                    format!(
                        "non-binary mask value {other} at pixel ({}, {})",
                        i / w,
                        i % w
                    ),
                ))
            }
        }
    }
    BinaryMask::new(h, w, bits)
}
