//! A small binary tensor container (`SPT1`): magic, rank, little-endian u64
//! dims, a dtype code and little-endian f32 payload. Condition images and
//! attention maps are exchanged in this format, optionally with a PNG preview.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPT1";
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct HostTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl HostTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("tensor container: {m}"));
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(bad("missing SPT1 header"));
        }
        let rank = bytes[4] as usize;
        let dims_end = 5 + 8 * rank;
        if bytes.len() < dims_end + 1 {
            return Err(bad("truncated dims"));
        }
        let dims: Vec<usize> = bytes[5..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        if bytes[dims_end] != DTYPE_F32 {
            return Err(bad("unsupported dtype"));
        }
        let payload = &bytes[dims_end + 1..];
        let n: usize = dims.iter().product();
        if payload.len() != 4 * n {
            return Err(bad(&format!("payload of {} bytes for {n} values", payload.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn from_tensor(t: &tch::Tensor) -> Result<Self> {
        let dims = t.size().iter().map(|&d| d as usize).collect();
        let flat = t
            .detach()
            .to_device(tch::Device::Cpu)
            .to_kind(tch::Kind::Float)
            .contiguous()
            .view([-1]);
        Self::new(dims, Vec::<f32>::try_from(&flat)?)
    }

    pub fn to_tensor(&self) -> tch::Tensor {
        let dims: Vec<i64> = self.dims.iter().map(|&d| d as i64).collect();
        tch::Tensor::from_slice(&self.data).reshape(dims.as_slice())
    }
}

/// Encodes an `H x W x 3` image with values in `[0, 1]` as PNG.
pub fn png_from_unit_rgb(height: usize, width: usize, hwc: &[f32]) -> Result<Vec<u8>> {
    if hwc.len() != height * width * 3 {
        return Err(Error::Shape(format!("{} values for {height}x{width}x3", hwc.len())));
    }
    let bytes = hwc
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(width as u32, height as u32, bytes).expect("length checked");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Grayscale PNG of a single-channel map, min-max normalized.
pub fn png_from_map(height: usize, width: usize, map: &[f32]) -> Result<Vec<u8>> {
    let (lo, hi) = map
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let rgb: Vec<f32> = map
        .iter()
        .flat_map(|&v| {
            let g = (v - lo) / span;
            [g, g, g]
        })
        .collect();
    png_from_unit_rgb(height, width, &rgb)
}
