//! Dense flow fields and the Middlebury `.flo` container.
//!
//! Layout (little-endian): the 4 bytes `PIEH`, width as i32, height as i32,
//! then `width * height` interleaved f32 `(dx, dy)` pairs in row-major order.

use std::path::Path;

use crate::error::{Error, Result};

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";

// Refuse absurd headers before allocating.
const MAX_PIXELS: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: u32,
    height: u32,
    vectors: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn new(width: u32, height: u32, vectors: Vec<[f32; 2]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("flow field must have positive dimensions"));
        }
        if vectors.len() as u64 != width as u64 * height as u64 {
            return Err(Error::invalid(format!(
                "flow field {}x{} needs {} vectors, got {}",
                width,
                height,
                width as u64 * height as u64,
                vectors.len()
            )));
        }
        if let Some(i) = vectors.iter().position(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(Error::invalid(format!(
                "non-finite flow at pixel ({}, {})",
                i as u32 % width,
                i as u32 / width
            )));
        }
        Ok(FlowField { width, height, vectors })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.vectors
    }
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::invalid("flo data shorter than its 12-byte header"));
    }
    if &bytes[0..4] != FLO_MAGIC {
        return Err(Error::invalid("bad flo magic, expected PIEH"));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::invalid(format!("bad flo dimensions {width}x{height}")));
    }
    let n = width as u64 * height as u64;
    if n > MAX_PIXELS {
        return Err(Error::invalid(format!("flo dimensions {width}x{height} too large")));
    }
    let body = &bytes[12..];
    if body.len() as u64 != n * 8 {
        return Err(Error::invalid(format!(
            "flo body has {} bytes, expected {}",
            body.len(),
            n * 8
        )));
    }
    let vectors = body
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[0..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..8].try_into().unwrap()),
            ]
        })
        .collect();
    FlowField::new(width as u32, height as u32, vectors)
}

pub fn encode_flo(field: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + field.vectors.len() * 8);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(field.width as i32).to_le_bytes());
    out.extend_from_slice(&(field.height as i32).to_le_bytes());
    for v in &field.vectors {
        out.extend_from_slice(&v[0].to_le_bytes());
        out.extend_from_slice(&v[1].to_le_bytes());
    }
    out
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::Parse { path: path.display().to_string(), line: 0, msg },
        other => other,
    })
}
