//! Binary 16-bit PGM (`P5`, maxval 65535) images.
//!
//! Samples are big-endian `round(clamp(x, 0, 1) * 65535)`. Multi-channel
//! grids are written as one tall image with the channels stacked top to
//! bottom.

use velomask::{LatentGrid, Shape};

const MAXVAL: f64 = 65535.0;

/// Quantizes one value to a 16-bit sample.
pub fn quantize(x: f64) -> u16 {
    (x.clamp(0.0, 1.0) * MAXVAL).round() as u16
}

pub fn dequantize(sample: u16) -> f64 {
    f64::from(sample) / MAXVAL
}

/// Encodes `grid` as a `P5` image of size `width x (channels * height)`.
pub fn encode(grid: &LatentGrid) -> Vec<u8> {
    let shape = grid.shape();
    let header = format!("P5\n{} {}\n65535\n", shape.width, shape.channels * shape.height);
    let mut out = Vec::with_capacity(header.len() + 2 * grid.len());
    out.extend_from_slice(header.as_bytes());
    for &x in grid.as_slice() {
        out.extend_from_slice(&quantize(x).to_be_bytes());
    }
    out
}

/// Encodes a boolean mask as black (false) and white (true).
pub fn encode_mask(mask: &velomask::Mask) -> Vec<u8> {
    let values = mask.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    encode(&LatentGrid::new(mask.shape(), values).expect("mask shape is valid"))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PgmError {
    #[error("not a binary PGM (missing P5 magic)")]
    Magic,
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("only 16-bit PGM (maxval 65535) is supported, got maxval {0}")]
    Maxval(u32),
    #[error("image height {height} is not divisible into {channels} channels")]
    Channels { height: usize, channels: usize },
    #[error("PGM data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

fn header_fields(bytes: &[u8]) -> Result<([u32; 3], usize), PgmError> {
    let mut fields = [0u32; 3];
    let mut pos = 2;
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(PgmError::Header("unexpected end of header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| PgmError::Header(format!("expected a number at byte {start}")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError::Header("missing separator before raster".into()));
    }
    Ok((fields, pos + 1))
}

/// Decodes an image written by [`encode`] into a grid with `channels`
/// channels.
pub fn decode(bytes: &[u8], channels: usize) -> Result<LatentGrid, PgmError> {
    if !bytes.starts_with(b"P5") {
        return Err(PgmError::Magic);
    }
    let ([width, height, maxval], start) = header_fields(bytes)?;
    if maxval != 65535 {
        return Err(PgmError::Maxval(maxval));
    }
    let (width, height) = (width as usize, height as usize);
    if channels == 0 || height % channels != 0 {
        return Err(PgmError::Channels { height, channels });
    }
    let expected = 2 * width * height;
    let raster = &bytes[start..];
    if raster.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            found: raster.len(),
        });
    }
    let values = raster[..expected]
        .chunks_exact(2)
        .map(|c| dequantize(u16::from_be_bytes([c[0], c[1]])))
        .collect();
    LatentGrid::new(Shape::new(channels, height / channels, width), values)
        .map_err(|e| PgmError::Header(e.to_string()))
}
