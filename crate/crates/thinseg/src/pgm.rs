//! Binary portable graymap (P5) files, 8- and 16-bit.
//!
//! Masks are written as 8-bit 0/255 and read back with "value above half
//! of maxval" as foreground. Probability maps are written as 16-bit and
//! read from either depth as `value / maxval`.

use std::fs;
use std::path::Path;

use thinseg_core::metrics::Mask;
use thinseg_core::Tensor;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_DIM: u64 = 16384;

/// Size bound checked against the header before any pixel buffer is
/// allocated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_dim: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_dim: DEFAULT_MAX_DIM,
        }
    }
}

/// Raw samples of a graymap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Header {
    width: u64,
    height: u64,
    maxval: u64,
    offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let bad = |r: &str| Error::malformed(path, r);
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 12 {
            return Err(bad("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("header must end in a single whitespace byte")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval must lie in 1..=65535"));
    }
    Ok(Header {
        width,
        height,
        maxval,
        offset: pos,
    })
}

pub fn decode(bytes: &[u8], path: &Path, limits: Limits) -> Result<Graymap> {
    let h = parse_header(bytes, path)?;
    if h.width > limits.max_dim || h.height > limits.max_dim {
        return Err(Error::DimensionOverflow {
            path: path.into(),
            width: h.width,
            height: h.height,
            cap: limits.max_dim,
        });
    }
    let depth = if h.maxval > 255 { 2 } else { 1 };
    let n = (h.width * h.height) as usize;
    let raster = &bytes[h.offset..];
    if raster.len() != n * depth {
        return Err(Error::malformed(
            path,
            format!("expected {} raster bytes, found {}", n * depth, raster.len()),
        ));
    }
    let samples: Vec<u16> = if depth == 1 {
        raster.iter().map(|&b| b as u16).collect()
    } else {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    if samples.iter().any(|&s| s as u64 > h.maxval) {
        return Err(Error::malformed(path, "sample exceeds maxval"));
    }
    Ok(Graymap {
        width: h.width as usize,
        height: h.height as usize,
        maxval: h.maxval as u16,
        samples,
    })
}

pub fn encode(g: &Graymap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", g.width, g.height, g.maxval).into_bytes();
    if g.maxval > 255 {
        for s in &g.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(g.samples.iter().map(|&s| s as u8));
    }
    out
}

pub fn read_graymap(path: &Path, limits: Limits) -> Result<Graymap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, limits)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn plane(t: &Tensor, path: &Path) -> Result<(usize, usize)> {
    t.plane_dims()
        .map_err(|_| Error::malformed(path, format!("cannot store a tensor of shape {:?}", t.shape())))
}

impl Graymap {
    /// Foreground where a sample exceeds half of maxval.
    pub fn to_mask(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| {
            2 * self.samples[y * self.width + x] as u32 > self.maxval as u32
        })
    }

    pub fn to_prob(&self) -> Tensor {
        let m = self.maxval as f64;
        Tensor::new(
            vec![self.height, self.width],
            self.samples.iter().map(|&s| s as f64 / m).collect(),
        )
        .expect("graymap extents are nonzero")
    }
}

/// Binary `[H, W]` tensor of a mask file.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let m = read_graymap(path, Limits::default())?.to_mask();
    Ok(m.to_tensor().reshape(vec![m.height(), m.width()])?)
}

pub fn read_mask_bits(path: &Path) -> Result<Mask> {
    Ok(read_graymap(path, Limits::default())?.to_mask())
}

/// Writes nonzero entries as 255, zero as 0.
pub fn write_mask(mask: &Tensor, path: &Path) -> Result<()> {
    let (height, width) = plane(mask, path)?;
    let g = Graymap {
        width,
        height,
        maxval: 255,
        samples: mask.data().iter().map(|&v| if v != 0.0 { 255 } else { 0 }).collect(),
    };
    write_bytes(path, &encode(&g))
}

/// `[H, W]` tensor of `value / maxval`.
pub fn read_prob(path: &Path) -> Result<Tensor> {
    Ok(read_graymap(path, Limits::default())?.to_prob())
}

/// Quantizes values in `[0, 1]` to 16 bits.
pub fn write_prob(prob: &Tensor, path: &Path) -> Result<()> {
    let (height, width) = plane(prob, path)?;
    if prob.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::malformed(path, "probabilities must lie in [0, 1]"));
    }
    let g = Graymap {
        width,
        height,
        maxval: 65535,
        samples: prob.data().iter().map(|&v| (v * 65535.0).round() as u16).collect(),
    };
    write_bytes(path, &encode(&g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> &Path {
        Path::new(s)
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([128, 127]);
        let g = decode(&bytes, p("x.pgm"), Limits::default()).unwrap();
        assert_eq!((g.width, g.height, g.maxval), (2, 1, 255));
        assert_eq!(g.to_mask().data(), &[true, false]);
    }

    #[test]
    fn sixteen_bit_big_endian() {
        let mut bytes = b"P5 2 1 65535\n".to_vec();
        bytes.extend([0xFF, 0xFF, 0x00, 0x00]);
        let g = decode(&bytes, p("x.pgm"), Limits::default()).unwrap();
        assert_eq!(g.to_prob().data(), &[1.0, 0.0]);
    }

    #[test]
    fn distinct_errors() {
        let bytes = b"P5 4 4 255\n\x00\x00".to_vec();
        assert!(matches!(decode(&bytes, p("t"), Limits::default()), Err(Error::Malformed { .. })));
        let bytes = b"P5 20000 2 255\n".to_vec();
        assert!(matches!(
            decode(&bytes, p("t"), Limits::default()),
            Err(Error::DimensionOverflow { .. })
        ));
        let small = Limits { max_dim: 8 };
        let bytes = b"P5 9 1 255\n".to_vec();
        assert!(matches!(decode(&bytes, p("t"), small), Err(Error::DimensionOverflow { .. })));
        assert!(matches!(decode(b"P6 1 1 255\n\x00", p("t"), Limits::default()), Err(Error::Malformed { .. })));
        assert!(matches!(decode(b"P5 1 1 300\n\x01", p("t"), Limits::default()), Err(Error::Malformed { .. })));
        assert!(matches!(read_mask(p("/nonexistent/x.pgm")), Err(Error::Io { .. })));
    }
}
