//! Binary PGM (`P5`) files.
//!
//! Images are 8-bit and map to `[0, 1]` by dividing by the maximum value.
//! Segment ids are written as 16-bit big-endian samples.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::eval::LabelImage;
use crate::objective::BoundaryLabels;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::PgmHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::PgmHeader(format!("{what} out of range")))
    }
}

pub fn read_pgm(bytes: &[u8]) -> Result<Pgm> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::PgmHeader("missing P5 magic".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::PgmHeader(format!("empty raster {width}×{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::PgmDepth(maxval.min(u64::from(u32::MAX)) as u32));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::PgmHeader("no separator before payload".into()));
    }
    let payload = &bytes[h.pos + 1..];
    let wide = maxval > 255;
    let expected = width * height * if wide { 2 } else { 1 };
    if payload.len() < expected {
        return Err(Error::PgmTruncated {
            expected,
            found: payload.len(),
        });
    }
    let pixels = if wide {
        payload[..expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        payload[..expected].iter().map(|&b| u16::from(b)).collect()
    };
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn write_pgm<W: Write>(pgm: &Pgm, mut w: W) -> Result<()> {
    if pgm.maxval == 0 {
        return Err(Error::PgmDepth(0));
    }
    if pgm.pixels.len() != pgm.width * pgm.height {
        return Err(invalid("pixel count does not match PGM extent"));
    }
    write!(w, "P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval)?;
    if pgm.maxval > 255 {
        for &p in &pgm.pixels {
            w.write_all(&p.to_be_bytes())?;
        }
    } else {
        let bytes: Vec<u8> = pgm.pixels.iter().map(|&p| p.min(255) as u8).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn load_pgm(path: &Path) -> Result<Pgm> {
    read_pgm(&fs::read(path)?)
}

fn save_pgm(path: &Path, pgm: &Pgm) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_pgm(pgm, &mut w)?;
    w.flush()?;
    Ok(())
}

/// `1×H×W` tensor scaled to `[0, 1]`.
pub fn read_image(pgm: &Pgm) -> Tensor {
    let scale = f64::from(pgm.maxval);
    let data = pgm.pixels.iter().map(|&p| f64::from(p) / scale).collect();
    Tensor::new(vec![1, pgm.height, pgm.width], data).expect("PGM extent is non-empty")
}

/// Quantizes a single-channel image in `[0, 1]` to 8 bits.
pub fn write_image(image: &Tensor) -> Result<Pgm> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(invalid(format!("PGM images have 1 channel, got {c}")));
    }
    let pixels = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
        .collect();
    Ok(Pgm {
        width: w,
        height: h,
        maxval: 255,
        pixels,
    })
}

/// Boundary masks are stored with membrane dark: values below half the
/// maximum are boundary.
pub fn read_labels(pgm: &Pgm) -> Result<BoundaryLabels> {
    let half = u32::from(pgm.maxval).div_ceil(2);
    let mask = pgm.pixels.iter().map(|&p| u32::from(p) < half).collect();
    BoundaryLabels::new(pgm.height, pgm.width, mask)
}

pub fn write_labels(labels: &BoundaryLabels) -> Pgm {
    Pgm {
        width: labels.width(),
        height: labels.height(),
        maxval: 255,
        pixels: labels
            .mask()
            .iter()
            .map(|&b| if b { 0 } else { 255 })
            .collect(),
    }
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(read_image(&load_pgm(path)?))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    save_pgm(path, &write_image(image)?)
}

pub fn load_labels(path: &Path) -> Result<BoundaryLabels> {
    read_labels(&load_pgm(path)?)
}

pub fn save_labels(path: &Path, labels: &BoundaryLabels) -> Result<()> {
    save_pgm(path, &write_labels(labels))
}

pub fn load_segments(path: &Path) -> Result<LabelImage> {
    let pgm = load_pgm(path)?;
    LabelImage::new(
        pgm.height,
        pgm.width,
        pgm.pixels.iter().map(|&p| u32::from(p)).collect(),
    )
}

/// Writes ids as 16-bit samples; ids above 65535 are rejected.
pub fn save_segments(path: &Path, seg: &LabelImage) -> Result<()> {
    let pixels = seg
        .ids()
        .iter()
        .map(|&id| {
            u16::try_from(id).map_err(|_| invalid(format!("segment id {id} exceeds 16 bits")))
        })
        .collect::<Result<_>>()?;
    save_pgm(
        path,
        &Pgm {
            width: seg.width(),
            height: seg.height(),
            maxval: 65535,
            pixels,
        },
    )
}
