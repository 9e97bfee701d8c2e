//! Minimal binary PGM/PPM reader and writer.
//!
//! Covers exactly what the crate needs: 8-bit and 16-bit grayscale (P5) and
//! 8-bit color (P6). Multi-byte samples are big-endian per the Netpbm
//! convention.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// A grayscale image with samples up to 16 bits.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Declared maximum sample value (255 for 8-bit files, up to 65535).
    pub maxval: u16,
    /// Row-major samples, `height * width` entries.
    pub pixels: Vec<u16>,
}

/// An 8-bit RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB, `height * width * 3` entries.
    pub pixels: Vec<u8>,
}

fn write_all(path: &Path, chunks: &[&[u8]]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for chunk in chunks {
        w.write_all(chunk).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a binary PGM. Samples wider than 8 bits (maxval >= 256) are stored
/// as two bytes each, big-endian.
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure!(img.width >= 1 && img.height >= 1, "image must be at least 1x1");
    ensure!(img.maxval >= 1, "maxval must be >= 1");
    ensure!(
        img.pixels.len() == img.width * img.height,
        "pixel buffer has {} entries, expected {}",
        img.pixels.len(),
        img.width * img.height
    );
    ensure!(
        img.pixels.iter().all(|&p| p <= img.maxval),
        "a sample exceeds the declared maxval {}",
        img.maxval
    );
    let header = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval);
    let mut data = Vec::with_capacity(img.pixels.len() * 2);
    if img.maxval >= 256 {
        for &p in &img.pixels {
            data.extend_from_slice(&p.to_be_bytes());
        }
    } else {
        data.extend(img.pixels.iter().map(|&p| p as u8));
    }
    write_all(path, &[header.as_bytes(), &data])
}

/// Writes a binary PPM (8-bit RGB).
pub fn save_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure!(img.width >= 1 && img.height >= 1, "image must be at least 1x1");
    ensure!(
        img.pixels.len() == img.width * img.height * 3,
        "pixel buffer has {} entries, expected {}",
        img.pixels.len(),
        img.width * img.height * 3
    );
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    write_all(path, &[header.as_bytes(), &img.pixels])
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> HeaderParser<'a> {
    /// Reads the next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(self.path, "truncated header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(self.path, "non-numeric header field"))
    }
}

/// Parses a Netpbm header, returning (width, height, maxval, payload offset).
fn parse_header(bytes: &[u8], path: &Path, magic: &str) -> Result<(usize, usize, usize, usize)> {
    let mut parser = HeaderParser { bytes, pos: 0, path };
    let m = parser.token()?;
    if m != magic.as_bytes() {
        return Err(Error::parse(
            path,
            format!("not a {magic} file (magic {:?})", String::from_utf8_lossy(m)),
        ));
    }
    let width = parser.number()?;
    let height = parser.number()?;
    let maxval = parser.number()?;
    if width < 1 || height < 1 {
        return Err(Error::parse(path, "image must be at least 1x1"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(Error::parse(path, format!("maxval {maxval} out of range")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if parser.pos >= bytes.len() || !bytes[parser.pos].is_ascii_whitespace() {
        return Err(Error::parse(path, "missing whitespace before payload"));
    }
    Ok((width, height, maxval, parser.pos + 1))
}

/// Reads a binary PGM (8-bit or 16-bit).
pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, maxval, start) = parse_header(&bytes, path, "P5")?;
    let n = width * height;
    let payload = &bytes[start..];
    let expected = if maxval >= 256 { n * 2 } else { n };
    if payload.len() != expected {
        return Err(Error::parse(
            path,
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    let pixels: Vec<u16> = if maxval >= 256 {
        payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        payload.iter().map(|&b| b as u16).collect()
    };
    if pixels.iter().any(|&p| p as usize > maxval) {
        return Err(Error::parse(path, format!("a sample exceeds the declared maxval {maxval}")));
    }
    Ok(GrayImage { width, height, maxval: maxval as u16, pixels })
}

/// Reads a binary PPM (8-bit RGB only).
pub fn load_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, maxval, start) = parse_header(&bytes, path, "P6")?;
    if maxval != 255 {
        return Err(Error::parse(path, format!("only 8-bit PPM is supported, got maxval {maxval}")));
    }
    let n = width * height * 3;
    let payload = &bytes[start..];
    if payload.len() != n {
        return Err(Error::parse(path, format!("payload has {} bytes, expected {n}", payload.len())));
    }
    Ok(RgbImage { width, height, pixels: payload.to_vec() })
}
