//! Binary PGM (P5) and PPM (P6) reading and writing, 8-bit, maxval 255.
//! Lossless for label maps; unit-interval images quantize with round-half-up.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::Labels;
use crate::tensor::{Shape, Tensor};

/// Clamp to [0, 1] and quantize to 0..255 rounding half up.
pub fn quantize_unit(vals: &[f64]) -> Vec<u8> {
    vals.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn write_pnm(path: &Path, magic: &str, w: usize, h: usize, data: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    f.write_all(data)?;
    f.flush()?;
    Ok(())
}

pub fn write_pgm<P: AsRef<Path>>(path: P, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::Shape(format!("PGM payload {} != {w}x{h}", gray.len())));
    }
    write_pnm(path.as_ref(), "P5", w, h, gray)
}

pub fn write_ppm<P: AsRef<Path>>(path: P, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * w * h {
        return Err(Error::Shape(format!("PPM payload {} != 3x{w}x{h}", rgb.len())));
    }
    write_pnm(path.as_ref(), "P6", w, h, rgb)
}

struct PnmHeader {
    channels: usize,
    w: usize,
    h: usize,
}

fn read_header<R: Read>(r: &mut R, expect: &str) -> Result<PnmHeader> {
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic).map_err(|_| Error::CorruptImage("missing magic".into()))?;
    let magic = std::str::from_utf8(&magic).map_err(|_| Error::CorruptImage("bad magic".into()))?;
    if magic != expect {
        return Err(Error::CorruptImage(format!("expected {expect}, found {magic}")));
    }
    let channels = if expect == "P6" { 3 } else { 1 };

    // Three decimal fields (width, height, maxval) separated by whitespace,
    // with '#' comments allowed between them.
    let mut fields = [0usize; 3];
    let mut byte = [0u8; 1];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            r.read_exact(&mut byte).map_err(|_| Error::CorruptImage("truncated header".into()))?;
            match byte[0] {
                b' ' | b'\t' | b'\r' | b'\n' => continue,
                b'#' => {
                    while byte[0] != b'\n' {
                        r.read_exact(&mut byte)
                            .map_err(|_| Error::CorruptImage("truncated comment".into()))?;
                    }
                }
                _ => break,
            }
        }
        let mut value: usize = 0;
        let mut any = false;
        loop {
            match byte[0] {
                b'0'..=b'9' => {
                    any = true;
                    value = value * 10 + (byte[0] - b'0') as usize;
                }
                b' ' | b'\t' | b'\r' | b'\n' => break,
                c => return Err(Error::CorruptImage(format!("unexpected byte {c:#x} in header"))),
            }
            if r.read(&mut byte)? == 0 {
                return Err(Error::CorruptImage("truncated header".into()));
            }
        }
        if !any {
            return Err(Error::CorruptImage("empty header field".into()));
        }
        *field = value;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::CorruptImage(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::CorruptImage("zero-sized image".into()));
    }
    Ok(PnmHeader { channels, w, h })
}

fn read_pnm(path: &Path, expect: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let hdr = read_header(&mut r, expect)?;
    let mut data = vec![0u8; hdr.channels * hdr.w * hdr.h];
    r.read_exact(&mut data)
        .map_err(|_| Error::CorruptImage("truncated pixel data".into()))?;
    Ok((hdr.w, hdr.h, data))
}

pub fn read_pgm<P: AsRef<Path>>(path: P) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(path.as_ref(), "P5")
}

pub fn read_ppm<P: AsRef<Path>>(path: P) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(path.as_ref(), "P6")
}

/// Write a (1, 3, H, W) unit-interval image as binary PPM.
pub fn save_image<P: AsRef<Path>>(path: P, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Shape(format!("expected (1,3,H,W) image, got {s}")));
    }
    let hw = s.h * s.w;
    let mut interleaved = vec![0.0f64; 3 * hw];
    for c in 0..3 {
        for p in 0..hw {
            interleaved[p * 3 + c] = image.data()[c * hw + p];
        }
    }
    write_ppm(path, s.w, s.h, &quantize_unit(&interleaved))
}

/// Read a binary PPM back as a (1, 3, H, W) image in [0, 1].
pub fn load_image<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    let (w, h, rgb) = read_ppm(path)?;
    let hw = h * w;
    let mut data = vec![0.0f64; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            data[c * hw + p] = rgb[p * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w)?, data)
}

/// Write a single-image label map as binary PGM (exact 8-bit round trip).
pub fn save_labels<P: AsRef<Path>>(path: P, labels: &Labels) -> Result<()> {
    if labels.n != 1 {
        return Err(Error::Shape("expected a single-image label map".into()));
    }
    write_pgm(path, labels.w, labels.h, labels.data())
}

pub fn load_labels<P: AsRef<Path>>(path: P) -> Result<Labels> {
    let (w, h, data) = read_pgm(path)?;
    Labels::new(1, h, w, data)
}
