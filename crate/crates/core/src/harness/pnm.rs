//! Binary PGM (P5) / PPM (P6) reading and PGM writing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::dim(
            "pgm",
            format!("{} pixels for {width}x{height}", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, pixels)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u16>,
}

impl Pnm {
    /// `(1, channels, h, w)` in `[0, 1]`. A grey image is repeated across
    /// channels; a colour image is averaged down to one channel.
    pub fn to_tensor(&self, channels: usize) -> Result<Tensor<f32>> {
        let (w, h) = (self.width, self.height);
        let scale = 1.0 / self.maxval as f32;
        let sample = |i: usize, j: usize, c: usize| self.samples[(i * w + j) * self.channels + c] as f32 * scale;
        let mut t = Tensor::zeros([1, channels, h, w]);
        for c in 0..channels {
            for i in 0..h {
                for j in 0..w {
                    let v = match (self.channels, channels) {
                        (1, _) => sample(i, j, 0),
                        (3, 3) => sample(i, j, c),
                        (3, 1) => (sample(i, j, 0) + sample(i, j, 1) + sample(i, j, 2)) / 3.0,
                        (have, want) => {
                            return Err(Error::usage(format!(
                                "cannot map a {have}-channel image to {want} channels"
                            )))
                        }
                    };
                    t.set(0, c, i, j, v);
                }
            }
        }
        Ok(t)
    }
}

pub fn read_pnm(bytes: &[u8]) -> Result<Pnm> {
    let bad = |m: &str| Error::Format(format!("pnm: {m}"));
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > u16::MAX as usize {
        return Err(bad("zero dimension or maxval out of range"));
    }
    let wide = maxval > 255;
    let count = width * height * channels;
    let need = count * if wide { 2 } else { 1 };
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(bad("truncated raster"));
    }
    let samples = if wide {
        raster[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raster[..need].iter().map(|&b| b as u16).collect()
    };
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_layout() {
        let b = encode_pgm(3, 2, &[0, 1, 2, 3, 4, 255]).unwrap();
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(b.len(), 11 + 6);
        assert!(encode_pgm(3, 2, &[0; 5]).is_err());
    }

    #[test]
    fn round_trip_and_comments() {
        let b = encode_pgm(2, 2, &[0, 85, 170, 255]).unwrap();
        let p = read_pnm(&b).unwrap();
        assert_eq!((p.width, p.height, p.channels, p.maxval), (2, 2, 1, 255));
        assert_eq!(p.samples, vec![0, 85, 170, 255]);
        let t = p.to_tensor(3).unwrap();
        assert_eq!(t.at(0, 2, 1, 1), 1.0);

        let ppm = b"P6 # colour\n1 1\n# max\n255\n\x00\x7f\xff";
        let p = read_pnm(ppm).unwrap();
        assert_eq!(p.samples, vec![0, 127, 255]);
        assert!((p.to_tensor(1).unwrap().data()[0] - 382.0 / 765.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(read_pnm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(read_pnm(b"P5\n2").is_err());
    }
}
