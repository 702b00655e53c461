//! Binary PPM (P6) and PGM (P5) readers and writers.
//!
//! Images travel as `Tensor[3 x H x W]` (color) or `Tensor[H x W]` (gray)
//! with values in [0, 1]. Files use maxval 255.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn read_token(r: &mut impl BufRead) -> Result<String> {
    // whitespace-separated header token, skipping '#' comment lines
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::Image("unexpected end of header".into()));
            }
            return Ok(tok);
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

fn read_header(r: &mut impl BufRead, magic: &str) -> Result<(usize, usize)> {
    let m = read_token(r)?;
    if m != magic {
        return Err(Error::Image(format!("expected {magic}, found {m}")));
    }
    let w: usize = read_token(r)?
        .parse()
        .map_err(|_| Error::Image("bad width".into()))?;
    let h: usize = read_token(r)?
        .parse()
        .map_err(|_| Error::Image("bad height".into()))?;
    let maxval: usize = read_token(r)?
        .parse()
        .map_err(|_| Error::Image("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Image(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Image("zero image extent".into()));
    }
    Ok((w, h))
}

fn quantize(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[3 x H x W]` tensor as binary PPM.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("ppm wants [3 x H x W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let d = img.data();
    let plane = h * w;
    let mut row = Vec::with_capacity(3 * w);
    for i in 0..h {
        row.clear();
        for j in 0..w {
            for c in 0..3 {
                row.push(quantize(d[c * plane + i * w + j]));
            }
        }
        f.write_all(&row)?;
    }
    f.flush()?;
    Ok(())
}

/// Read a binary PPM into a `[3 x H x W]` tensor scaled to [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let (w, h) = read_header(&mut f, "P6")?;
    let mut raw = vec![0u8; 3 * h * w];
    f.read_exact(&mut raw)?;
    let plane = h * w;
    let mut data = vec![0.0 as Real; 3 * plane];
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                data[c * plane + i * w + j] = raw[(i * w + j) * 3 + c] as Real / 255.0;
            }
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}

/// Write an `[H x W]` tensor as binary PGM.
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("pgm wants [H x W], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Read a binary PGM into an `[H x W]` tensor scaled to [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let (w, h) = read_header(&mut f, "P5")?;
    let mut raw = vec![0u8; h * w];
    f.read_exact(&mut raw)?;
    let data: Vec<Real> = raw.iter().map(|&b| b as Real / 255.0).collect();
    Ok(Tensor::new(&[h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("fusetrack-imageio");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn ppm_round_trip_preserves_quantized_values() {
        let mut r = rng::stream(&[90]);
        let img = Tensor::uniform(&[3, 5, 7], 0.0, 1.0, &mut r);
        let p = tmp("rt.ppm");
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.shape(), &[3, 5, 7]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn ppm_second_round_trip_is_exact() {
        // once quantized, values are representable and survive unchanged
        let mut r = rng::stream(&[91]);
        let img = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut r);
        let p = tmp("rt2.ppm");
        write_ppm(&p, &img).unwrap();
        let once = read_ppm(&p).unwrap();
        write_ppm(&p, &once).unwrap();
        let twice = read_ppm(&p).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn pgm_round_trip_and_extremes() {
        let img = Tensor::new(&[2, 3], vec![0.0, 1.0, 0.5, 0.25, 0.75, 1.0]);
        let p = tmp("rt.pgm");
        write_pgm(&p, &img).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[1], 1.0);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let p = tmp("comment.pgm");
        std::fs::write(&p, b"P5\n# a comment line\n2 1\n# another\n255\n\x00\xff").unwrap();
        let img = read_pgm(&p).unwrap();
        assert_eq!(img.shape(), &[1, 2]);
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn wrong_magic_is_an_image_error() {
        let p = tmp("bad.pgm");
        std::fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pgm(&p), Err(crate::Error::Image(_))));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let p = tmp("short.ppm");
        std::fs::write(&p, b"P6\n2 2\n255\n\x00\x01").unwrap();
        assert!(read_ppm(&p).is_err());
    }

    #[test]
    fn out_of_range_values_clamp() {
        let img = Tensor::new(&[1, 2], vec![-0.5, 1.5]);
        let p = tmp("clamp.pgm");
        write_pgm(&p, &img).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]);
    }
}
