//! Binary PGM (P5) reading and writing for synthetic images and
//! attention heatmaps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

/// Writes `P5`, dimensions, maxval 255, then rows of `round(255 * v)`.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.w, img.h)?;
    let bytes: Vec<u8> = img
        .pix
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut data = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut data)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

    let mut pos = 0usize;
    let mut field = |data: &[u8]| -> Result<String> {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };

    if field(&data)? != "P5" {
        return Err(bad("not a P5 PGM"));
    }
    let w: usize = field(&data)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = field(&data)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = field(&data)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    pos += 1; // single whitespace byte after maxval
    if data.len() < pos + h * w {
        return Err(bad("truncated pixel data"));
    }
    let pix: Vec<f32> = data[pos..pos + h * w]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(GrayImage { h, w, pix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_ink() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let mut img = GrayImage::blank(3, 4);
        img.pix[5] = 1.0;
        img.pix[11] = 1.0;
        write_pgm(&p, &img).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!((back.h, back.w), (3, 4));
        assert_eq!(back.pix[5], 1.0);
        assert_eq!(back.pix[0], 0.0);
    }

    #[test]
    fn rejects_non_pgm() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        std::fs::write(&p, b"P6\n1 1\n255\n0").unwrap();
        assert!(read_pgm(&p).is_err());
    }

    #[test]
    fn rejects_truncated_pixels() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\nab").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}
