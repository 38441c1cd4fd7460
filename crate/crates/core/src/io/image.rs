use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }
}

fn to_bytes(img: &FeatureImage) -> Vec<u8> {
    img.pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// 8-bit grayscale, `v ↦ round(v·255)`.
pub fn emit_image(img: &FeatureImage, path: &Path, format: ImageFormat) -> Result<()> {
    if img.pixels.len() != img.height * img.width || img.pixels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} pixels for a {}x{} image",
            img.pixels.len(),
            img.height,
            img.width
        )));
    }
    let payload = to_bytes(img);
    match format {
        ImageFormat::Pgm => {
            let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend(payload);
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        ImageFormat::Png => {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
            let mut writer = enc.write_header().map_err(to_io)?;
            writer.write_image_data(&payload).map_err(to_io)
        }
    }
}

/// Reads a binary (P5) 8-bit PGM as `(width, height, pixels in [0,1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.into(),
        line: 1,
        msg: msg.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 image"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| Error::Truncated { path: path.into() })?;
    Ok((width, height, data.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureMethod, FeatureImage};

    fn img(pixels: Vec<f64>, h: usize, w: usize) -> FeatureImage {
        FeatureImage {
            pixels,
            height: h,
            width: w,
            split: None,
            method: FeatureMethod::Average,
        }
    }

    #[test]
    fn payload_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.pgm");
        emit_image(&img(vec![0.0; 6], 2, 3), &p, ImageFormat::Pgm).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert!(bytes[11..].iter().all(|&b| b == 0));
        emit_image(&img(vec![1.0; 6], 2, 3), &p, ImageFormat::Pgm).unwrap();
        assert!(fs::read(&p).unwrap()[11..].iter().all(|&b| b == 0xFF));
    }

    #[test]
    fn round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.pgm");
        let pixels: Vec<f64> = (0..35).map(|i| (i as f64 * 0.0371) % 1.0).collect();
        emit_image(&img(pixels.clone(), 5, 7), &p, ImageFormat::Pgm).unwrap();
        let (w, h, back) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (7, 5));
        for (a, b) in pixels.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn png_output_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        emit_image(&img(vec![0.5; 4], 2, 2), &p, ImageFormat::Png).unwrap();
        assert!(fs::read(&p).unwrap().starts_with(&[0x89, b'P', b'N', b'G']));
        assert!(emit_image(&img(vec![0.5; 3], 2, 2), &p, ImageFormat::Pgm).is_err());
        let unwritable = dir.path().join("missing").join("x.pgm");
        assert!(matches!(
            emit_image(&img(vec![0.5; 4], 2, 2), &unwritable, ImageFormat::Pgm),
            Err(Error::Io { .. })
        ));
    }
}
