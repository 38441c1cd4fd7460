use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::read_maybe_gzip;
use crate::data::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated { path: path.into() })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.into(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Raw pixel bytes as `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gzip(path)?;
    check_magic(&bytes, IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let len = n * rows * cols;
    let pixels = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Truncated { path: path.into() })?;
    Ok((n, rows, cols, pixels.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gzip(path)?;
    check_magic(&bytes, LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    bytes
        .get(8..8 + n)
        .map(<[u8]>::to_vec)
        .ok_or_else(|| Error::Truncated { path: path.into() })
}

/// IDX image/label pair (optionally gzip-compressed), pixels scaled by 1/255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let inputs = Array2::from_shape_vec(
        (n, rows * cols),
        pixels.into_iter().map(|p| f64::from(p) / 255.0).collect(),
    )
    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Dataset::new(inputs, labels.into_iter().map(usize::from).collect())
}

/// Writes an uncompressed IDX pair; pixels are `round(v·255)`.
pub fn write_idx(ds: &Dataset, rows: usize, cols: usize, images: &Path, labels: &Path) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::DimensionMismatch {
            expected: ds.dim(),
            got: rows * cols,
        });
    }
    let mut img = Vec::with_capacity(16 + ds.len() * ds.dim());
    img.extend(IMAGES_MAGIC.to_be_bytes());
    for v in [ds.len(), rows, cols] {
        img.extend((v as u32).to_be_bytes());
    }
    img.extend(ds.inputs().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(images, img).map_err(|e| Error::io(images, e))?;

    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend(LABELS_MAGIC.to_be_bytes());
    lab.extend((ds.len() as u32).to_be_bytes());
    for &y in ds.labels() {
        let y = u8::try_from(y).map_err(|_| Error::InvalidArgument(format!("label {y} does not fit a byte")))?;
        lab.push(y);
    }
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn image_bytes(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    fn label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn loads_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, image_bytes(2, 2, 2, &[0, 255, 51, 102, 255, 255, 0, 0])).unwrap();
        fs::write(&lab, label_bytes(&[3, 7])).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.point(0)[1], 1.0);
        assert_eq!(ds.point(0)[2], 0.2);
        assert_eq!(ds.labels(), &[3, 7]);
    }

    #[test]
    fn reads_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.gz");
        let lab = dir.path().join("lab.gz");
        for (path, bytes) in [
            (&img, image_bytes(1, 1, 2, &[255, 0])),
            (&lab, label_bytes(&[1])),
        ] {
            let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
            enc.write_all(&bytes).unwrap();
            fs::write(path, enc.finish().unwrap()).unwrap();
        }
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.point(0).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn error_contract() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, image_bytes(2, 1, 1, &[1, 2])).unwrap();
        fs::write(&lab, label_bytes(&[1, 2, 3])).unwrap();
        assert!(matches!(
            load_idx(&img, &lab),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
        // swapped files -> magic check fails
        assert!(matches!(load_idx(&lab, &img), Err(Error::BadMagic { .. })));
        fs::write(&img, image_bytes(3, 1, 1, &[1, 2])).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Truncated { .. })));
        fs::write(&img, [0u8, 0]).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Truncated { .. })));
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::from_rows(vec![vec![0.0, 1.0, 0.2, 0.4]], vec![9]).unwrap();
        let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, 2, 2, &img, &lab).unwrap();
        assert_eq!(load_idx(&img, &lab).unwrap(), ds);
    }
}
