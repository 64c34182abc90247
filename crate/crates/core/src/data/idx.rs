use std::path::Path;

use super::Dataset;
use crate::error::{IdxError, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn read_u32(bytes: &[u8], offset: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            offset,
            needed: 4,
            available: bytes.len().saturating_sub(offset),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> std::result::Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic {
            offset: 0,
            found,
            expected,
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> std::result::Result<&[u8], IdxError> {
    bytes.get(offset..offset + len).ok_or(IdxError::Truncated {
        offset,
        needed: len,
        available: bytes.len().saturating_sub(offset),
    })
}

/// Decodes an IDX image file (magic 2051, `count × rows × cols` unsigned bytes)
/// into a `[count, 1, rows, cols]` tensor scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<Tensor, IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = payload(bytes, 16, count * rows * cols)?;
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![count, 1, rows, cols], data).map_err(|_| IdxError::Truncated {
        offset: 4,
        needed: 1,
        available: 0,
    })
}

/// Decodes an IDX label file (magic 2049, one unsigned byte per label).
pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<usize>, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. The class count is one past the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(IdxError::CountMismatch {
            offset: 4,
            images: images.shape()[0],
            labels: labels.len(),
        }
        .into());
    }
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(images, labels, class_count, "idx", 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    /// Two 3×3 images authored byte by byte.
    fn image_fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 3];
        b.extend_from_slice(&[0, 255, 0, 255, 255, 255, 0, 255, 0]);
        b.extend_from_slice(&[51, 102, 153, 204, 255, 0, 0, 0, 51]);
        b
    }

    fn label_fixture() -> Vec<u8> {
        vec![0, 0, 0x08, 0x01, 0, 0, 0, 2, 7, 3]
    }

    #[test]
    fn fixture_round_trip() {
        let t = parse_idx_images(&image_fixture()).unwrap();
        assert_eq!(t.shape(), &[2, 1, 3, 3]);
        let expected = [
            0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, //
            0.2, 0.4, 0.6, 0.8, 1.0, 0.0, 0.0, 0.0, 0.2,
        ];
        for (a, b) in t.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(parse_idx_labels(&label_fixture()).unwrap(), vec![7, 3]);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut b = image_fixture();
        b[3] = 0x01;
        assert_eq!(
            parse_idx_images(&b).unwrap_err(),
            IdxError::BadMagic {
                offset: 0,
                found: 2049,
                expected: 2051
            }
        );
        assert!(matches!(parse_idx_labels(&image_fixture()), Err(IdxError::BadMagic { .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let b = image_fixture();
        assert_eq!(
            parse_idx_images(&b[..20]).unwrap_err(),
            IdxError::Truncated {
                offset: 16,
                needed: 18,
                available: 4
            }
        );
        assert!(matches!(parse_idx_images(&b[..6]), Err(IdxError::Truncated { offset: 4, .. })));
    }

    #[test]
    fn count_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        std::fs::write(&ip, image_fixture()).unwrap();
        std::fs::write(&lp, vec![0, 0, 0x08, 0x01, 0, 0, 0, 1, 7]).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Idx(IdxError::CountMismatch { images: 2, labels: 1, .. })));

        std::fs::write(&lp, label_fixture()).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.class_count, 8);
    }
}
