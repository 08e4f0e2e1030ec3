//! Feature bags and their binary file format.
//!
//! A bag file is a 16-byte little-endian header (`"MILB"`, version, N, H)
//! followed by `N · H` IEEE-754 `f32` values in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BAG_MAGIC: [u8; 4] = *b"MILB";
pub const BAG_VERSION: u32 = 1;
pub const BAG_HEADER_LEN: usize = 16;

/// Identity and label of a bag, as recorded in a manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagMeta {
    pub bag_id: String,
    pub patient_id: String,
    pub label: usize,
}

/// One bag: `N` instance feature vectors of width `H` and a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub bag_id: String,
    pub patient_id: String,
    pub label: usize,
    pub features: Array2<f32>,
}

impl FeatureBag {
    pub fn new(meta: BagMeta, features: Array2<f32>) -> Result<Self> {
        let bag = Self {
            bag_id: meta.bag_id,
            patient_id: meta.patient_id,
            label: meta.label,
            features,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn instance_count(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_width(&self) -> usize {
        self.features.ncols()
    }

    pub fn meta(&self) -> BagMeta {
        BagMeta {
            bag_id: self.bag_id.clone(),
            patient_id: self.patient_id.clone(),
            label: self.label,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() == 0 || self.features.ncols() == 0 {
            return Err(Error::InvalidBag(format!(
                "{} has shape {:?}; N and H must be at least 1",
                self.bag_id,
                self.features.dim()
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of bag {}", self.bag_id)));
        }
        Ok(())
    }

    /// Features widened to `f64` for the model.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }
}

/// Serializes a feature matrix into the bag file layout.
pub fn encode_features(features: &Array2<f32>) -> Result<Vec<u8>> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bag features".into()));
    }
    let (rows, cols) = features.dim();
    let mut out = Vec::with_capacity(BAG_HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(&BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(rows)?.to_le_bytes());
    out.extend_from_slice(&to_u32(cols)?.to_le_bytes());
    for value in features.iter() {
        out.extend_from_slice(&value.to_le_bytes());
    }
    Ok(out)
}

/// Parses the bag file layout; `origin` only labels errors.
pub fn decode_features(bytes: &[u8], origin: &Path) -> Result<Array2<f32>> {
    if bytes.len() < BAG_HEADER_LEN {
        return Err(Error::Truncated {
            expected: BAG_HEADER_LEN as u64,
            available: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
    if magic != BAG_MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
            expected: BAG_MAGIC,
            found: magic,
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != BAG_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidBag(format!(
            "{} declares N={rows}, H={cols}",
            origin.display()
        )));
    }
    let payload = (rows as u64) * (cols as u64) * 4;
    let available = (bytes.len() - BAG_HEADER_LEN) as u64;
    if payload > available {
        return Err(Error::Truncated {
            expected: payload,
            available,
        });
    }
    let values: Vec<f32> = bytes[BAG_HEADER_LEN..BAG_HEADER_LEN + payload as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("payload of {}", origin.display())));
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("shape matches payload length"))
}

pub fn save_bag(bag: &FeatureBag, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    bag.validate()?;
    let bytes = encode_features(&bag.features)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a bag file; identity and label come from `meta`.
pub fn load_bag(path: impl AsRef<Path>, meta: BagMeta) -> Result<FeatureBag> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let features = decode_features(&bytes, path)?;
    FeatureBag::new(meta, features)
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidBag(format!("dimension {n} exceeds u32")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn meta() -> BagMeta {
        BagMeta {
            bag_id: "b0".into(),
            patient_id: "p0".into(),
            label: 1,
        }
    }

    #[test]
    fn three_by_four_bag_is_sixty_four_bytes() {
        let features = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32);
        let bytes = encode_features(&features).unwrap();
        assert_eq!(bytes.len(), 16 + 48);
        assert_eq!(&bytes[0..4], b"MILB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &4u32.to_le_bytes());
        // row-major: element (1, 2) is the 7th float
        assert_eq!(&bytes[16 + 6 * 4..16 + 7 * 4], &6.0f32.to_le_bytes());
    }

    #[test]
    fn nan_features_are_rejected() {
        let features = array![[1.0f32, f32::NAN]];
        assert!(matches!(encode_features(&features), Err(Error::NonFinite(_))));
        assert!(FeatureBag::new(meta(), features).is_err());
    }

    #[test]
    fn altered_magic_is_reported() {
        let mut bytes = encode_features(&array![[1.0f32, 2.0]]).unwrap();
        bytes[0] = b'X';
        let err = decode_features(&bytes, Path::new("x.milb")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }

    #[test]
    fn oversized_header_is_truncation() {
        let features = Array2::from_elem((5, 3), 0.5f32);
        let mut bytes = encode_features(&features).unwrap();
        bytes[8..12].copy_from_slice(&10u32.to_le_bytes());
        match decode_features(&bytes, Path::new("t.milb")) {
            Err(Error::Truncated {
                expected,
                available,
            }) => {
                assert_eq!(expected, 10 * 3 * 4);
                assert_eq!(available, 5 * 3 * 4);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn empty_shapes_are_invalid() {
        let bag = FeatureBag::new(meta(), Array2::zeros((0, 4)));
        assert!(matches!(bag, Err(Error::InvalidBag(_))));
    }

    #[test]
    fn save_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let bag = FeatureBag::new(meta(), array![[0.25f32, -3.5], [1e-30, 7.0]]).unwrap();
        let a = dir.path().join("a.milb");
        save_bag(&bag, &a).unwrap();
        let first = fs::read(&a).unwrap();
        save_bag(&bag, &a).unwrap();
        assert_eq!(first, fs::read(&a).unwrap());
        assert_eq!(load_bag(&a, meta()).unwrap(), bag);
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in proptest::collection::vec(-1e6f32..1e6, 36),
        ) {
            let features = Array2::from_shape_fn((rows, cols), |(i, j)| seed[i * 6 + j]);
            let bytes = encode_features(&features).unwrap();
            let back = decode_features(&bytes, Path::new("p")).unwrap();
            prop_assert_eq!(back.mapv(f32::to_bits), features.mapv(f32::to_bits));
        }
    }
}
