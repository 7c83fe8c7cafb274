//! Labeled embedding collections and their class splits.
//!
//! On disk a store is an FSEM file (all integers little-endian):
//!
//! ```text
//! magic "FSEM" | version u32 = 1 | num_samples u32 | dim u32 | flags u32
//! labels:   num_samples x u32
//! features: num_samples x dim x f32, row-major in sample order
//! ```
//!
//! Flag bit 0 marks a ReLU-origin store whose features are all nonnegative.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FSEM_MAGIC: [u8; 4] = *b"FSEM";
pub const FSEM_VERSION: u32 = 1;
pub const FSEM_HEADER_LEN: usize = 20;
pub const FLAG_NONNEGATIVE: u32 = 1;

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    nonnegative: bool,
    labels: Vec<u32>,
    features: Vec<f32>,
    class_index: BTreeMap<u32, Vec<usize>>,
}

impl EmbeddingStore {
    /// Builds a store from row-major features, validating every invariant.
    pub fn new(dim: usize, labels: Vec<u32>, features: Vec<f32>, nonnegative: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidStore("dim must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::InvalidStore(format!(
                "{} feature values for {} samples of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        for (sample, row) in features.chunks_exact(dim).enumerate() {
            for (feature, &value) in row.iter().enumerate() {
                if !value.is_finite() {
                    return Err(Error::NonFinite { sample, feature });
                }
                if nonnegative && value < 0.0 {
                    return Err(Error::NegativeFeature { sample, feature, value });
                }
            }
        }
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &label) in labels.iter().enumerate() {
            class_index.entry(label).or_default().push(i);
        }
        Ok(Self {
            dim,
            nonnegative,
            labels,
            features,
            class_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.nonnegative
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, sample: usize) -> u32 {
        self.labels[sample]
    }

    pub fn features(&self, sample: usize) -> &[f32] {
        &self.features[sample * self.dim..(sample + 1) * self.dim]
    }

    /// Features of one sample widened to `f64`.
    pub fn features_f64(&self, sample: usize) -> Vec<f64> {
        self.features(sample).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn class_index(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.class_index
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.class_index.keys().copied()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn samples_of(&self, class: u32) -> Option<&[usize]> {
        self.class_index.get(&class).map(Vec::as_slice)
    }

    /// Serializes to the FSEM byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.labels.len();
        let mut buf = Vec::with_capacity(FSEM_HEADER_LEN + 4 * n + 4 * self.features.len());
        buf.extend_from_slice(&FSEM_MAGIC);
        buf.extend_from_slice(&FSEM_VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        let flags = if self.nonnegative { FLAG_NONNEGATIVE } else { 0 };
        buf.extend_from_slice(&flags.to_le_bytes());
        for &label in &self.labels {
            buf.extend_from_slice(&label.to_le_bytes());
        }
        for &value in &self.features {
            buf.extend_from_slice(&value.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FSEM_HEADER_LEN {
            return Err(Error::Truncated {
                expected: FSEM_HEADER_LEN,
                found: bytes.len(),
            });
        }
        if bytes[..4] != FSEM_MAGIC {
            return Err(Error::BadHeader(format!("magic {:?}", &bytes[..4])));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != FSEM_VERSION {
            return Err(Error::BadHeader(format!("unsupported version {version}")));
        }
        let n = word(8) as usize;
        let dim = word(12) as usize;
        let flags = word(16);
        if dim == 0 {
            return Err(Error::BadHeader("dim is zero".into()));
        }
        if flags & !FLAG_NONNEGATIVE != 0 {
            return Err(Error::BadHeader(format!("unknown flag bits {flags:#x}")));
        }
        let expected = n
            .checked_mul(dim)
            .and_then(|v| v.checked_add(n))
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(FSEM_HEADER_LEN))
            .ok_or_else(|| Error::BadHeader("header sizes overflow".into()))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes(bytes.len() - expected));
        }

        let label_end = FSEM_HEADER_LEN + 4 * n;
        let labels = bytes[FSEM_HEADER_LEN..label_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let features = bytes[label_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dim, labels, features, flags & FLAG_NONNEGATIVE != 0)
    }

    /// Keeps only the samples whose class belongs to `split`; dim and flags are unchanged.
    pub fn restrict_to_split(&self, manifest: &SplitManifest, split: &str) -> Result<Self> {
        manifest.validate_against(self)?;
        let classes = manifest.split(split)?;
        self.restrict_to_classes(classes)
    }

    pub fn restrict_to_classes(&self, classes: &BTreeSet<u32>) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let labels = keep.iter().map(|&i| self.labels[i]).collect();
        let features = keep.iter().flat_map(|&i| self.features(i).iter().copied()).collect();
        Self::new(self.dim, labels, features, self.nonnegative)
    }
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes)
}

pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Train/val/test class assignment, stored as
/// `{"splits": {"train": [..], "val": [..], "test": [..]}, "class_names": {"id": "name"}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub splits: BTreeMap<String, BTreeSet<u32>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub class_names: BTreeMap<String, String>,
}

impl SplitManifest {
    pub fn new(splits: impl IntoIterator<Item = (String, BTreeSet<u32>)>) -> Result<Self> {
        let manifest = Self {
            splits: splits.into_iter().collect(),
            class_names: BTreeMap::new(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Self = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks split names and pairwise disjointness.
    pub fn validate(&self) -> Result<()> {
        for name in self.splits.keys() {
            if !SPLIT_NAMES.contains(&name.as_str()) {
                return Err(Error::InvalidManifest(format!("unknown split name `{name}`")));
            }
        }
        let names: Vec<&String> = self.splits.keys().collect();
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                if let Some(c) = self.splits[*a].intersection(&self.splits[*b]).next() {
                    return Err(Error::InvalidManifest(format!("class {c} is in both `{a}` and `{b}`")));
                }
            }
        }
        Ok(())
    }

    /// Every referenced class must exist in `store`.
    pub fn validate_against(&self, store: &EmbeddingStore) -> Result<()> {
        self.validate()?;
        for (name, classes) in &self.splits {
            for &c in classes {
                if store.samples_of(c).is_none() {
                    return Err(Error::InvalidManifest(format!(
                        "class {c} of split `{name}` is absent from the store"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&BTreeSet<u32>> {
        self.splits
            .get(name)
            .ok_or_else(|| Error::UnknownSplit(name.to_string()))
    }

    pub fn all_classes(&self) -> BTreeSet<u32> {
        self.splits.values().flatten().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_sample_store() -> EmbeddingStore {
        EmbeddingStore::new(3, vec![0, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], true).unwrap()
    }

    #[test]
    fn header_echo_and_class_index() {
        let store = EmbeddingStore::from_bytes(&two_sample_store().to_bytes()).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.dim(), 3);
        assert_eq!(store.num_classes(), 2);
        assert_eq!(store.samples_of(0), Some(&[0][..]));
        assert_eq!(store.samples_of(1), Some(&[1][..]));
    }

    #[test]
    fn empty_store_is_header_only() {
        let store = EmbeddingStore::new(8, vec![], vec![], false).unwrap();
        let bytes = store.to_bytes();
        assert_eq!(bytes.len(), 20);
        assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap(), store);
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(matches!(
            EmbeddingStore::new(0, vec![], vec![], false),
            Err(Error::InvalidStore(_))
        ));
    }

    #[test]
    fn truncated_payload() {
        let labels = vec![0; 10];
        let store = EmbeddingStore::new(2, labels, vec![1.0; 20], true).unwrap();
        let mut bytes = store.to_bytes();
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = two_sample_store().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bytes), Err(Error::BadHeader(_))));
        let mut bytes = two_sample_store().to_bytes();
        bytes[4] = 2;
        assert!(matches!(EmbeddingStore::from_bytes(&bytes), Err(Error::BadHeader(_))));
    }

    #[test]
    fn non_finite_rejected_with_index() {
        let mut bytes = two_sample_store().to_bytes();
        let at = FSEM_HEADER_LEN + 8 + 4 * 4;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes),
            Err(Error::NonFinite { sample: 1, feature: 1 })
        ));
    }

    #[test]
    fn negative_in_relu_store_is_error() {
        let err = EmbeddingStore::new(1, vec![0, 0], vec![1.0, -0.5], true).unwrap_err();
        assert!(matches!(err, Error::NegativeFeature { sample: 1, .. }));
        assert!(EmbeddingStore::new(1, vec![0, 0], vec![1.0, -0.5], false).is_ok());
    }

    #[test]
    fn restrict_to_val_split() {
        let labels: Vec<u32> = (0..10).collect();
        let store = EmbeddingStore::new(1, labels, (0..10).map(|v| v as f32).collect(), true).unwrap();
        let manifest = SplitManifest::from_json(r#"{"splits": {"val": [3, 7]}}"#).unwrap();
        let val = store.restrict_to_split(&manifest, "val").unwrap();
        assert_eq!(val.class_ids().collect::<Vec<_>>(), vec![3, 7]);
        assert_eq!(val.features(1), &[7.0]);
        assert!(matches!(
            store.restrict_to_split(&manifest, "test"),
            Err(Error::UnknownSplit(_))
        ));
        let empty = SplitManifest::from_json(r#"{"splits": {"test": []}}"#).unwrap();
        assert!(store.restrict_to_split(&empty, "test").unwrap().is_empty());
    }

    #[test]
    fn manifest_rejects_overlap_and_missing_classes() {
        assert!(SplitManifest::from_json(r#"{"splits": {"train": [1], "test": [1]}}"#).is_err());
        assert!(SplitManifest::from_json(r#"{"splits": {"holdout": [1]}}"#).is_err());
        let manifest = SplitManifest::from_json(r#"{"splits": {"test": [5]}}"#).unwrap();
        assert!(manifest.validate_against(&two_sample_store()).is_err());
    }

    #[test]
    fn manifest_with_names_parses() {
        let m = SplitManifest::from_json(
            r#"{"splits": {"train": [0], "val": [1], "test": [2]}, "class_names": {"0": "dog"}}"#,
        )
        .unwrap();
        assert_eq!(m.class_names["0"], "dog");
        assert_eq!(m.all_classes().len(), 3);
    }
}
