//! `FTH1` feature files and their JSON split manifests.
//!
//! Binary layout, little-endian: `"FTH1"`, u32 version, u32 example count,
//! u32 d, h, w, then per example a u32 class id and `d·h·w` f32 values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureDataset, FeatureShape, LabeledExample, Scaling, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FTH_MAGIC: &[u8; 4] = b"FTH1";
pub const FTH_VERSION: u32 = 1;
const HEADER_BYTES: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub base: Vec<u32>,
    pub val: Vec<u32>,
    pub novel: Vec<u32>,
    pub scale_min: f64,
    pub scale_max: f64,
}

/// `features.fth` → `features.fth.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn encode_features(ds: &FeatureDataset) -> Vec<u8> {
    let shape = ds.shape();
    let mut out = Vec::with_capacity(HEADER_BYTES + ds.len() * (4 + 4 * shape.numel()));
    out.extend_from_slice(FTH_MAGIC);
    for v in [FTH_VERSION, ds.len() as u32, shape.d as u32, shape.h as u32, shape.w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for ex in ds.examples() {
        out.extend_from_slice(&ex.class_id.to_le_bytes());
        for &v in ex.feature.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Decodes the binary part. Every example is returned with its class id; the
/// caller pairs them with splits.
pub fn decode_features(bytes: &[u8]) -> Result<(FeatureShape, Vec<LabeledExample>)> {
    if bytes.len() < HEADER_BYTES {
        if bytes.len() >= 4 && &bytes[..4] != FTH_MAGIC {
            return Err(Error::BadMagic {
                expected: *FTH_MAGIC,
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(Error::Truncated {
            format: "FTH1",
            expected: HEADER_BYTES as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != FTH_MAGIC {
        return Err(Error::BadMagic {
            expected: *FTH_MAGIC,
            found: bytes[..4].try_into().unwrap(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != FTH_VERSION {
        return Err(Error::UnsupportedVersion { format: "FTH1", version });
    }
    let count = u32_at(bytes, 8) as usize;
    let shape = FeatureShape::new(u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize, u32_at(bytes, 20) as usize);
    if shape.numel() == 0 {
        return Err(Error::Malformed(format!("FTH1 header has empty feature shape {shape}")));
    }
    let per_example = 4 + 4 * shape.numel();
    let expected = HEADER_BYTES + count * per_example;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            format: "FTH1",
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed(format!(
            "FTH1 file has {} trailing bytes after {count} examples",
            bytes.len() - expected
        )));
    }
    let dims = shape.to_vec();
    let mut examples = Vec::with_capacity(count);
    for record in bytes[HEADER_BYTES..].chunks_exact(per_example) {
        let class_id = u32_at(record, 0);
        let values = record[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        examples.push(LabeledExample {
            class_id,
            feature: Tensor::new(&dims, values)?,
        });
    }
    Ok((shape, examples))
}

/// Writes the feature file at `path` and its manifest next to it.
pub fn write_feature_file(path: &Path, ds: &FeatureDataset) -> Result<()> {
    fs::write(path, encode_features(ds))?;
    let splits = ds.splits();
    let scaling = ds.scaling();
    let manifest = Manifest {
        base: splits.base.clone(),
        val: splits.val.clone(),
        novel: splits.novel.clone(),
        scale_min: scaling.min,
        scale_max: scaling.max,
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a feature file and its manifest. Scaling statistics come from the
/// manifest rather than being recomputed.
pub fn read_feature_file(path: &Path) -> Result<FeatureDataset> {
    let bytes = fs::read(path)?;
    let (shape, examples) = decode_features(&bytes)?;
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    let splits = Splits {
        base: manifest.base,
        val: manifest.val,
        novel: manifest.novel,
    };
    let scaling = Scaling {
        min: manifest.scale_min,
        max: manifest.scale_max,
    };
    Ok(FeatureDataset::new(shape, examples, splits)?.with_scaling(scaling))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_clusters, ClusterSpec, SplitCounts};

    fn small() -> FeatureDataset {
        synth_clusters(&ClusterSpec {
            num_classes: 6,
            examples_per_class: 3,
            feature_shape: FeatureShape::new(2, 3, 3),
            intra_class_std: 0.1,
            seed: 5,
            splits: Some(SplitCounts { base: 3, val: 1, novel: 2 }),
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fth");
        let ds = small();
        write_feature_file(&path, &ds).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(fs::read(&path).unwrap(), encode_features(&back));
    }

    #[test]
    fn truncation_reports_sizes() {
        let bytes = encode_features(&small());
        let cut = &bytes[..bytes.len() - 3];
        match decode_features(cut) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode_features(&bytes[..10]), Err(Error::Truncated { expected: 24, .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_features(&small());
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = encode_features(&small());
        bytes[4] = 2;
        assert!(matches!(
            decode_features(&bytes),
            Err(Error::UnsupportedVersion { version: 2, .. })
        ));
    }

    #[test]
    fn reference_header_example_size() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FTH_MAGIC);
        for v in [1u32, 1, 512, 7, 7] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend(std::iter::repeat_n(0u8, 4 * 512 * 7 * 7));
        let (shape, examples) = decode_features(&bytes).unwrap();
        assert_eq!(shape, FeatureShape::new(512, 7, 7));
        assert_eq!(examples[0].feature.numel(), 25088);
        assert_eq!(examples[0].class_id, 3);
    }

    #[test]
    fn missing_manifest_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fth");
        fs::write(&path, encode_features(&small())).unwrap();
        assert!(matches!(read_feature_file(&path), Err(Error::Io(_))));
    }
}
