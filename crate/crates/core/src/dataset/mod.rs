//! Labelled feature datasets with base/validation/novel class splits.

mod episode;
mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use episode::{sample_episode, Episode, EpisodeSpec};
pub use io::{
    decode_features, encode_features, manifest_path, read_feature_file, write_feature_file, Manifest, FTH_MAGIC,
    FTH_VERSION,
};
pub use synth::{synth_clusters, synth_factor_images, ClusterSpec, FactorSpec, SplitCounts};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape `d×h×w` of one feature tensor (or of one raw input image).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureShape {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureShape {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        FeatureShape { d, h, w }
    }

    pub fn numel(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn to_vec(&self) -> Vec<usize> {
        vec![self.d, self.h, self.w]
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.d, self.h, self.w)
    }
}

impl std::str::FromStr for FeatureShape {
    type Err = String;

    /// Parses `"d,h,w"`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [d, h, w] = parts.as_slice() else {
            return Err(format!("expected d,h,w but got {s:?}"));
        };
        let parse = |p: &str| match p.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("invalid dimension {p:?} in shape {s:?}")),
        };
        Ok(FeatureShape::new(parse(d)?, parse(h)?, parse(w)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Val,
    Novel,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub base: Vec<u32>,
    pub val: Vec<u32>,
    pub novel: Vec<u32>,
}

impl Splits {
    pub fn classes(&self, split: Split) -> &[u32] {
        match split {
            Split::Base => &self.base,
            Split::Val => &self.val,
            Split::Novel => &self.novel,
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in self.base.iter().chain(&self.val).chain(&self.novel) {
            if !seen.insert(*c) {
                return Err(Error::Malformed(format!("class {c} appears in more than one split")));
            }
        }
        Ok(())
    }

    fn contains(&self, class: u32) -> bool {
        self.base.contains(&class) || self.val.contains(&class) || self.novel.contains(&class)
    }
}

/// Min-max statistics used to map features into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub min: f64,
    pub max: f64,
}

impl Scaling {
    pub const IDENTITY: Scaling = Scaling { min: 0.0, max: 1.0 };

    pub fn apply(&self, x: f64) -> f64 {
        let range = self.max - self.min;
        if range > 0.0 {
            (x - self.min) / range
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub class_id: u32,
    pub feature: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    shape: FeatureShape,
    examples: Vec<LabeledExample>,
    splits: Splits,
    scaling: Scaling,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl FeatureDataset {
    /// Validates the examples against the shape and the splits, and derives
    /// scaling statistics from the base split.
    pub fn new(shape: FeatureShape, examples: Vec<LabeledExample>, splits: Splits) -> Result<Self> {
        splits.validate()?;
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            if ex.feature.shape() != shape.to_vec().as_slice() {
                return Err(Error::shape("FeatureDataset", ex.feature.shape(), &shape.to_vec()));
            }
            if !splits.contains(ex.class_id) {
                return Err(Error::Malformed(format!("class {} is not assigned to any split", ex.class_id)));
            }
            by_class.entry(ex.class_id).or_default().push(i);
        }
        let mut ds = FeatureDataset {
            shape,
            examples,
            splits,
            scaling: Scaling::IDENTITY,
            by_class,
        };
        ds.scaling = ds.base_statistics();
        Ok(ds)
    }

    fn base_statistics(&self) -> Scaling {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &c in &self.splits.base {
            for &i in self.by_class.get(&c).map(Vec::as_slice).unwrap_or(&[]) {
                for &v in self.examples[i].feature.data() {
                    min = min.min(v);
                    max = max.max(v);
                }
            }
        }
        if min.is_finite() && max.is_finite() {
            Scaling { min, max }
        } else {
            Scaling::IDENTITY
        }
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn shape(&self) -> FeatureShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn example(&self, index: usize) -> &LabeledExample {
        &self.examples[index]
    }

    pub fn feature(&self, index: usize) -> &Tensor {
        &self.examples[index].feature
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    pub fn classes(&self, split: Split) -> &[u32] {
        self.splits.classes(split)
    }

    /// Indices of the examples of `class`, in file order.
    pub fn indices_of(&self, class: u32) -> &[usize] {
        self.by_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Indices of every example whose class belongs to `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .classes(split)
            .iter()
            .flat_map(|c| self.indices_of(*c).iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Copy with every feature mapped into `[0, 1]` by the stored base-split
    /// statistics. The copy's own statistics are the identity.
    pub fn scaled(&self) -> FeatureDataset {
        let s = self.scaling;
        let examples = self
            .examples
            .iter()
            .map(|ex| LabeledExample {
                class_id: ex.class_id,
                feature: Tensor::new(ex.feature.shape(), ex.feature.data().iter().map(|&v| s.apply(v)).collect())
                    .expect("same shape"),
            })
            .collect();
        FeatureDataset {
            shape: self.shape,
            examples,
            splits: self.splits.clone(),
            scaling: Scaling::IDENTITY,
            by_class: self.by_class.clone(),
        }
    }

    /// True when both datasets list the same classes in the same order and
    /// split layout, so that example indices refer to the same items.
    pub fn aligned_with(&self, other: &FeatureDataset) -> bool {
        self.splits == other.splits
            && self.examples.len() == other.examples.len()
            && self
                .examples
                .iter()
                .zip(&other.examples)
                .all(|(a, b)| a.class_id == b.class_id)
    }
}
