//! Synthetic datasets for desk-scale runs.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureDataset, FeatureShape, LabeledExample, Splits};
use crate::error::{Error, Result};
use crate::rng::{derived, seeded};
use crate::tensor::Tensor;

/// Number of classes assigned to each split, in class-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub base: usize,
    pub val: usize,
    pub novel: usize,
}

impl SplitCounts {
    /// Roughly 64/16/20 base/val/novel, with at least one base class.
    pub fn proportional(num_classes: usize) -> Self {
        let base = ((num_classes as f64 * 0.64).round() as usize).clamp(1, num_classes);
        let val = ((num_classes as f64 * 0.16).round() as usize).min(num_classes - base);
        SplitCounts {
            base,
            val,
            novel: num_classes - base - val,
        }
    }

    pub fn total(&self) -> usize {
        self.base + self.val + self.novel
    }

    fn assign(&self) -> Splits {
        let ids = |from: usize, n: usize| (from as u32..(from + n) as u32).collect::<Vec<_>>();
        Splits {
            base: ids(0, self.base),
            val: ids(self.base, self.val),
            novel: ids(self.base + self.val, self.novel),
        }
    }
}

fn resolve_splits(num_classes: usize, splits: Option<SplitCounts>) -> Result<Splits> {
    let counts = splits.unwrap_or_else(|| SplitCounts::proportional(num_classes));
    if counts.total() != num_classes {
        return Err(Error::InvalidConfig(format!(
            "split counts {}+{}+{} do not add up to {num_classes} classes",
            counts.base, counts.val, counts.novel
        )));
    }
    Ok(counts.assign())
}

fn rounded(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub num_classes: usize,
    pub examples_per_class: usize,
    pub feature_shape: FeatureShape,
    pub intra_class_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub splits: Option<SplitCounts>,
}

/// One random mean tensor per class in `(0, 1)`; examples are the mean plus
/// Gaussian noise, clipped to `[0, 1]` and stored at f32 precision.
pub fn synth_clusters(spec: &ClusterSpec) -> Result<FeatureDataset> {
    if spec.num_classes == 0 || spec.examples_per_class == 0 || spec.feature_shape.numel() == 0 {
        return Err(Error::InvalidConfig("synth_clusters needs positive sizes".into()));
    }
    if !(spec.intra_class_std >= 0.0) {
        return Err(Error::InvalidConfig(format!("intra_class_std {} is negative", spec.intra_class_std)));
    }
    let splits = resolve_splits(spec.num_classes, spec.splits)?;
    let numel = spec.feature_shape.numel();
    let dims = spec.feature_shape.to_vec();
    let mut means_rng = seeded(spec.seed);
    let mut examples = Vec::with_capacity(spec.num_classes * spec.examples_per_class);
    for class in 0..spec.num_classes {
        let mean: Vec<f64> = (0..numel)
            .map(|_| loop {
                let v: f64 = means_rng.random();
                if v > 0.0 {
                    break v;
                }
            })
            .collect();
        let mut rng = derived(spec.seed, class as u64 + 1);
        for _ in 0..spec.examples_per_class {
            let values = mean
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    rounded((m + spec.intra_class_std * z).clamp(0.0, 1.0))
                })
                .collect();
            examples.push(LabeledExample {
                class_id: class as u32,
                feature: Tensor::new(&dims, values)?,
            });
        }
    }
    FeatureDataset::new(spec.feature_shape, examples, splits)
}

/// Raw-input benchmark whose class means share one low-rank factor model
/// across all splits: `mean_c = sigmoid(A·u_c)` with loadings `A` common to
/// every class and a class factor `u_c ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub num_classes: usize,
    pub examples_per_class: usize,
    pub image_shape: FeatureShape,
    pub rank: usize,
    /// Standard deviation of `A·u_c` per element, before the sigmoid.
    pub loading_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub splits: Option<SplitCounts>,
}

impl FactorSpec {
    /// Desk-scale ordering benchmark: 160 classes of 3×16×16 images from a
    /// rank-4 factor model with noise 0.15; 108 base, 4 validation and 48
    /// novel classes.
    pub fn desk(seed: u64) -> Self {
        FactorSpec {
            num_classes: 160,
            examples_per_class: 30,
            image_shape: FeatureShape::new(3, 16, 16),
            rank: 4,
            loading_scale: 1.0,
            noise_std: 0.15,
            seed,
            splits: Some(SplitCounts {
                base: 108,
                val: 4,
                novel: 48,
            }),
        }
    }
}

pub fn synth_factor_images(spec: &FactorSpec) -> Result<FeatureDataset> {
    if spec.num_classes == 0 || spec.examples_per_class == 0 || spec.rank == 0 || spec.image_shape.numel() == 0 {
        return Err(Error::InvalidConfig("synth_factor_images needs positive sizes".into()));
    }
    if !(spec.noise_std >= 0.0) || !(spec.loading_scale >= 0.0) {
        return Err(Error::InvalidConfig("synth_factor_images needs nonnegative scales".into()));
    }
    let splits = resolve_splits(spec.num_classes, spec.splits)?;
    let numel = spec.image_shape.numel();
    let dims = spec.image_shape.to_vec();
    let mut rng = seeded(spec.seed);
    let loading = Normal::new(0.0, spec.loading_scale / (spec.rank as f64).sqrt()).expect("finite scale");
    let a: Vec<f64> = (0..numel * spec.rank).map(|_| loading.sample(&mut rng)).collect();
    let mut examples = Vec::with_capacity(spec.num_classes * spec.examples_per_class);
    for class in 0..spec.num_classes {
        let u: Vec<f64> = (0..spec.rank).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mean: Vec<f64> = a
            .chunks_exact(spec.rank)
            .map(|row| {
                let s: f64 = row.iter().zip(&u).map(|(x, y)| x * y).sum();
                1.0 / (1.0 + (-s).exp())
            })
            .collect();
        let mut noise = derived(spec.seed, class as u64 + 1);
        for _ in 0..spec.examples_per_class {
            let values = mean
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut noise);
                    rounded((m + spec.noise_std * z).clamp(0.0, 1.0))
                })
                .collect();
            examples.push(LabeledExample {
                class_id: class as u32,
                feature: Tensor::new(&dims, values)?,
            });
        }
    }
    FeatureDataset::new(spec.image_shape, examples, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(std: f64) -> ClusterSpec {
        ClusterSpec {
            num_classes: 5,
            examples_per_class: 4,
            feature_shape: FeatureShape::new(2, 2, 2),
            intra_class_std: std,
            seed: 9,
            splits: None,
        }
    }

    #[test]
    fn zero_noise_gives_identical_examples() {
        let ds = synth_clusters(&spec(0.0)).unwrap();
        for c in 0..5 {
            let idx = ds.indices_of(c);
            assert_eq!(idx.len(), 4);
            for &i in idx {
                assert_eq!(ds.feature(i), ds.feature(idx[0]));
            }
            assert!(ds.feature(idx[0]).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn deterministic_and_clipped() {
        let a = synth_clusters(&spec(0.5)).unwrap();
        let b = synth_clusters(&spec(0.5)).unwrap();
        assert_eq!(a, b);
        assert!(a.examples().iter().all(|e| e.feature.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn proportional_splits() {
        assert_eq!(SplitCounts::proportional(100), SplitCounts { base: 64, val: 16, novel: 20 });
        assert_eq!(SplitCounts::proportional(1).base, 1);
        let c = SplitCounts::proportional(30);
        assert_eq!(c.total(), 30);
    }

    #[test]
    fn bad_split_counts_rejected() {
        let mut s = spec(0.1);
        s.splits = Some(SplitCounts { base: 1, val: 1, novel: 1 });
        assert!(synth_clusters(&s).is_err());
    }

    #[test]
    fn factor_images_share_structure() {
        let mut s = FactorSpec::desk(2);
        s.num_classes = 6;
        s.examples_per_class = 3;
        s.splits = Some(SplitCounts { base: 4, val: 0, novel: 2 });
        let ds = synth_factor_images(&s).unwrap();
        assert_eq!(ds.len(), 18);
        assert_eq!(ds, synth_factor_images(&s).unwrap());
        assert_eq!(ds.feature(0).shape(), &[3, 16, 16]);
    }
}
