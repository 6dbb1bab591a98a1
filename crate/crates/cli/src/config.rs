use std::path::Path;

use halc_core::dataset::{FeatureShape, SplitCounts};
use halc_core::eval::EvalConfig;
use halc_core::halluc_train::HallucTrainConfig;
use halc_core::models::{HallucinatorDims, HallucinatorVariant};
use halc_core::representation::ReprConfig;
use halc_core::Precision;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run can be configured with. Loaded from `--config`, then
/// overridden by command-line flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub representation: ReprConfig,
    pub hallucinator: HallucinatorConfig,
    pub halluc_train: HallucTrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Feature tensors around i.i.d. uniform class means.
    #[default]
    Clusters,
    /// Images whose class means come from a shared low-rank factor model.
    Factor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub classes: usize,
    pub per_class: usize,
    pub shape: FeatureShape,
    /// Per-element noise; 0.05 for clusters and 0.15 for factor images when unset.
    pub std: Option<f64>,
    pub rank: usize,
    pub loading_scale: f64,
    pub splits: Option<SplitCounts>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: SynthKind::Clusters,
            classes: 100,
            per_class: 60,
            shape: FeatureShape::new(64, 7, 7),
            std: None,
            rank: 8,
            loading_scale: 1.0,
            splits: None,
        }
    }
}

impl SynthConfig {
    pub fn effective_std(&self) -> f64 {
        self.std.unwrap_or(match self.kind {
            SynthKind::Clusters => 0.05,
            SynthKind::Factor => 0.15,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub feature: FeatureShape,
    pub hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            feature: FeatureShape::new(16, 4, 4),
            hidden: 32,
        }
    }
}

/// Hallucinator architecture. Unset sizes follow the feature shape: the
/// full-size dims for `512×7×7`, otherwise `2d` everywhere.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HallucinatorConfig {
    pub variant: Option<HallucinatorVariant>,
    pub noise_dim: Option<usize>,
    pub cond_dim: Option<usize>,
    pub width: Option<usize>,
}

impl HallucinatorConfig {
    pub fn dims(&self, feature: FeatureShape) -> HallucinatorDims {
        let reference = HallucinatorDims::reference();
        let mut dims = if feature == reference.feature {
            reference
        } else {
            HallucinatorDims::proportional(feature)
        };
        if let Some(k) = self.noise_dim {
            dims.noise_dim = k;
        }
        if let Some(c) = self.cond_dim {
            dims.cond_dim = c;
        }
        if let Some(w) = self.width {
            dims.width = w;
        }
        dims
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    /// Pushes the global seed and precision into every section.
    pub fn propagate(&mut self) {
        let seed = self.seed.unwrap_or(0);
        self.seed = Some(seed);
        self.representation.seed = seed;
        self.halluc_train.seed = seed;
        self.eval.seed = seed;
        if let Some(p) = self.precision {
            self.representation.precision = p;
            self.halluc_train.precision = p;
            self.eval.precision = p;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seeed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"halluc_train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"halluc_train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.halluc_train.epochs, 3);
        assert_eq!(cfg.halluc_train.k_shot, 20);
        assert_eq!(cfg.eval.m_test, 500);
    }

    #[test]
    fn reference_feature_gets_full_size_dims() {
        let dims = HallucinatorConfig::default().dims(FeatureShape::new(512, 7, 7));
        assert_eq!(dims, HallucinatorDims::reference());
        let dims = HallucinatorConfig {
            width: Some(5),
            ..Default::default()
        }
        .dims(FeatureShape::new(4, 3, 3));
        assert_eq!((dims.noise_dim, dims.cond_dim, dims.width), (8, 8, 5));
    }

    #[test]
    fn propagate_sets_every_seed() {
        let mut cfg = RunConfig {
            seed: Some(9),
            precision: Some(Precision::Single),
            ..Default::default()
        };
        cfg.propagate();
        assert_eq!(cfg.representation.seed, 9);
        assert_eq!(cfg.halluc_train.seed, 9);
        assert_eq!(cfg.eval.seed, 9);
        assert_eq!(cfg.eval.precision, Precision::Single);
    }
}
