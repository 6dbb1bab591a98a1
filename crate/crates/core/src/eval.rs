//! Nearest-prototype inference with optional hallucinated support features,
//! per-task fine-tuning, and paired multi-variant evaluation.

use std::fmt;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_episode, EpisodeSpec, FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::halluc_train::{adam_episode_step, model_view, prototype};
use crate::models::{hallucinate, HallucinatorModel, HallucinatorVariant, NoiseSampler};
use crate::rng::{derive_seed, derived};
use crate::tensor::optim::AdamState;
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Baseline,
    BaselineKd,
    Vfh,
    Tfh,
    TfhFt,
}

impl MethodTag {
    pub const ALL: [MethodTag; 5] = [
        MethodTag::Baseline,
        MethodTag::BaselineKd,
        MethodTag::Vfh,
        MethodTag::Tfh,
        MethodTag::TfhFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::Baseline => "baseline",
            MethodTag::BaselineKd => "baseline_kd",
            MethodTag::Vfh => "vfh",
            MethodTag::Tfh => "tfh",
            MethodTag::TfhFt => "tfh_ft",
        }
    }

    /// Row label in the results table.
    pub fn label(self) -> &'static str {
        match self {
            MethodTag::Baseline => "Baseline",
            MethodTag::BaselineKd => "Baseline-KD",
            MethodTag::Vfh => "VFH",
            MethodTag::Tfh => "TFH",
            MethodTag::TfhFt => "TFH-ft",
        }
    }

    pub fn uses_hallucinator(self) -> bool {
        matches!(self, MethodTag::Vfh | MethodTag::Tfh | MethodTag::TfhFt)
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        MethodTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s || t.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant {s:?}; expected one of baseline, baseline_kd, vfh, tfh, tfh_ft"))
    }
}

/// Anything that can produce extra support features from a class prototype.
pub trait FeatureGenerator: Sync {
    /// Whether prototypes and outputs are feature tensors or pooled vectors.
    fn view(&self) -> HallucinatorVariant;

    fn generate(&self, prototype: &Tensor, count: usize, noise_seed: u64) -> Result<Vec<Tensor>>;
}

impl FeatureGenerator for HallucinatorModel {
    fn view(&self) -> HallucinatorVariant {
        self.variant()
    }

    fn generate(&self, prototype: &Tensor, count: usize, noise_seed: u64) -> Result<Vec<Tensor>> {
        let mut sampler = NoiseSampler::new(self.dims().noise_dim, noise_seed);
        hallucinate(self, prototype, count, &mut sampler)
    }
}

/// Emits exact copies of the prototype it is given.
#[derive(Clone, Copy, Debug, Default)]
pub struct PrototypeCopies;

impl FeatureGenerator for PrototypeCopies {
    fn view(&self) -> HallucinatorVariant {
        HallucinatorVariant::Tensor
    }

    fn generate(&self, prototype: &Tensor, count: usize, _noise_seed: u64) -> Result<Vec<Tensor>> {
        Ok(vec![prototype.clone(); count])
    }
}

/// Hallucination settings for one episode. Class `j` draws its noise from a
/// stream derived from `noise_seed` and `j`, so classes are generated
/// independently of each other.
#[derive(Clone, Copy)]
pub struct Augmentation<'a> {
    pub generator: &'a dyn FeatureGenerator,
    pub count: usize,
    pub noise_seed: u64,
}

fn pooled(x: &Tensor) -> Result<Vec<f64>> {
    match x.rank() {
        1 => Ok(x.data().to_vec()),
        3 => Ok(x.global_average_pool()?.into_data()),
        _ => Err(Error::geometry("classify_episode", format!("cannot pool shape {:?}", x.shape()))),
    }
}

/// Vector prototypes: per class, the mean of the pooled support features and
/// of any pooled generated features.
pub fn vector_prototypes(support: &[Vec<&Tensor>], augment: Option<Augmentation<'_>>) -> Result<Vec<Vec<f64>>> {
    let Some(first) = support.iter().flatten().next() else {
        return Err(Error::Empty("episode support"));
    };
    let shape = first.shape().to_vec();
    support
        .iter()
        .enumerate()
        .map(|(j, feats)| {
            if feats.is_empty() {
                return Err(Error::Empty("class without support"));
            }
            let mut vectors = Vec::new();
            for f in feats {
                if f.shape() != shape.as_slice() {
                    return Err(Error::shape("classify_episode", f.shape(), &shape));
                }
                vectors.push(pooled(f)?);
            }
            if let Some(aug) = augment.filter(|a| a.count > 0) {
                let p = model_view(aug.generator.view(), &prototype(feats)?)?;
                for g in aug.generator.generate(&p, aug.count, derive_seed(aug.noise_seed, j as u64))? {
                    vectors.push(pooled(&g)?);
                }
            }
            let d = vectors[0].len();
            if vectors.iter().any(|v| v.len() != d) {
                return Err(Error::shape("classify_episode", &[vectors[0].len()], &[d]));
            }
            let mut mean = vec![0.0; d];
            for v in &vectors {
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x;
                }
            }
            let n = vectors.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            Ok(mean)
        })
        .collect()
}

/// Index of the nearest prototype by squared Euclidean distance; ties go to
/// the lowest index.
pub fn nearest(prototypes: &[Vec<f64>], query: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, p) in prototypes.iter().enumerate() {
        let d: f64 = p.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Predicted episode label for every query.
pub fn classify_episode(
    support: &[Vec<&Tensor>],
    queries: &[&Tensor],
    augment: Option<Augmentation<'_>>,
) -> Result<Vec<usize>> {
    let protos = vector_prototypes(support, augment)?;
    let d = protos[0].len();
    queries
        .iter()
        .map(|q| {
            let v = pooled(q)?;
            if v.len() != d {
                return Err(Error::shape("classify_episode", q.shape(), &[d]));
            }
            Ok(nearest(&protos, &v))
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Fine-tunes a copy of `model` on the episode's support with Adam, using the
/// training loss on support prototypes. `model` itself is never modified.
pub fn finetune_on_support(
    model: &HallucinatorModel,
    support: &[Vec<&Tensor>],
    steps: usize,
    learning_rate: f64,
    generated: usize,
    noise_seed: u64,
    precision: Precision,
) -> Result<HallucinatorModel> {
    let mut copy = model.clone();
    let mut adam = AdamState::new(learning_rate);
    let mut sampler = NoiseSampler::new(model.dims().noise_dim, noise_seed);
    for _ in 0..steps {
        adam_episode_step(&mut copy, support, generated, &mut sampler, &mut adam, precision)?;
    }
    Ok(copy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    /// Generated features per class at test time.
    pub m_test: usize,
    pub task_count: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_m: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_way: 5,
            k_shot: 1,
            queries_per_class: 15,
            m_test: 500,
            task_count: 600,
            finetune_steps: 10,
            finetune_lr: 1e-5,
            finetune_m: 50,
            seed: 0,
            precision: Precision::Double,
        }
    }
}

impl EvalConfig {
    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            queries_per_class: self.queries_per_class,
            generated_count: self.m_test,
            seed: self.seed,
        }
    }
}

/// Feature sets and models available to an evaluation. Baseline runs on the
/// teacher's features when given; every other variant uses `features`.
#[derive(Clone, Copy)]
pub struct EvalInputs<'a> {
    pub features: &'a FeatureDataset,
    pub teacher_features: Option<&'a FeatureDataset>,
    pub tfh: Option<&'a HallucinatorModel>,
    pub vfh: Option<&'a HallucinatorModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: MethodTag,
    /// Mean accuracy over tasks, in percent.
    pub mean_accuracy: f64,
    /// Half-width of the 95 % confidence interval, in percent.
    pub ci95: f64,
    pub task_accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub task_count: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub results: Vec<VariantResult>,
}

impl EvalReport {
    pub fn result(&self, variant: MethodTag) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == variant)
    }
}

/// Mean and `1.96·s/√n` with the sample standard deviation `s`.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

fn hallucinator_for<'a>(inputs: &EvalInputs<'a>, variant: MethodTag) -> Result<Option<&'a HallucinatorModel>> {
    let (model, expected) = match variant {
        MethodTag::Baseline | MethodTag::BaselineKd => return Ok(None),
        MethodTag::Vfh => (inputs.vfh, HallucinatorVariant::Vector),
        MethodTag::Tfh | MethodTag::TfhFt => (inputs.tfh, HallucinatorVariant::Tensor),
    };
    let model = model.ok_or_else(|| Error::InvalidConfig(format!("variant {variant} needs a {expected:?} hallucinator")))?;
    if model.variant() != expected {
        return Err(Error::ArchitectureMismatch(format!(
            "variant {variant} needs a {expected:?} hallucinator, got {:?}",
            model.variant()
        )));
    }
    if model.dims().feature != inputs.features.shape() {
        return Err(Error::shape(
            "evaluate",
            &model.dims().feature.to_vec(),
            &inputs.features.shape().to_vec(),
        ));
    }
    Ok(Some(model))
}

/// Scores every variant on the same `task_count` tasks from the novel split.
/// Task `t` is sampled from a stream derived from `seed` and `t`, so results
/// do not depend on how tasks are scheduled across threads.
pub fn evaluate(inputs: EvalInputs<'_>, variants: &[MethodTag], config: &EvalConfig) -> Result<EvalReport> {
    let spec = config.episode_spec();
    spec.validate()?;
    if variants.is_empty() {
        return Err(Error::InvalidConfig("no variants to evaluate".into()));
    }
    if let Some(t) = inputs.teacher_features {
        if !t.aligned_with(inputs.features) {
            return Err(Error::InvalidConfig(
                "teacher and student feature files do not list the same examples".into(),
            ));
        }
    }
    let models = variants
        .iter()
        .map(|&v| hallucinator_for(&inputs, v))
        .collect::<Result<Vec<_>>>()?;
    let student = inputs.features.scaled();
    let teacher = inputs.teacher_features.map(FeatureDataset::scaled);
    let baseline_ds = teacher.as_ref().unwrap_or(&student);

    let per_task: Vec<Vec<f64>> = (0..config.task_count)
        .into_par_iter()
        .map(|t| {
            let mut rng = derived(config.seed, t as u64);
            let episode = sample_episode(&student, Split::Novel, &spec, &mut rng)?;
            let noise_seed = derive_seed(config.seed ^ 0x5eed, t as u64);
            let labels: Vec<usize> = episode
                .query
                .iter()
                .enumerate()
                .flat_map(|(j, q)| std::iter::repeat_n(j, q.len()))
                .collect();
            variants
                .iter()
                .zip(&models)
                .map(|(&variant, model)| {
                    let ds = if variant == MethodTag::Baseline { baseline_ds } else { &student };
                    let support = episode.support_features(ds);
                    let queries: Vec<&Tensor> = episode.query_features(ds).into_iter().flatten().collect();
                    let tuned;
                    let augment = match (variant, model) {
                        (MethodTag::TfhFt, Some(m)) => {
                            tuned = finetune_on_support(
                                m,
                                &support,
                                config.finetune_steps,
                                config.finetune_lr,
                                config.finetune_m,
                                derive_seed(noise_seed, 1),
                                config.precision,
                            )?;
                            Some(Augmentation {
                                generator: &tuned as &dyn FeatureGenerator,
                                count: config.m_test,
                                noise_seed,
                            })
                        }
                        (_, Some(m)) => Some(Augmentation {
                            generator: *m as &dyn FeatureGenerator,
                            count: config.m_test,
                            noise_seed,
                        }),
                        (_, None) => None,
                    };
                    let predictions = classify_episode(&support, &queries, augment)?;
                    Ok(100.0 * accuracy(&predictions, &labels))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let results = variants
        .iter()
        .enumerate()
        .map(|(i, &variant)| {
            let task_accuracies: Vec<f64> = per_task.iter().map(|row| row[i]).collect();
            let (mean_accuracy, ci95) = mean_ci95(&task_accuracies);
            info!("{variant}: {mean_accuracy:.2} ± {ci95:.2} over {} tasks", config.task_count);
            VariantResult {
                variant,
                mean_accuracy,
                ci95,
                task_accuracies,
            }
        })
        .collect();
    Ok(EvalReport {
        seed: config.seed,
        task_count: config.task_count,
        n_way: config.n_way,
        k_shot: config.k_shot,
        results,
    })
}

/// Plain-text table with one row per variant and one column per report
/// (e.g. 1-shot and 5-shot).
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut header = format!("{:<12}", "variant");
    for r in reports {
        header.push_str(&format!(" | {:>18}", format!("{}-way {}-shot", r.n_way, r.k_shot)));
    }
    let mut out = header.clone();
    out.push('\n');
    out.push_str(&"-".repeat(header.chars().count()));
    out.push('\n');
    let mut variants: Vec<MethodTag> = reports.iter().flat_map(|r| r.results.iter().map(|v| v.variant)).collect();
    variants.sort();
    variants.dedup();
    for v in variants {
        out.push_str(&format!("{:<12}", v.label()));
        for r in reports {
            let cell = match r.result(v) {
                Some(res) => format!("{:.2} ± {:.2}", res.mean_accuracy, res.ci95),
                None => "-".into(),
            };
            out.push_str(&format!(" | {cell:>18}"));
        }
        out.push('\n');
    }
    out
}
