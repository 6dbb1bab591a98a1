//! Representation learning on raw inputs: cross-entropy pre-training of a
//! teacher, then self-distillation into a student of identical architecture,
//! and export of the student's feature tensors.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_feature_file, FeatureDataset, LabeledExample, Split};
use crate::error::{Error, Result};
use crate::models::{BackboneModel, EmbeddingNet};
use crate::rng::seeded;
use crate::tensor::optim::{sgd_step, SgdState};
use crate::tensor::{Precision, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprConfig {
    /// Weight of the supervised term in the distillation loss.
    pub alpha: f64,
    /// Weight of the KL term in the distillation loss.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// λ in `R(φ) = λ/2·‖W_φ‖²`; also the SGD weight decay.
    pub regularizer_weight: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ReprConfig {
    fn default() -> Self {
        ReprConfig {
            alpha: 0.5,
            beta: 0.5,
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            regularizer_weight: 0.0005,
            seed: 0,
            precision: Precision::Double,
        }
    }
}

impl ReprConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || self.alpha + self.beta <= 0.0 {
            return bad(format!("need alpha, beta ≥ 0 with alpha + beta > 0, got {} and {}", self.alpha, self.beta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.regularizer_weight >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("invalid SGD settings".into());
        }
        Ok(())
    }

    fn sgd(&self) -> SgdState {
        SgdState::new(self.learning_rate, self.momentum, self.regularizer_weight)
    }
}

/// Maps base class ids to classifier output indices.
pub fn base_label_map(ds: &FeatureDataset) -> Result<BTreeMap<u32, usize>> {
    let base = ds.classes(Split::Base);
    if base.is_empty() || ds.split_indices(Split::Base).is_empty() {
        return Err(Error::Empty("base split"));
    }
    Ok(base.iter().enumerate().map(|(i, &c)| (c, i)).collect())
}

fn check_head(net: &EmbeddingNet, labels: &BTreeMap<u32, usize>) -> Result<()> {
    if net.classifier.num_classes() != labels.len() {
        return Err(Error::ArchitectureMismatch(format!(
            "classifier has {} outputs for {} base classes",
            net.classifier.num_classes(),
            labels.len()
        )));
    }
    Ok(())
}

/// Stacks examples into a batch `[n, c, h, w]` with classifier labels.
pub fn batch(ds: &FeatureDataset, indices: &[usize], labels: &BTreeMap<u32, usize>) -> Result<(Tensor, Vec<usize>)> {
    let items: Vec<&Tensor> = indices.iter().map(|&i| ds.feature(i)).collect();
    let images = Tensor::stack(&items)?;
    let ys = indices
        .iter()
        .map(|&i| {
            let c = ds.example(i).class_id;
            labels
                .get(&c)
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("class {c} is not a base class")))
        })
        .collect::<Result<_>>()?;
    Ok((images, ys))
}

/// `R(φ) = λ/2·‖W_φ‖²` over the classifier weight matrix.
pub fn regularizer(net: &EmbeddingNet, weight: f64) -> f64 {
    0.5 * weight * net.classifier.weights().data().iter().map(|w| w * w).sum::<f64>()
}

fn check_input(net: &EmbeddingNet, images: &Tensor) -> Result<()> {
    if images.rank() != 4 || images.shape()[1..] != net.backbone.input_shape() {
        let mut expected = vec![0];
        expected.extend_from_slice(&net.backbone.input_shape());
        return Err(Error::shape("representation", images.shape(), &expected));
    }
    Ok(())
}

fn teacher_probs(teacher: &EmbeddingNet, images: &Tensor, precision: Precision) -> Result<Tensor> {
    let mut tape = Tape::with_precision(precision);
    let params = teacher.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let logits = teacher.logits(&mut tape, &params, x)?;
    let probs = tape.softmax(logits)?;
    Ok(tape.value(probs).clone())
}

/// Mean cross-entropy plus `R(φ)` on one batch.
pub fn stage1_loss(net: &EmbeddingNet, images: &Tensor, labels: &[usize], regularizer_weight: f64) -> Result<f64> {
    check_input(net, images)?;
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let logits = net.logits(&mut tape, &params, x)?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    Ok(tape.value(ce).item() + regularizer(net, regularizer_weight))
}

/// Terms of the distillation objective on one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillLoss {
    pub cross_entropy: f64,
    pub regularizer: f64,
    pub kl: f64,
    /// `α·(cross_entropy + regularizer) + β·kl`
    pub total: f64,
}

pub fn stage2_loss(
    student: &EmbeddingNet,
    teacher: &EmbeddingNet,
    images: &Tensor,
    labels: &[usize],
    config: &ReprConfig,
) -> Result<DistillLoss> {
    if !student.same_architecture(teacher) {
        return Err(Error::ArchitectureMismatch("student and teacher differ".into()));
    }
    check_input(student, images)?;
    let target = teacher_probs(teacher, images, Precision::Double)?;
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let logits = student.logits(&mut tape, &params, x)?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let probs = tape.softmax(logits)?;
    let kl = tape.kl_divergence(probs, &target)?;
    let cross_entropy = tape.value(ce).item();
    let reg = regularizer(student, config.regularizer_weight);
    let kl = tape.value(kl).item();
    Ok(DistillLoss {
        cross_entropy,
        regularizer: reg,
        kl,
        total: config.alpha * (cross_entropy + reg) + config.beta * kl,
    })
}

/// One SGD pass loop shared by both stages. `objective` records the loss on
/// the tape for the bound student parameters and returns the loss var along
/// with any value to add to the reported loss.
fn run_sgd(
    ds: &FeatureDataset,
    net: &mut EmbeddingNet,
    config: &ReprConfig,
    stage: &str,
    mut objective: impl FnMut(&mut Tape, &EmbeddingNet, &[Var], &Tensor, &[usize]) -> Result<(Var, f64)>,
) -> Result<Vec<f64>> {
    config.validate()?;
    let labels = base_label_map(ds)?;
    check_head(net, &labels)?;
    let mut order = ds.split_indices(Split::Base);
    let mut rng = seeded(config.seed);
    let mut sgd = config.sgd();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (images, ys) = batch(ds, chunk, &labels)?;
            check_input(net, &images)?;
            let mut tape = Tape::with_precision(config.precision);
            let params = net.bind(&mut tape, true);
            let (loss, extra) = objective(&mut tape, net, &params, &images, &ys)?;
            let value = tape.value(loss).item() + extra;
            if !value.is_finite() {
                return Err(Error::InvalidConfig(format!("{stage}: loss became {value} in epoch {epoch}")));
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = params
                .iter()
                .map(|&p| tape.grad(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(p).numel()]))
                .collect();
            let mut flat = net.params_cloned();
            sgd_step(&mut flat, &grads, &mut sgd)?;
            net.set_params(flat)?;
            total += value;
            batches += 1;
            debug!("{stage} epoch {epoch} batch {batches}: loss {value:.6}");
        }
        let mean = total / batches as f64;
        info!("{stage} epoch {epoch}/{}: mean loss {mean:.6}", config.epochs);
        history.push(mean);
    }
    Ok(history)
}

/// Cross-entropy training of backbone and classifier on the base split with
/// SGD. Returns the per-epoch mean of `CE + R(φ)`; the gradient of `R(φ)`
/// enters through the SGD weight decay.
pub fn train_stage1(ds: &FeatureDataset, net: &mut EmbeddingNet, config: &ReprConfig) -> Result<Vec<f64>> {
    let lambda = config.regularizer_weight;
    run_sgd(ds, net, config, "stage 1", |tape, net, params, images, ys| {
        let x = tape.constant(images.clone());
        let logits = net.logits(tape, params, x)?;
        let ce = tape.softmax_cross_entropy(logits, ys)?;
        Ok((ce, regularizer(net, lambda)))
    })
}

/// Trains `student` on `α·(CE + R) + β·KL(teacher ‖ student)` with the
/// teacher frozen.
pub fn train_stage2_distill(
    ds: &FeatureDataset,
    teacher: &EmbeddingNet,
    student: &mut EmbeddingNet,
    config: &ReprConfig,
) -> Result<Vec<f64>> {
    if !student.same_architecture(teacher) {
        return Err(Error::ArchitectureMismatch(
            "student must have the teacher's architecture".into(),
        ));
    }
    let (alpha, beta, lambda) = (config.alpha, config.beta, config.regularizer_weight);
    let precision = config.precision;
    run_sgd(ds, student, config, "stage 2", |tape, net, params, images, ys| {
        let target = teacher_probs(teacher, images, precision)?;
        let x = tape.constant(images.clone());
        let logits = net.logits(tape, params, x)?;
        let ce = tape.softmax_cross_entropy(logits, ys)?;
        let probs = tape.softmax(logits)?;
        let kl = tape.kl_divergence(probs, &target)?;
        let a = tape.scale(ce, alpha);
        let b = tape.scale(kl, beta);
        let loss = tape.add(a, b)?;
        Ok((loss, alpha * regularizer(net, lambda)))
    })
}

/// Fraction of `split` examples whose arg-max logit is the true base class.
pub fn accuracy(net: &EmbeddingNet, ds: &FeatureDataset, split: Split) -> Result<f64> {
    let labels = base_label_map(ds)?;
    let indices = ds.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Empty("split"));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(64) {
        let (images, ys) = batch(ds, chunk, &labels)?;
        let mut tape = Tape::new();
        let params = net.bind(&mut tape, false);
        let x = tape.constant(images);
        let logits = net.logits(&mut tape, &params, x)?;
        let c = net.classifier.num_classes();
        for (row, &y) in tape.value(logits).data().chunks_exact(c).zip(&ys) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            correct += usize::from(best.0 == y);
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Runs every example of `raw` through `backbone` and keeps the pre-pooling
/// feature tensors (stored at f32 precision), with the same splits. Scaling
/// statistics are recomputed from the base split of the features.
pub fn extract_features(backbone: &BackboneModel, raw: &FeatureDataset) -> Result<FeatureDataset> {
    if raw.shape().as_array() != backbone.input_shape() {
        return Err(Error::shape("export_features", &raw.shape().to_vec(), &backbone.input_shape()));
    }
    let feature = backbone.feature_shape();
    let dims = feature.to_vec();
    let mut examples = Vec::with_capacity(raw.len());
    let all: Vec<usize> = (0..raw.len()).collect();
    for chunk in all.chunks(64) {
        let items: Vec<&Tensor> = chunk.iter().map(|&i| raw.feature(i)).collect();
        let out = backbone.embed(&Tensor::stack(&items)?)?;
        for (&i, f) in chunk.iter().zip(out.unstack()) {
            let values = f.into_data().into_iter().map(|v| v as f32 as f64).collect();
            examples.push(LabeledExample {
                class_id: raw.example(i).class_id,
                feature: Tensor::new(&dims, values)?,
            });
        }
    }
    FeatureDataset::new(feature, examples, raw.splits().clone())
}

/// [`extract_features`] followed by writing the `FTH1` file and manifest.
pub fn export_features(backbone: &BackboneModel, raw: &FeatureDataset, path: &Path) -> Result<FeatureDataset> {
    let features = extract_features(backbone, raw)?;
    write_feature_file(path, &features)?;
    info!("wrote {} feature tensors of shape {} to {}", features.len(), features.shape(), path.display());
    Ok(features)
}
