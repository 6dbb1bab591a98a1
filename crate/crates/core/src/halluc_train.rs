//! Episodic training of the hallucinator: condition on the class prototype,
//! generate M features per class and pull them towards the prototype.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_episode, EpisodeSpec, FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::models::checkpoint::save_hallucinator;
use crate::models::{BoundHallucinator, HallucinatorModel, HallucinatorVariant, NoiseSampler};
use crate::rng::{derive_seed, seeded};
use crate::tensor::optim::{adam_step, AdamState};
use crate::tensor::{Precision, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HallucTrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    /// Generated features per class (M).
    pub generated: usize,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub learning_rate: f64,
    pub lr_half_every_epochs: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for HallucTrainConfig {
    fn default() -> Self {
        HallucTrainConfig {
            n_way: 5,
            k_shot: 20,
            generated: 50,
            epochs: 50,
            tasks_per_epoch: 600,
            learning_rate: 1e-5,
            lr_half_every_epochs: 10,
            seed: 0,
            precision: Precision::Double,
        }
    }
}

impl HallucTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0
            || self.k_shot == 0
            || self.generated == 0
            || self.epochs == 0
            || self.tasks_per_epoch == 0
            || self.lr_half_every_epochs == 0
        {
            return Err(Error::InvalidConfig("hallucinator training counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = (epoch.max(1) - 1) / self.lr_half_every_epochs;
        self.learning_rate * 0.5f64.powi(halvings as i32)
    }

    fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            queries_per_class: 0,
            generated_count: self.generated,
            seed: self.seed,
        }
    }
}

/// Elementwise mean of K same-shaped features.
pub fn prototype(features: &[&Tensor]) -> Result<Tensor> {
    if features.is_empty() {
        return Err(Error::Empty("prototype of no features"));
    }
    Tensor::mean_of(features)
}

/// What the hallucinator sees of one feature: the tensor itself, or its
/// pooled vector for the vector variant.
pub fn model_view(variant: HallucinatorVariant, feature: &Tensor) -> Result<Tensor> {
    match variant {
        HallucinatorVariant::Tensor => Ok(feature.clone()),
        HallucinatorVariant::Vector => feature.global_average_pool(),
    }
}

/// Per-class prototypes stacked to `[N, ...]` in the model's view.
pub fn class_prototypes(variant: HallucinatorVariant, class_features: &[Vec<&Tensor>]) -> Result<Tensor> {
    if class_features.is_empty() {
        return Err(Error::Empty("episode without classes"));
    }
    let protos = class_features
        .iter()
        .map(|fs| model_view(variant, &prototype(fs)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&protos.iter().collect::<Vec<_>>())
}

/// `(1/MN)·Σ_j Σ_m ‖generated_{j,m} − p_j‖²` where `generated` is
/// `[N·M, ...]` grouped by class and `prototypes` is `[N, ...]`.
pub fn hallucination_loss(tape: &mut Tape, generated: Var, prototypes: &Tensor, per_class: usize) -> Result<Var> {
    let n = prototypes.shape().first().copied().unwrap_or(0);
    if n == 0 || per_class == 0 {
        return Err(Error::Empty("hallucination loss over no samples"));
    }
    let gen_shape = tape.shape(generated).to_vec();
    let mut expected = vec![n * per_class];
    expected.extend_from_slice(&prototypes.shape()[1..]);
    if gen_shape != expected {
        return Err(Error::shape("episode_loss", &gen_shape, &expected));
    }
    let row = prototypes.numel() / n;
    let mut target = Vec::with_capacity(n * per_class * row);
    for p in prototypes.data().chunks_exact(row) {
        for _ in 0..per_class {
            target.extend_from_slice(p);
        }
    }
    let target = tape.constant(Tensor::new(&expected, target)?);
    let sq = tape.mse_to_target(generated, target)?;
    Ok(tape.scale(sq, 1.0 / (n * per_class) as f64))
}

/// Records the episode loss for `class_features` (N classes, K features each)
/// with M fresh noise draws per class.
pub fn episode_loss(
    tape: &mut Tape,
    bound: &BoundHallucinator<'_>,
    variant: HallucinatorVariant,
    class_features: &[Vec<&Tensor>],
    per_class: usize,
    sampler: &mut NoiseSampler,
) -> Result<Var> {
    let protos = class_prototypes(variant, class_features)?;
    let n = class_features.len();
    let p = tape.constant(protos.clone());
    let s = bound.condition(tape, p)?;
    let z = tape.constant(sampler.sample(n * per_class));
    let generated = bound.generate(tape, s, z, per_class)?;
    hallucination_loss(tape, generated, &protos, per_class)
}

/// Episode loss value for a frozen model.
pub fn episode_loss_value(
    model: &HallucinatorModel,
    class_features: &[Vec<&Tensor>],
    per_class: usize,
    sampler: &mut NoiseSampler,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let loss = episode_loss(&mut tape, &bound, model.variant(), class_features, per_class, sampler)?;
    Ok(tape.value(loss).item())
}

/// One Adam step on the episode loss. Returns the loss before the step.
pub fn adam_episode_step(
    model: &mut HallucinatorModel,
    class_features: &[Vec<&Tensor>],
    per_class: usize,
    sampler: &mut NoiseSampler,
    adam: &mut AdamState,
    precision: Precision,
) -> Result<f64> {
    let mut tape = Tape::with_precision(precision);
    let bound = model.bind(&mut tape, true);
    let vars = bound.vars();
    let loss = episode_loss(&mut tape, &bound, model.variant(), class_features, per_class, sampler)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::InvalidConfig(format!("episode loss became {value}")));
    }
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();
    let mut params = model.params_cloned();
    adam_step(&mut params, &grads, adam)?;
    model.set_params(params)?;
    Ok(value)
}

/// Optional artifacts written at the end of every epoch.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Overwritten with the current model each epoch.
    pub checkpoint: Option<PathBuf>,
    /// CSV with columns `epoch,mean_loss,learning_rate`.
    pub loss_log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean episode loss of every epoch.
    pub loss_history: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

/// Trains on episodes from the base split of `ds`, after min-max scaling it
/// with its stored statistics. The embedding that produced the features stays
/// fixed. One Adam step per episode; noise is drawn fresh every episode.
pub fn train_hallucinator(
    ds: &FeatureDataset,
    model: &mut HallucinatorModel,
    config: &HallucTrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    config.validate()?;
    if ds.shape() != model.dims().feature {
        return Err(Error::shape("train_hallucinator", &ds.shape().to_vec(), &model.dims().feature.to_vec()));
    }
    let scaled = ds.scaled();
    let spec = config.episode_spec();
    let mut episodes = seeded(config.seed);
    let mut sampler = NoiseSampler::new(model.dims().noise_dim, derive_seed(config.seed, 1));
    let mut adam = AdamState::new(config.learning_rate);
    let mut log = match &outputs.loss_log {
        Some(path) => {
            let mut f = fs::File::create(path)?;
            writeln!(f, "epoch,mean_loss,learning_rate")?;
            Some(f)
        }
        None => None,
    };
    let mut report = TrainReport {
        loss_history: Vec::with_capacity(config.epochs),
        learning_rates: Vec::with_capacity(config.epochs),
    };
    for epoch in 1..=config.epochs {
        adam.learning_rate = config.lr_at(epoch);
        let mut total = 0.0;
        for task in 0..config.tasks_per_epoch {
            let episode = sample_episode(&scaled, Split::Base, &spec, &mut episodes)?;
            let features = episode.support_features(&scaled);
            let loss = adam_episode_step(model, &features, config.generated, &mut sampler, &mut adam, config.precision)?;
            debug!("epoch {epoch} task {task}: loss {loss:.6}");
            total += loss;
        }
        let mean = total / config.tasks_per_epoch as f64;
        info!(
            "epoch {epoch}/{}: mean loss {mean:.6}, learning rate {:e}",
            config.epochs, adam.learning_rate
        );
        report.loss_history.push(mean);
        report.learning_rates.push(adam.learning_rate);
        if let Some(f) = log.as_mut() {
            writeln!(f, "{epoch},{mean},{}", adam.learning_rate)?;
            f.flush()?;
        }
        if let Some(path) = &outputs.checkpoint {
            save_hallucinator(model, path)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototype_examples() {
        let a = Tensor::new(&[1, 2], vec![0.0, 2.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
        assert_eq!(prototype(&[&a, &b]).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(prototype(&[&a]).unwrap(), a);
        assert_eq!(prototype(&[&a, &a, &a]).unwrap(), a);
        assert!(prototype(&[]).is_err());
    }

    #[test]
    fn hand_frobenius_example() {
        let mut tape = Tape::new();
        let generated = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let protos = Tensor::ones(&[1, 2, 1, 1]);
        let loss = hallucination_loss(&mut tape, generated, &protos, 1).unwrap();
        assert_eq!(tape.value(loss).item(), 2.0);
    }

    #[test]
    fn exact_copies_give_zero() {
        let protos = Tensor::new(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let rows: Vec<f64> = protos.data()[..3].repeat(4).into_iter().chain(protos.data()[3..].repeat(4)).collect();
        let mut tape = Tape::new();
        let generated = tape.constant(Tensor::new(&[8, 3], rows).unwrap());
        let loss = hallucination_loss(&mut tape, generated, &protos, 4).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn learning_rate_halves() {
        let c = HallucTrainConfig::default();
        assert_eq!(c.lr_at(1), 1e-5);
        assert_eq!(c.lr_at(10), 1e-5);
        assert_eq!(c.lr_at(11), 0.5e-5);
        assert_eq!(c.lr_at(21), 1e-5 / 4.0);
    }

    #[test]
    fn reference_defaults() {
        let c = HallucTrainConfig::default();
        assert_eq!(
            (c.n_way, c.k_shot, c.generated, c.epochs, c.tasks_per_epoch),
            (5, 20, 50, 50, 600)
        );
    }
}
