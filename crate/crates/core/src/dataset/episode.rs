use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// An N-way K-shot task description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    /// Hallucinated examples per class (M).
    pub generated_count: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_way: 5,
            k_shot: 1,
            queries_per_class: 15,
            generated_count: 50,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::InvalidConfig(format!("n_way must be at least 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 {
            return Err(Error::InvalidConfig("k_shot must be at least 1".into()));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.k_shot + self.queries_per_class
    }
}

/// Example indices of one sampled task. Episode label `j` stands for
/// `classes[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<u32>,
    /// `support[j]` holds K example indices of class `classes[j]`.
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn support_len(&self) -> usize {
        self.support.iter().map(Vec::len).sum()
    }

    pub fn query_len(&self) -> usize {
        self.query.iter().map(Vec::len).sum()
    }

    pub fn support_features<'a>(&self, ds: &'a FeatureDataset) -> Vec<Vec<&'a Tensor>> {
        gather(&self.support, ds)
    }

    pub fn query_features<'a>(&self, ds: &'a FeatureDataset) -> Vec<Vec<&'a Tensor>> {
        gather(&self.query, ds)
    }

    /// Query features flattened in class order with their episode labels.
    pub fn labelled_queries<'a>(&self, ds: &'a FeatureDataset) -> Vec<(&'a Tensor, usize)> {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(label, idx)| idx.iter().map(move |&i| (ds.feature(i), label)))
            .collect()
    }
}

fn gather<'a>(groups: &[Vec<usize>], ds: &'a FeatureDataset) -> Vec<Vec<&'a Tensor>> {
    groups
        .iter()
        .map(|g| g.iter().map(|&i| ds.feature(i)).collect())
        .collect()
}

/// Samples N classes of `split` uniformly without replacement among those with
/// at least `K + queries_per_class` examples, then for each class K support
/// and `queries_per_class` query examples, again without replacement.
pub fn sample_episode(ds: &FeatureDataset, split: Split, spec: &EpisodeSpec, rng: &mut Rng) -> Result<Episode> {
    spec.validate()?;
    let need = spec.per_class();
    let eligible: Vec<u32> = ds
        .classes(split)
        .iter()
        .copied()
        .filter(|&c| ds.indices_of(c).len() >= need)
        .collect();
    if eligible.len() < spec.n_way {
        return Err(Error::InsufficientData(format!(
            "{split:?} split has {} classes with at least {need} examples, {}-way episodes need {}",
            eligible.len(),
            spec.n_way,
            spec.n_way
        )));
    }
    let classes: Vec<u32> = index::sample(rng, eligible.len(), spec.n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut support = Vec::with_capacity(spec.n_way);
    let mut query = Vec::with_capacity(spec.n_way);
    for &c in &classes {
        let pool = ds.indices_of(c);
        let picked: Vec<usize> = index::sample(rng, pool.len(), need).into_iter().map(|i| pool[i]).collect();
        support.push(picked[..spec.k_shot].to_vec());
        query.push(picked[spec.k_shot..].to_vec());
    }
    Ok(Episode { classes, support, query })
}
