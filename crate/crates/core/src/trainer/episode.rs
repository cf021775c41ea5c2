use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::encoder::{image_embeddings, EncoderWeights, PromptSet};
use crate::error::{ModelError, TrainError};
use crate::tensor::Tensor;

/// Samples with labels given as positions in the training class set.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if features.rows() != labels.len() {
            return Err(ModelError::Dimension {
                what: "batch rows vs labels",
                expected: labels.len(),
                found: features.rows(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Distinct labels, ascending.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// One-hot targets `[n, n_classes]`.
    pub fn one_hot(&self, n_classes: usize) -> Tensor {
        let mut t = Tensor::zeros(self.len(), n_classes);
        for (i, &y) in self.labels.iter().enumerate() {
            t.data_mut()[i * n_classes + y] = 1.0;
        }
        t
    }
}

/// A class-disjoint split of one batch. Indices point into the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub train_classes: Vec<usize>,
    pub val_classes: Vec<usize>,
}

impl Episode {
    pub fn train(&self, batch: &LabeledBatch) -> LabeledBatch {
        batch.subset(&self.train_idx)
    }

    pub fn val(&self, batch: &LabeledBatch) -> LabeledBatch {
        batch.subset(&self.val_idx)
    }
}

/// Randomly partitions the batch's classes into `⌈C/2⌉` episode-train and
/// `⌊C/2⌋` episode-validation classes and assigns samples by class.
pub fn split_episode(labels: &[usize], rng: &mut impl Rng) -> Result<Episode, TrainError> {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(TrainError::SingleClassBatch(classes.len()));
    }
    classes.shuffle(rng);
    let n_train = classes.len().div_ceil(2);
    let mut train_classes = classes[..n_train].to_vec();
    let mut val_classes = classes[n_train..].to_vec();
    train_classes.sort_unstable();
    val_classes.sort_unstable();
    let (train_idx, val_idx) = (0..labels.len()).partition(|&i| train_classes.binary_search(&labels[i]).is_ok());
    Ok(Episode {
        train_idx,
        val_idx,
        train_classes,
        val_classes,
    })
}

/// One mixup draw per validation sample: a train partner and a ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupPlan {
    /// Batch index of the train partner of each validation sample.
    pub partners: Vec<usize>,
    pub rho: Vec<f64>,
}

pub fn draw_mixup(episode: &Episode, mu: f64, nu: f64, rng: &mut impl Rng) -> Result<MixupPlan, TrainError> {
    if episode.train_idx.is_empty() {
        return Err(TrainError::EmptyTrainSubset);
    }
    let beta = Beta::new(mu, nu).map_err(|e| TrainError::Config(format!("mixup Beta({mu}, {nu}): {e}")))?;
    let mut partners = Vec::with_capacity(episode.val_idx.len());
    let mut rho = Vec::with_capacity(episode.val_idx.len());
    for _ in &episode.val_idx {
        partners.push(episode.train_idx[rng.random_range(0..episode.train_idx.len())]);
        rho.push(beta.sample(rng));
    }
    Ok(MixupPlan { partners, rho })
}

impl MixupPlan {
    /// Mixed soft labels `ρ·y_val + (1−ρ)·y_tr`, `[n_val, n_classes]`.
    pub fn soft_labels(&self, batch: &LabeledBatch, episode: &Episode, n_classes: usize) -> Tensor {
        let mut t = Tensor::zeros(self.rho.len(), n_classes);
        for (i, (&v, (&p, &r))) in episode.val_idx.iter().zip(self.partners.iter().zip(&self.rho)).enumerate() {
            let row = &mut t.data_mut()[i * n_classes..(i + 1) * n_classes];
            row[batch.labels[v]] += r;
            row[batch.labels[p]] += 1.0 - r;
        }
        debug_assert!((0..t.rows()).all(|i| valid_distribution(t.row_slice(i))));
        t
    }

    pub fn rho_column(&self) -> (Tensor, Tensor) {
        (
            Tensor::column(self.rho.clone()),
            Tensor::column(self.rho.iter().map(|r| 1.0 - r).collect()),
        )
    }
}

pub fn valid_distribution(p: &[f64]) -> bool {
    p.iter().all(|v| *v >= 0.0 && v.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    /// Mixed final visual embedding.
    pub feature: Vec<f64>,
    pub label: Vec<f64>,
    pub rho: f64,
}

/// Mixes final visual embeddings (computed with `prompts`) and one-hot labels
/// of each validation sample with a random episode-train sample.
pub fn task_augment(
    batch: &LabeledBatch,
    episode: &Episode,
    prompts: &PromptSet,
    weights: &EncoderWeights,
    n_classes: usize,
    mu: f64,
    nu: f64,
    rng: &mut impl Rng,
) -> Result<Vec<AugmentedSample>, TrainError> {
    let plan = draw_mixup(episode, mu, nu, rng)?;
    augment_with_plan(batch, episode, &plan, prompts, weights, n_classes)
}

pub fn augment_with_plan(
    batch: &LabeledBatch,
    episode: &Episode,
    plan: &MixupPlan,
    prompts: &PromptSet,
    weights: &EncoderWeights,
    n_classes: usize,
) -> Result<Vec<AugmentedSample>, TrainError> {
    let h = image_embeddings(&batch.features, &prompts.theta_vis, weights)?;
    let labels = plan.soft_labels(batch, episode, n_classes);
    Ok(episode
        .val_idx
        .iter()
        .zip(&plan.partners)
        .zip(&plan.rho)
        .enumerate()
        .map(|(i, ((&v, &p), &r))| AugmentedSample {
            feature: h
                .row_slice(v)
                .iter()
                .zip(h.row_slice(p))
                .map(|(a, b)| r * a + (1.0 - r) * b)
                .collect(),
            label: labels.row_slice(i).to_vec(),
            rho: r,
        })
        .collect())
}
