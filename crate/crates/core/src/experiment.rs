//! Glue between a generated dataset, the frozen encoders and the trainer.

use serde::{Deserialize, Serialize};

use crate::encoder::{ClassSet, EncoderWeights, ModelDims, PretrainOptions, PromptSet};
use crate::error::{FormatError, MetricsError, ModelError, TrainError};
use crate::metrics::{evaluate_dataset, RunRow};
use crate::params::ParamDoc;
use crate::regularizer::ModulatorParams;
use crate::tasks::{Dataset, Split};
use crate::trainer::{train, FrozenModel, LabeledBatch, Regime, TrainConfig, TrainOutcome};

/// Frozen encoder settings. Input widths come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_p: usize,
    pub d_e: usize,
    pub text_mismatch: f64,
    pub prompt_gain: f64,
    pub bias_std: f64,
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        let opts = PretrainOptions::default();
        Self {
            d_p: dims.d_p,
            d_e: dims.d_e,
            text_mismatch: opts.text_mismatch,
            prompt_gain: opts.prompt_gain,
            bias_std: opts.bias_std,
            encoder_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (what, v) in [("d_p", self.d_p), ("d_e", self.d_e)] {
            if v == 0 {
                return Err(ModelError::Dimension {
                    what,
                    expected: 1,
                    found: 0,
                });
            }
        }
        Ok(())
    }

    pub fn dims_for(&self, dataset: &Dataset) -> ModelDims {
        ModelDims {
            d_x: dataset.spec.d_x,
            d_c: dataset.spec.d_c,
            d_p: self.d_p,
            d_e: self.d_e,
        }
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            text_mismatch: self.text_mismatch,
            prompt_gain: self.prompt_gain,
            bias_std: self.bias_std,
        }
    }

    /// The pretrained encoders matched to the dataset's world.
    pub fn encoder(&self, dataset: &Dataset) -> EncoderWeights {
        EncoderWeights::pretrained(self.encoder_seed, self.dims_for(dataset), &self.pretrain_options())
    }
}

/// The frozen model over the base classes and the base-train samples with
/// labels as positions in the base class set.
pub fn base_training(dataset: &Dataset, weights: &EncoderWeights, tau: f64) -> Result<(FrozenModel, LabeledBatch), ModelError> {
    let classes: ClassSet = dataset.base_classes();
    let (features, ids) = dataset.split_arrays(Split::BaseTrain);
    let labels = ids
        .iter()
        .map(|&id| {
            classes.position(id).ok_or(ModelError::UnknownClass {
                class: id,
                count: classes.len(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((FrozenModel::new(weights.clone(), classes, tau), LabeledBatch::new(features, labels)?))
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Trains on base-train and evaluates on every dataset in `eval_sets`
/// (the training dataset itself and any shifted copies).
pub fn run(
    dataset: &Dataset,
    weights: &EncoderWeights,
    config: &TrainConfig,
    eval_sets: &[&Dataset],
) -> Result<(TrainOutcome, Vec<RunRow>), RunError> {
    let (model, data) = base_training(dataset, weights, config.tau)?;
    let outcome = train(&data, &model, config)?;
    let rows = eval_sets
        .iter()
        .map(|ds| evaluate_dataset(&outcome.prompts, weights, ds, config.tau, config.regime.as_str(), config.seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((outcome, rows))
}

pub const CHECKPOINT_VERSION: u64 = 1;

/// Everything needed to evaluate or diagnose a trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u64,
    pub kind: String,
    pub regime: Regime,
    pub seed: u64,
    pub dataset_digest: String,
    pub initial_digest: String,
    pub prompts_digest: String,
    pub modulator_digest: String,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub prompts: ParamDoc,
    pub modulator: ParamDoc,
    pub encoder: ParamDoc,
}

impl Checkpoint {
    pub fn new(
        outcome: &TrainOutcome,
        weights: &EncoderWeights,
        config: &TrainConfig,
        model: &ModelConfig,
        dataset_digest: &str,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind: "checkpoint".into(),
            regime: config.regime,
            seed: config.seed,
            dataset_digest: dataset_digest.to_owned(),
            initial_digest: outcome.initial_prompts.digest(),
            prompts_digest: outcome.prompts.digest(),
            modulator_digest: outcome.phi.digest(),
            config: config.clone(),
            model: model.clone(),
            prompts: outcome.prompts.to_doc(),
            modulator: outcome.phi.to_doc(),
            encoder: weights.to_doc(),
        }
    }

    pub fn prompts(&self) -> Result<PromptSet, FormatError> {
        PromptSet::from_doc(&self.prompts)
    }

    pub fn modulator(&self) -> Result<ModulatorParams, FormatError> {
        ModulatorParams::from_doc(&self.modulator)
    }

    pub fn encoder(&self) -> Result<EncoderWeights, FormatError> {
        EncoderWeights::from_doc(&self.encoder)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    /// Parses and checks version, kind and the recorded digests.
    pub fn from_json(text: &str) -> Result<Self, FormatError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(FormatError::Version(ck.version));
        }
        if ck.kind != "checkpoint" {
            return Err(FormatError::Kind {
                expected: "checkpoint".into(),
                found: ck.kind,
            });
        }
        let mismatch = |name: &str| FormatError::Tensor {
            name: name.into(),
            message: "content does not match the recorded digest".into(),
        };
        if ck.prompts()?.digest() != ck.prompts_digest {
            return Err(mismatch("prompts"));
        }
        if ck.modulator()?.digest() != ck.modulator_digest {
            return Err(mismatch("modulator"));
        }
        ck.encoder()?;
        Ok(ck)
    }

    /// Fails when the dataset's input widths differ from the encoder's.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<EncoderWeights, RunError> {
        let weights = self.encoder()?;
        let dims = weights.dims();
        if dims.d_x != dataset.spec.d_x {
            return Err(ModelError::Dimension {
                what: "image features (checkpoint d_x vs dataset d_x)",
                expected: dims.d_x,
                found: dataset.spec.d_x,
            }
            .into());
        }
        if dims.d_c != dataset.spec.d_c {
            return Err(ModelError::Dimension {
                what: "class codes (checkpoint d_c vs dataset d_c)",
                expected: dims.d_c,
                found: dataset.spec.d_c,
            }
            .into());
        }
        Ok(weights)
    }
}
