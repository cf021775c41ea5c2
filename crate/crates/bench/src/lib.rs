//! Shared fixtures for the criterion benchmarks.

use mrp_core::diagnostics::{draw_probe, DiagnoseOptions, Probe};
use mrp_core::encoder::{EncoderWeights, PromptSet};
use mrp_core::experiment::{base_training, ModelConfig};
use mrp_core::regularizer::ModulatorParams;
use mrp_core::rng::SeedStreams;
use mrp_core::tasks::{generate, Dataset, TaskSpec};
use mrp_core::trainer::{FrozenModel, LabeledBatch, TrainConfig};

/// The default task and encoder with its base-class training data.
pub struct World {
    pub dataset: Dataset,
    pub weights: EncoderWeights,
    pub model: FrozenModel,
    pub data: LabeledBatch,
}

impl World {
    pub fn default_task() -> Self {
        let dataset = generate(&TaskSpec::default()).expect("default spec is valid");
        let weights = ModelConfig::default().encoder(&dataset);
        let (model, data) = base_training(&dataset, &weights, TrainConfig::default().tau).expect("matching dims");
        Self { dataset, weights, model, data }
    }

    /// One mini-batch with its episode and mixup draw.
    pub fn probe(&self, config: &TrainConfig) -> Probe {
        let opts = DiagnoseOptions {
            batch_size: config.batch_size,
            ..DiagnoseOptions::default()
        };
        draw_probe(&self.data, config, &opts).expect("batch has several classes")
    }

    /// Prompts and modulator weights away from their initial values.
    pub fn point(&self, config: &TrainConfig) -> (PromptSet, ModulatorParams) {
        let streams = SeedStreams::new(7);
        let theta = PromptSet::random(&mut streams.stream("bench/theta"), self.model.d_p(), 0.3);
        let phi = ModulatorParams::random(&mut streams.stream("bench/phi"), self.model.prompt_len(), config.hidden, 0.1);
        (theta, phi)
    }
}
