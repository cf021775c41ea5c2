//! Prompt training: the plain and fixed-λ baselines and the one-step
//! meta-regularized procedure with episodic splits and mixup augmentation.

mod config;
mod episode;
mod meta;
mod train;

pub use config::{MetaGradientMode, ModulatorInputs, Regime, TrainConfig, DEFAULT_LAMBDA};
pub use episode::{
    augment_with_plan, draw_mixup, split_episode, task_augment, valid_distribution, AugmentedSample, Episode,
    LabeledBatch, MixupPlan,
};
pub use meta::{
    build_inner, conventional_step, gradient_step, inner_adapt, loss_node, outer_update, outer_update_with_plan,
    prompt_inputs, reg_node, split_prompt, FrozenModel, GateMode, InnerNodes, InnerOptions, MetaEvaluation,
    MetaObjective, OuterStep, PromptNodes,
};
pub use train::{train, train_from, TrainLog, TrainOutcome, TrainRecord};
