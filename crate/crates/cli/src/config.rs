//! The run configuration file and its command-line overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use mrp_core::diagnostics::DiagnoseOptions;
use mrp_core::experiment::ModelConfig;
use mrp_core::tasks::{ShiftDescriptor, TaskSpec};
use mrp_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Domain shifts applied to the test splits in addition to the
    /// unshifted evaluation.
    pub shifts: Vec<ShiftDescriptor>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub eval: EvalOptions,
    pub diagnose: DiagnoseOptions,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        self.task.validate().map_err(Failure::usage)?;
        self.train.validate().map_err(Failure::usage)?;
        self.model.validate().map_err(Failure::usage)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Reads a JSON document, reporting parse errors with their location.
pub fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// Builds the effective config: defaults, then the file, then each override
/// section merged key by key. Unknown keys and ill-typed values are usage
/// errors.
pub fn load(path: Option<&Path>, overrides: &[(&str, Value)]) -> Result<RunConfig, Failure> {
    let mut value = match path {
        Some(p) => read_json(p)?,
        None => Value::Object(Default::default()),
    };
    let origin = path.map_or("command line".to_owned(), |p| p.display().to_string());
    let Value::Object(root) = &mut value else {
        return Err(Failure::usage(format!("{origin}: config must be a JSON object")));
    };
    for (section, fields) in overrides {
        let Value::Object(fields) = fields else { continue };
        if fields.is_empty() {
            continue;
        }
        if section.is_empty() {
            root.extend(fields.clone());
            continue;
        }
        let entry = root.entry(section.to_string()).or_insert_with(|| Value::Object(Default::default()));
        let Value::Object(target) = entry else {
            return Err(Failure::usage(format!("{origin}: `{section}` must be a JSON object")));
        };
        target.extend(fields.clone());
    }
    let config: RunConfig = serde_json::from_value(value).map_err(|e| Failure::usage(format!("{origin}: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn overrides<T: Serialize>(section: &'static str, flags: &T) -> (&'static str, Value) {
    (section, serde_json::to_value(flags).expect("flags serialize"))
}

/// `task` keys.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct TaskFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_x: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_c: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prototype_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_detail: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_offset: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_ratio: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_separation: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_fraction: Option<f64>,
    /// Shift baked into the generated test splits.
    #[arg(long = "shift")]
    #[serde(rename = "shift", skip_serializing_if = "Option::is_none")]
    pub task_shift: Option<String>,
}

/// `train` keys other than `regime` and `seed`.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_conv: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// exact or first-order
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta_gradient_mode: Option<String>,
    /// detached or differentiable
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modulator_inputs: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_init_std: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_override: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_every: Option<usize>,
}

/// `model` keys.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct ModelFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_p: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_e: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_mismatch: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_gain: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_std: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_seed: Option<u64>,
}

/// `diagnose` keys.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct DiagnoseFlags {
    /// Seed of the probe batch, episode and jitter.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Forces the gate to a constant in [0, 1].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_floor: Option<f64>,
    /// central or extrapolated
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_jitter: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_jitter: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taylor_alpha: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_merge_into_sections() {
        let flags = TrainFlags {
            alpha: Some(0.5),
            ..TrainFlags::default()
        };
        let c = load(None, &[overrides("train", &flags), ("train", json!({"regime": "plain"}))]).unwrap();
        assert_eq!(c.train.alpha, 0.5);
        assert_eq!(c.train.beta, TrainConfig::default().beta);
        assert_eq!(c.train.regime.as_str(), "plain");
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let bad = |v: Value| load(None, &[("train", v)]).unwrap_err().code();
        assert_eq!(bad(json!({"alhpa": 1.0})), 2);
        assert_eq!(bad(json!({"meta_gradient_mode": "second-order"})), 2);
        assert_eq!(bad(json!({"regime": "plain", "lambda": 0.1})), 2);
    }

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
