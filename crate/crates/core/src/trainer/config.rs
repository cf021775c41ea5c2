use serde::{Deserialize, Serialize};

use crate::encoder::DEFAULT_TAU;
use crate::error::TrainError;
use crate::regularizer::DEFAULT_HIDDEN;

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "loss-reg", alias = "loss-plus-reg")]
    LossPlusReg,
    #[serde(rename = "prometar")]
    Prometar,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Plain, Regime::LossPlusReg, Regime::Prometar];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Plain => "plain",
            Regime::LossPlusReg => "loss-reg",
            Regime::Prometar => "prometar",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(Regime::Plain),
            "loss-reg" | "loss-plus-reg" => Ok(Regime::LossPlusReg),
            "prometar" => Ok(Regime::Prometar),
            _ => Err(format!("unknown regime `{s}` (expected plain, loss-reg or prometar)")),
        }
    }
}

/// How the inner step's dependence on `Θ` through `g` and `g_reg` is treated
/// when differentiating the outer loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaGradientMode {
    #[default]
    Exact,
    FirstOrder,
}

/// Whether the modulator sees `g`, `g_reg` behind a detach boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModulatorInputs {
    #[default]
    Detached,
    Differentiable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Inner step size.
    pub alpha: f64,
    /// Outer step size.
    pub beta: f64,
    /// Step size of the conventional pre-step and of the baselines.
    pub lr_conv: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Mixup `Beta(mu, nu)` parameters.
    pub mu: f64,
    pub nu: f64,
    /// Fixed regularization strength; loss-reg only (defaults to 0.1 there).
    pub lambda: Option<f64>,
    pub meta_gradient_mode: MetaGradientMode,
    pub modulator_inputs: ModulatorInputs,
    pub hidden: usize,
    pub prompt_init_std: f64,
    pub tau: f64,
    /// Replaces `σ(m)` by a constant gate; prometar only, for diagnostics.
    pub gate_override: Option<f64>,
    /// Alignment diagnostics are logged every this many steps (0 = never).
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Prometar,
            alpha: 0.0025,
            beta: 0.0025,
            lr_conv: 0.0025,
            epochs: 15,
            batch_size: 16,
            mu: 1.0,
            nu: 1.0,
            lambda: None,
            meta_gradient_mode: MetaGradientMode::Exact,
            modulator_inputs: ModulatorInputs::Detached,
            hidden: DEFAULT_HIDDEN,
            prompt_init_std: 0.02,
            tau: DEFAULT_TAU,
            gate_override: None,
            log_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_regime(regime: Regime) -> Self {
        Self {
            regime,
            ..Self::default()
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        match self.regime {
            Regime::LossPlusReg => self.lambda.unwrap_or(DEFAULT_LAMBDA),
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lr_conv", self.lr_conv)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("mu", self.mu), ("nu", self.nu), ("tau", self.tau)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if !(self.prompt_init_std.is_finite() && self.prompt_init_std >= 0.0) {
            return bad(format!("prompt_init_std must be >= 0, got {}", self.prompt_init_std));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden must be >= 1".into());
        }
        match (self.regime, self.lambda) {
            (Regime::LossPlusReg, Some(l)) if !(l.is_finite() && l >= 0.0) => {
                return bad(format!("lambda must be finite and >= 0, got {l}"));
            }
            (Regime::LossPlusReg, _) | (_, None) => {}
            (r, Some(_)) => return bad(format!("lambda is only meaningful for loss-reg, not {r}")),
        }
        if let Some(gate) = self.gate_override {
            if self.regime != Regime::Prometar {
                return bad(format!("gate_override is only meaningful for prometar, not {}", self.regime));
            }
            if !(0.0..=1.0).contains(&gate) {
                return bad(format!("gate_override must lie in [0, 1], got {gate}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_conflicts_are_rejected() {
        let mut c = TrainConfig::for_regime(Regime::Plain);
        c.lambda = Some(0.1);
        assert!(c.validate().is_err());
        let mut c = TrainConfig::for_regime(Regime::LossPlusReg);
        c.gate_override = Some(0.0);
        assert!(c.validate().is_err());
        let mut c = TrainConfig::for_regime(Regime::Prometar);
        c.mu = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"alpha": 0.1, "alhpa": 2}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"regime": "loss-reg", "lambda": 0.0}"#).unwrap();
        assert_eq!(c.regime, Regime::LossPlusReg);
        assert_eq!(c.effective_lambda(), 0.0);
    }
}
