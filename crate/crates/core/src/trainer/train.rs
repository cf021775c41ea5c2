use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::PromptSet;
use crate::error::TrainError;
use crate::metrics::alignment_terms;
use crate::regularizer::ModulatorParams;
use crate::rng::SeedStreams;

use super::config::{Regime, TrainConfig};
use super::episode::{draw_mixup, split_episode, LabeledBatch};
use super::meta::{gradient_step, outer_update_with_plan, FrozenModel, InnerOptions};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub regime: Regime,
    pub loss: f64,
    pub reg: Option<f64>,
    pub outer_loss: Option<f64>,
    pub gate_mean: Option<f64>,
    pub gate_min: Option<f64>,
    pub gate_max: Option<f64>,
    pub align_g: Option<f64>,
    pub align_greg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial_prompts: PromptSet,
    pub initial_phi: ModulatorParams,
    pub prompts: PromptSet,
    pub phi: ModulatorParams,
    pub log: TrainLog,
}

/// Trains from the seeded initialization: prompts `N(0, prompt_init_std²)`
/// and a zero modulator.
pub fn train(data: &LabeledBatch, model: &FrozenModel, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let streams = SeedStreams::new(config.seed);
    let init = PromptSet::random(&mut streams.stream("init"), model.d_p(), config.prompt_init_std);
    let phi = ModulatorParams::zeros(model.prompt_len(), config.hidden);
    train_from(data, model, config, init, phi)
}

pub fn train_from(
    data: &LabeledBatch,
    model: &FrozenModel,
    config: &TrainConfig,
    init: PromptSet,
    init_phi: ModulatorParams,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.classes_present().len() < 2 {
        return Err(TrainError::Config("training data needs at least 2 classes".into()));
    }
    if init.d_p() != model.d_p() || init_phi.prompt_len() != model.prompt_len() {
        return Err(TrainError::Config(format!(
            "initial parameters do not match prompt width {}",
            model.d_p()
        )));
    }
    let streams = SeedStreams::new(config.seed);
    let mut batch_rng = streams.stream("batches");
    let mut split_rng = streams.stream("split");
    let mut mixup_rng = streams.stream("mixup");
    let lambda = match config.regime {
        Regime::LossPlusReg => Some(config.effective_lambda()),
        _ => None,
    };
    let inner_opts = InnerOptions::from_config(config);

    let mut theta = init.clone();
    let mut phi = init_phi.clone();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut batch_rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch = data.subset(chunk);
            let (next, loss, reg) = gradient_step(&theta, &batch, model, config.lr_conv, lambda)?;
            theta = next;
            let mut rec = TrainRecord {
                step,
                regime: config.regime,
                loss,
                reg,
                outer_loss: None,
                gate_mean: None,
                gate_min: None,
                gate_max: None,
                align_g: None,
                align_greg: None,
            };
            if config.regime == Regime::Prometar {
                let episode = match split_episode(&batch.labels, &mut split_rng) {
                    Ok(e) => e,
                    Err(TrainError::SingleClassBatch(_)) => {
                        log.records.push(rec);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let plan = draw_mixup(&episode, config.mu, config.nu, &mut mixup_rng)?;
                if config.log_every > 0 && step % config.log_every == 0 {
                    let diag = alignment_terms(
                        &theta,
                        &phi,
                        &episode.train(&batch),
                        &episode.val(&batch),
                        model,
                        &inner_opts,
                    )?;
                    rec.align_g = Some(diag.term_g_align);
                    rec.align_greg = Some(diag.term_reg_align);
                }
                let out = outer_update_with_plan(&theta, &phi, &batch, &episode, &plan, model, config, step)?;
                if !out.eval.outer_loss.is_finite() {
                    return Err(TrainError::NonFiniteOuterLoss {
                        step,
                        diagnostic: format!("outer loss {} with inner loss {}", out.eval.outer_loss, out.eval.inner_loss),
                    });
                }
                let gate = &out.eval.gate;
                rec.reg = Some(out.eval.reg);
                rec.outer_loss = Some(out.eval.outer_loss);
                rec.gate_mean = Some(gate.iter().sum::<f64>() / gate.len() as f64);
                rec.gate_min = gate.iter().copied().reduce(f64::min);
                rec.gate_max = gate.iter().copied().reduce(f64::max);
                theta = out.theta;
                phi = out.phi;
            }
            log.records.push(rec);
        }
    }
    Ok(TrainOutcome {
        initial_prompts: init,
        initial_phi: init_phi,
        prompts: theta,
        phi,
        log,
    })
}
