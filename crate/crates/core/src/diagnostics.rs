//! Checks run against a trained checkpoint: finite-difference gradient
//! checks of the meta objective, the Taylor halving test and alignment terms.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{compare_gradients, fd_gradient};
use crate::encoder::{image_embeddings, text_embeddings, PromptSet};
use crate::error::{ModelError, TrainError};
use crate::metrics::{alignment_scaling, alignment_terms, taylor_scaling, AlignmentDiagnostics, HalvingTest};
use crate::regularizer::ModulatorParams;
use crate::rng::SeedStreams;
use crate::trainer::{
    draw_mixup, split_episode, Episode, FrozenModel, GateMode, InnerOptions, LabeledBatch, MetaGradientMode,
    MetaObjective, MixupPlan, ModulatorInputs, TrainConfig,
};

pub const SCALING_BAND: (f64, f64) = (3.5, 4.5);

/// Coordinates whose extrapolated difference is below this are compared
/// absolutely.
pub const EXTRAPOLATED_FLOOR: f64 = 1e-5;

/// Which finite-difference estimate decides a gradient check.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Oracle {
    /// Central differences at `h`.
    #[default]
    Central,
    /// One Richardson step on central differences at `h` and `h/2`.
    Extrapolated,
}

impl std::str::FromStr for Oracle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "central" => Ok(Oracle::Central),
            "extrapolated" => Ok(Oracle::Extrapolated),
            _ => Err(format!("unknown oracle `{s}` (expected central or extrapolated)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseOptions {
    pub seed: u64,
    pub batch_size: usize,
    /// Inner step size; the checkpoint's value when absent.
    pub alpha: Option<f64>,
    /// Forces the gate to a constant.
    pub gate: Option<f64>,
    pub h: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub oracle: Oracle,
    /// Std of the Gaussian noise added to the modulator before a gradient
    /// check. A freshly trained modulator is mostly zero, which leaves its
    /// first-layer gradients identically zero.
    pub phi_jitter: f64,
    /// Std of the noise added to the prompts before a gradient check. Near a
    /// fresh initialization the prompted and reference embeddings nearly
    /// coincide, putting the regularizer at its kinks (see
    /// [`GradcheckReport::kink_margin`]).
    pub theta_jitter: f64,
    pub directions: usize,
    pub episodes: usize,
    pub taylor_alpha: f64,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            alpha: None,
            gate: None,
            h: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            oracle: Oracle::Central,
            phi_jitter: 0.1,
            theta_jitter: 0.5,
            directions: 20,
            episodes: 20,
            taylor_alpha: 1e-2,
        }
    }
}

impl DiagnoseOptions {
    fn inner(&self, config: &TrainConfig) -> InnerOptions {
        let mut opts = InnerOptions::from_config(config);
        if let Some(alpha) = self.alpha {
            opts.alpha = alpha;
        }
        if let Some(gate) = self.gate {
            opts.gate = GateMode::Fixed(gate);
        }
        opts
    }
}

/// Human-readable name of a coordinate of `[Θ ‖ φ]`.
pub fn coordinate_name(d_p: usize, hidden: usize, idx: usize) -> String {
    let p = 2 * d_p;
    if idx < d_p {
        return format!("theta_vis[{idx}]");
    }
    if idx < p {
        return format!("theta_txt[{}]", idx - d_p);
    }
    let mut k = idx - p;
    for (name, rows, cols) in [("w1", hidden, 2 * p), ("b1", 1, hidden), ("w2", p, hidden), ("b2", 1, p)] {
        if k < rows * cols {
            return format!("phi.{name}[{}, {}]", k / cols, k % cols);
        }
        k -= rows * cols;
    }
    format!("out of range [{idx}]")
}

/// One mini-batch from the training data with its episode and mixup draw.
pub struct Probe {
    pub batch: LabeledBatch,
    pub episode: Episode,
    pub plan: MixupPlan,
}

pub fn draw_probe(data: &LabeledBatch, config: &TrainConfig, opts: &DiagnoseOptions) -> Result<Probe, TrainError> {
    let streams = SeedStreams::new(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut streams.stream("diagnose/batch"));
    order.truncate(opts.batch_size.max(2));
    let batch = data.subset(&order);
    let episode = split_episode(&batch.labels, &mut streams.stream("diagnose/split"))?;
    let plan = draw_mixup(&episode, config.mu, config.nu, &mut streams.stream("diagnose/mixup"))?;
    Ok(Probe { batch, episode, plan })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
    pub worst_coordinate: Option<String>,
    /// Against the extrapolated oracle, floor [`EXTRAPOLATED_FLOOR`].
    pub extrapolated_max_rel_err: f64,
    pub extrapolated_max_abs_err_small: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub oracle: Oracle,
    pub outer_loss: f64,
    /// Smallest `|prompted − reference|` embedding coordinate entering the
    /// inner regularizer. Within a few multiples of `h` of zero, the
    /// smooth absolute value bends on the scale of the step and central
    /// differences stop being a reliable oracle.
    pub kink_margin: f64,
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
}

impl GradcheckReport {
    /// The failing entry with the largest relative error.
    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries
            .iter()
            .filter(|e| !e.passed)
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn objective(probe: &Probe, model: &FrozenModel, hidden: usize, opts: &InnerOptions) -> Result<MetaObjective, TrainError> {
    MetaObjective::build(&probe.batch, &probe.episode, &probe.plan, model, hidden, opts)
}

/// Exact-mode meta-gradients against finite differences of the outer loss.
///
/// With differentiable modulator inputs every coordinate is compared with
/// the true loss. With detached inputs the `φ` block is compared with the
/// true loss and the `Θ` block with the loss whose gate is frozen at its
/// current value, which is the function the detached gradient differentiates.
pub fn gradcheck(
    theta: &PromptSet,
    phi: &ModulatorParams,
    probe: &Probe,
    model: &FrozenModel,
    base: &InnerOptions,
    opts: &DiagnoseOptions,
) -> Result<GradcheckReport, TrainError> {
    let d_p = model.d_p();
    let p = 2 * d_p;
    let hidden = phi.hidden();
    let point: Vec<f64> = theta.flatten().into_iter().chain(phi.flatten()).collect();
    // (central at h, extrapolated from h and h/2)
    let fd = |obj: &MetaObjective| -> Result<(Vec<f64>, Vec<f64>), TrainError> {
        let at = |h| fd_gradient(|x| obj.loss_flat(x), &point, h).map_err(|e| TrainError::Config(e.to_string()));
        let coarse = at(opts.h)?;
        let fine = at(opts.h / 2.0)?;
        let extrapolated = coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect();
        Ok((coarse, extrapolated))
    };
    let entry = |name: &str, analytic: &[f64], numeric: &(Vec<f64>, Vec<f64>), range: std::ops::Range<usize>| {
        let central = compare_gradients(analytic, &numeric.0[range.clone()], opts.abs_floor);
        let extrapolated = compare_gradients(analytic, &numeric.1[range.clone()], EXTRAPOLATED_FLOOR);
        let decisive = match opts.oracle {
            Oracle::Central => central,
            Oracle::Extrapolated => extrapolated,
        };
        GradcheckEntry {
            name: name.into(),
            coordinates: analytic.len(),
            max_rel_err: decisive.max_rel_err,
            max_abs_err_small: decisive.max_abs_err_small,
            worst_coordinate: decisive.worst_coord.map(|i| coordinate_name(d_p, hidden, i + range.start)),
            extrapolated_max_rel_err: extrapolated.max_rel_err,
            extrapolated_max_abs_err_small: extrapolated.max_abs_err_small,
            passed: decisive.passes(opts.rel_tol, opts.abs_floor),
        }
    };
    let n = point.len();
    let exact = |inputs| InnerOptions {
        mode: MetaGradientMode::Exact,
        inputs,
        ..base.clone()
    };

    let mut entries = Vec::new();
    let diff = objective(probe, model, hidden, &exact(ModulatorInputs::Differentiable))?;
    let eval = diff.evaluate(&point[..p], phi)?;
    let analytic: Vec<f64> = eval.grad_theta.iter().chain(&eval.grad_phi).copied().collect();
    let numeric = fd(&diff)?;
    entries.push(entry("differentiable inputs: theta and phi", &analytic, &numeric, 0..n));

    let det = objective(probe, model, hidden, &exact(ModulatorInputs::Detached))?;
    let det_eval = det.evaluate(&point[..p], phi)?;
    entries.push(entry("detached inputs: phi", &det_eval.grad_phi, &numeric, p..n));
    let frozen_gate = match (&base.gate, base.use_regularizer) {
        (GateMode::Learned, true) => GateMode::PerCoordinate(det_eval.gate.clone()),
        (g, _) => g.clone(),
    };
    let frozen = objective(
        probe,
        model,
        hidden,
        &InnerOptions {
            gate: frozen_gate,
            ..exact(ModulatorInputs::Detached)
        },
    )?;
    let frozen_fd = fd(&frozen)?;
    entries.push(entry("detached inputs: theta at a frozen gate", &det_eval.grad_theta, &frozen_fd, 0..p));

    Ok(GradcheckReport {
        kink_margin: kink_margin(theta, &probe.episode.train(&probe.batch), model)?,
        h: opts.h,
        rel_tol: opts.rel_tol,
        abs_floor: opts.abs_floor,
        oracle: opts.oracle,
        outer_loss: eval.outer_loss,
        passed: entries.iter().all(|e| e.passed),
        entries,
    })
}

/// Smallest absolute embedding drift over the regularizer's terms on `d_tr`.
pub fn kink_margin(theta: &PromptSet, d_tr: &LabeledBatch, model: &FrozenModel) -> Result<f64, ModelError> {
    let ids: Vec<usize> = d_tr.classes_present().iter().map(|&p| model.classes.ids()[p]).collect();
    let classes = model.classes.subset(&ids)?;
    let reference = &model.reference;
    let z = image_embeddings(&d_tr.features, &theta.theta_vis, &model.weights)?;
    let z_ref = image_embeddings(&d_tr.features, &reference.ref_vis, &model.weights)?;
    let w = text_embeddings(&classes, &theta.theta_txt, &model.weights)?;
    let w_ref = text_embeddings(&classes, &reference.ref_txt, &model.weights)?;
    let drift = |a: &crate::Tensor, b: &crate::Tensor| {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(f64::INFINITY, f64::min)
    };
    Ok(drift(&z, &z_ref).min(drift(&w, &w_ref)))
}

fn add_noise(values: Vec<f64>, std: f64, seed: u64, stream: &str) -> Vec<f64> {
    if std == 0.0 {
        return values;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = SeedStreams::new(seed).stream(stream);
    values.into_iter().map(|v| v + normal.sample(&mut rng)).collect()
}

/// Adds `N(0, std²)` noise to every modulator weight.
pub fn jitter(phi: &ModulatorParams, std: f64, seed: u64) -> ModulatorParams {
    let flat = add_noise(phi.flatten(), std, seed, "diagnose/jitter");
    ModulatorParams::from_flat(phi.prompt_len(), phi.hidden(), &flat).expect("same shape")
}

pub fn jitter_prompts(theta: &PromptSet, std: f64, seed: u64) -> PromptSet {
    let flat = add_noise(theta.flatten(), std, seed, "diagnose/theta-jitter");
    PromptSet::from_flat(theta.d_p(), &flat).expect("same shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub loss_gap: HalvingTest,
    pub alignment: HalvingTest,
    pub band: (f64, f64),
    pub passed: bool,
}

/// Halving tests at `taylor_alpha` and half of it: the first-order gap of the
/// training loss along random unit directions, and the residual of the
/// alignment prediction of the one-step validation loss over fresh episodes.
pub fn taylor(
    theta: &PromptSet,
    phi: &ModulatorParams,
    data: &LabeledBatch,
    model: &FrozenModel,
    config: &TrainConfig,
    opts: &DiagnoseOptions,
) -> Result<TaylorReport, TrainError> {
    let streams = SeedStreams::new(opts.seed);
    let loss_gap = taylor_scaling(
        theta,
        data,
        model,
        opts.taylor_alpha,
        opts.directions,
        &mut streams.stream("diagnose/directions"),
    )?;
    let episodes = (0..opts.episodes)
        .map(|k| {
            let probe = draw_probe(
                data,
                config,
                &DiagnoseOptions {
                    seed: opts.seed.wrapping_add(k as u64),
                    ..opts.clone()
                },
            )?;
            Ok((probe.episode.train(&probe.batch), probe.episode.val(&probe.batch)))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let inner = InnerOptions {
        alpha: opts.taylor_alpha,
        ..opts.inner(config)
    };
    let alignment = alignment_scaling(theta, phi, &episodes, model, &inner)?;
    let within = |t: &HalvingTest| (SCALING_BAND.0..=SCALING_BAND.1).contains(&t.mean_ratio);
    Ok(TaylorReport {
        passed: within(&loss_gap) && within(&alignment),
        loss_gap,
        alignment,
        band: SCALING_BAND,
    })
}

/// Alignment terms over one fresh episode.
pub fn alignment(
    theta: &PromptSet,
    phi: &ModulatorParams,
    data: &LabeledBatch,
    model: &FrozenModel,
    config: &TrainConfig,
    opts: &DiagnoseOptions,
) -> Result<AlignmentDiagnostics, TrainError> {
    let probe = draw_probe(data, config, opts)?;
    alignment_terms(
        theta,
        phi,
        &probe.episode.train(&probe.batch),
        &probe.episode.val(&probe.batch),
        model,
        &opts.inner(config),
    )
}

/// Gradient check near a checkpoint: draws the probe and jitters `Θ` and `φ`.
pub fn gradcheck_at(
    theta: &PromptSet,
    phi: &ModulatorParams,
    data: &LabeledBatch,
    model: &FrozenModel,
    config: &TrainConfig,
    opts: &DiagnoseOptions,
) -> Result<GradcheckReport, TrainError> {
    let probe = draw_probe(data, config, opts)?;
    let phi = jitter(phi, opts.phi_jitter, opts.seed);
    let theta = jitter_prompts(theta, opts.theta_jitter, opts.seed);
    gradcheck(&theta, &phi, &probe, model, &opts.inner(config), opts)
}
