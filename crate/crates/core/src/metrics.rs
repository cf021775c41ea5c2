//! Accuracy, harmonic mean, task-overfitting score and the first-order
//! diagnostics of the one-step meta objective.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph};
use crate::encoder::{image_embeddings, predict_probs, text_embeddings, ClassSet, EncoderWeights, PromptSet, ReferencePrompt};
use crate::error::{MetricsError, TrainError};
use crate::regularizer::ModulatorParams;
use crate::tasks::{Dataset, Split};
use crate::tensor::Tensor;
use crate::trainer::{build_inner, loss_node, prompt_inputs, split_prompt, FrozenModel, InnerOptions, LabeledBatch};

/// Top-1 accuracy in percent. `labels` are dataset-wide class ids, which must
/// all belong to `classes`.
pub fn accuracy(
    prompts: &PromptSet,
    weights: &EncoderWeights,
    classes: &ClassSet,
    features: &Tensor,
    labels: &[usize],
    tau: f64,
) -> Result<f64, MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let targets = labels
        .iter()
        .map(|&id| classes.position(id).ok_or(MetricsError::UnknownClass(id)))
        .collect::<Result<Vec<_>, _>>()?;
    let text = text_embeddings(classes, &prompts.theta_txt, weights)?;
    let z = image_embeddings(features, &prompts.theta_vis, weights)?;
    let mut hits = 0usize;
    for (i, &y) in targets.iter().enumerate() {
        let p = predict_probs(z.row_slice(i), &text, tau)?;
        let pred = argmax(&p);
        hits += (pred == y) as usize;
    }
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn harmonic_mean(base: f64, new: f64) -> Result<f64, MetricsError> {
    if !(base > 0.0 && new > 0.0) {
        return Err(MetricsError::NonPositive(base, new));
    }
    Ok(2.0 * base * new / (base + new))
}

/// Harmonic mean with the limit value 0 when either accuracy is 0.
pub fn harmonic_mean_or_zero(base: f64, new: f64) -> f64 {
    harmonic_mean(base, new).unwrap_or(0.0)
}

/// `max(0, base_pr − base_ref) − (new_pr − new_ref)`. Only the base-class
/// gain is clamped.
pub fn task_overfitting_score(base_pr: f64, new_pr: f64, base_ref: f64, new_ref: f64) -> f64 {
    (base_pr - base_ref).max(0.0) - (new_pr - new_ref)
}

/// `|L(Θ − α·d) − [L(Θ) − α·⟨∇L(Θ), d⟩]|` from already-evaluated pieces.
pub fn taylor_residual(loss: f64, grad: &[f64], d: &[f64], alpha: f64, stepped_loss: f64) -> f64 {
    let slope: f64 = grad.iter().zip(d).map(|(g, d)| g * d).sum();
    (stepped_loss - (loss - alpha * slope)).abs()
}

/// Contrastive loss and its gradient with respect to the flattened prompts.
pub fn loss_and_gradient(
    theta: &[f64],
    batch: &LabeledBatch,
    model: &FrozenModel,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut g = Graph::new();
    let p = prompt_inputs(&mut g, model.d_p())?;
    let loss = loss_node(&mut g, p.vis, p.txt, batch, model)?;
    let grad = g.gradient(loss, &[p.theta])?.get(p.theta).expect("requested");
    let mut b = Bindings::new();
    b.insert(p.theta, Tensor::row(theta.to_vec()));
    let v = g.evaluate(&b, &[loss, grad])?;
    Ok((v.scalar(loss), v.get(grad).data().to_vec()))
}

pub fn taylor_gap(
    theta: &PromptSet,
    direction: &[f64],
    alpha: f64,
    batch: &LabeledBatch,
    model: &FrozenModel,
) -> Result<f64, TrainError> {
    let flat = theta.flatten();
    let (loss, grad) = loss_and_gradient(&flat, batch, model)?;
    let stepped: Vec<f64> = flat.iter().zip(direction).map(|(t, d)| t - alpha * d).collect();
    let (stepped_loss, _) = loss_and_gradient(&stepped, batch, model)?;
    Ok(taylor_residual(loss, &grad, direction, alpha, stepped_loss))
}

/// Residual ratios `r(α) / r(α/2)` of a halving test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalvingTest {
    pub alpha: f64,
    pub residuals: Vec<[f64; 2]>,
    pub ratios: Vec<f64>,
    pub mean_ratio: f64,
}

impl HalvingTest {
    pub fn from_residuals(alpha: f64, residuals: Vec<[f64; 2]>) -> Self {
        let ratios: Vec<f64> = residuals.iter().map(|[a, b]| a / b).collect();
        let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
        Self {
            alpha,
            residuals,
            ratios,
            mean_ratio,
        }
    }
}

pub fn unit_direction(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Taylor halving test over `n_dirs` random unit directions at `alpha` and
/// `alpha / 2`.
pub fn taylor_scaling(
    theta: &PromptSet,
    batch: &LabeledBatch,
    model: &FrozenModel,
    alpha: f64,
    n_dirs: usize,
    rng: &mut impl Rng,
) -> Result<HalvingTest, TrainError> {
    let mut residuals = Vec::with_capacity(n_dirs);
    for _ in 0..n_dirs {
        let d = unit_direction(rng, 2 * theta.d_p());
        residuals.push([
            taylor_gap(theta, &d, alpha, batch, model)?,
            taylor_gap(theta, &d, alpha / 2.0, batch, model)?,
        ]);
    }
    Ok(HalvingTest::from_residuals(alpha, residuals))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDiagnostics {
    /// `L(Θ; D_val)`
    pub term_val_loss: f64,
    /// `⟨∇_Θ L(Θ; D_val), g⟩`
    pub term_g_align: f64,
    /// `⟨∇_Θ L(Θ; D_val), σ(m)⊙g_reg⟩`
    pub term_reg_align: f64,
    pub alpha: f64,
    /// `L(Θ̂; D_val)` after the one-step inner update.
    pub one_step_loss: f64,
    /// `L(Θ; D_val) − α·(term_g_align + term_reg_align)`
    pub predicted_loss: f64,
    pub taylor_residual: f64,
    pub grad_val_norm: f64,
    pub g_reg_norm: f64,
}

/// The three-term first-order decomposition of the one-step outer loss on
/// the un-augmented validation subset.
pub fn alignment_terms(
    theta: &PromptSet,
    phi: &ModulatorParams,
    d_tr: &LabeledBatch,
    d_val: &LabeledBatch,
    model: &FrozenModel,
    opts: &InnerOptions,
) -> Result<AlignmentDiagnostics, TrainError> {
    let mut g = Graph::new();
    let inner = build_inner(&mut g, d_tr, model, phi.hidden(), opts)?;
    let p = inner.prompts;
    let val_loss = loss_node(&mut g, p.vis, p.txt, d_val, model)?;
    let grad_val = g.gradient(val_loss, &[p.theta])?.get(p.theta).expect("requested");
    let (vis_hat, txt_hat) = split_prompt(&mut g, inner.theta_hat, model.d_p())?;
    let stepped = loss_node(&mut g, vis_hat, txt_hat, d_val, model)?;
    let mut b = Bindings::new();
    b.insert(p.theta, Tensor::row(theta.flatten()));
    inner.phi.bind(&mut b, phi);
    let mut targets = vec![val_loss, grad_val, inner.g, stepped];
    targets.extend(inner.modulated);
    targets.extend(inner.g_reg);
    let v = g.evaluate(&b, &targets)?;
    let gv = v.get(grad_val);
    let term_g_align = gv.dot(v.get(inner.g));
    let term_reg_align = inner.modulated.map_or(0.0, |m| gv.dot(v.get(m)));
    let term_val_loss = v.scalar(val_loss);
    let predicted_loss = term_val_loss - opts.alpha * (term_g_align + term_reg_align);
    let one_step_loss = v.scalar(stepped);
    Ok(AlignmentDiagnostics {
        term_val_loss,
        term_g_align,
        term_reg_align,
        alpha: opts.alpha,
        one_step_loss,
        predicted_loss,
        taylor_residual: (one_step_loss - predicted_loss).abs(),
        grad_val_norm: gv.norm(),
        g_reg_norm: inner.g_reg.map_or(0.0, |r| v.get(r).norm()),
    })
}

/// Halving test of the alignment prediction residual, one pair of subsets per
/// entry of `episodes`.
pub fn alignment_scaling(
    theta: &PromptSet,
    phi: &ModulatorParams,
    episodes: &[(LabeledBatch, LabeledBatch)],
    model: &FrozenModel,
    opts: &InnerOptions,
) -> Result<HalvingTest, TrainError> {
    let at = |alpha: f64, d_tr: &LabeledBatch, d_val: &LabeledBatch| {
        let o = InnerOptions { alpha, ..opts.clone() };
        alignment_terms(theta, phi, d_tr, d_val, model, &o).map(|d| d.taylor_residual)
    };
    let residuals = episodes
        .iter()
        .map(|(d_tr, d_val)| Ok([at(opts.alpha, d_tr, d_val)?, at(opts.alpha / 2.0, d_tr, d_val)?]))
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(HalvingTest::from_residuals(opts.alpha, residuals))
}

/// One evaluated (regime, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub regime: String,
    pub seed: u64,
    pub shift: String,
    pub base_acc: f64,
    pub new_acc: f64,
    pub hm: f64,
    pub ref_base_acc: f64,
    pub ref_new_acc: f64,
    pub tos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub regime: String,
    pub shift: String,
    pub runs: usize,
    pub base_acc_mean: f64,
    pub base_acc_std: f64,
    pub new_acc_mean: f64,
    pub new_acc_std: f64,
    /// Harmonic mean of the two mean accuracies.
    pub hm_of_means: f64,
    pub hm_std: f64,
    pub tos_mean: f64,
    pub tos_std: f64,
}

pub const REFERENCE_NOTE: &str = "reference model = frozen encoders with zero (reference) prompts";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub reference: String,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Sample mean and standard deviation (`n − 1`; 0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const CSV_HEADER: [&str; 9] = [
    "regime",
    "seed",
    "shift",
    "base_acc",
    "new_acc",
    "hm",
    "ref_base_acc",
    "ref_new_acc",
    "tos",
];

impl MetricsReport {
    /// Rows sorted by (regime, seed, shift) with per-regime aggregates.
    pub fn from_rows(mut rows: Vec<RunRow>) -> Self {
        rows.sort_by(|a, b| {
            (a.regime.as_str(), a.seed, a.shift.as_str()).cmp(&(b.regime.as_str(), b.seed, b.shift.as_str()))
        });
        let mut groups: BTreeMap<(&str, &str), Vec<&RunRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry((r.regime.as_str(), r.shift.as_str())).or_default().push(r);
        }
        let aggregates = groups
            .into_iter()
            .map(|((regime, shift), rs)| {
                let col = |f: fn(&RunRow) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
                let (bm, bs) = col(|r| r.base_acc);
                let (nm, ns) = col(|r| r.new_acc);
                let (_, hs) = col(|r| r.hm);
                let (tm, ts) = col(|r| r.tos);
                Aggregate {
                    regime: regime.to_owned(),
                    shift: shift.to_owned(),
                    runs: rs.len(),
                    base_acc_mean: bm,
                    base_acc_std: bs,
                    new_acc_mean: nm,
                    new_acc_std: ns,
                    hm_of_means: harmonic_mean_or_zero(bm, nm),
                    hm_std: hs,
                    tos_mean: tm,
                    tos_std: ts,
                }
            })
            .collect();
        Self {
            version: 1,
            reference: REFERENCE_NOTE.to_owned(),
            rows,
            aggregates,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// One row per run.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record(row_fields(r)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Run rows followed by a `mean` and a `std` row per regime.
    pub fn to_summary_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record(row_fields(r)).expect("in-memory write");
        }
        for a in &self.aggregates {
            let ref_rows: Vec<&RunRow> = self.rows.iter().filter(|r| r.regime == a.regime && r.shift == a.shift).collect();
            let (rb, rbs) = mean_std(&ref_rows.iter().map(|r| r.ref_base_acc).collect::<Vec<_>>());
            let (rn, rns) = mean_std(&ref_rows.iter().map(|r| r.ref_new_acc).collect::<Vec<_>>());
            let f = |v: f64| format!("{v:.4}");
            w.write_record([
                a.regime.clone(),
                "mean".into(),
                a.shift.clone(),
                f(a.base_acc_mean),
                f(a.new_acc_mean),
                f(a.hm_of_means),
                f(rb),
                f(rn),
                f(a.tos_mean),
            ])
            .expect("in-memory write");
            w.write_record([
                a.regime.clone(),
                "std".into(),
                a.shift.clone(),
                f(a.base_acc_std),
                f(a.new_acc_std),
                f(a.hm_std),
                f(rbs),
                f(rns),
                f(a.tos_std),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

fn row_fields(r: &RunRow) -> [String; 9] {
    let f = |v: f64| format!("{v:.4}");
    [
        r.regime.clone(),
        r.seed.to_string(),
        r.shift.clone(),
        f(r.base_acc),
        f(r.new_acc),
        f(r.hm),
        f(r.ref_base_acc),
        f(r.ref_new_acc),
        f(r.tos),
    ]
}

/// Base accuracy on base-test among base classes and new accuracy on
/// new-test among new classes, for `prompts` and for the reference prompts.
pub fn evaluate_dataset(
    prompts: &PromptSet,
    weights: &EncoderWeights,
    dataset: &Dataset,
    tau: f64,
    regime: &str,
    seed: u64,
) -> Result<RunRow, MetricsError> {
    let reference = ReferencePrompt::zeros(weights.dims().d_p).as_prompts();
    let (bx, by) = dataset.split_arrays(Split::BaseTest);
    let (nx, ny) = dataset.split_arrays(Split::NewTest);
    let base_classes = dataset.base_classes();
    let new_classes = dataset.new_classes();
    let base_acc = accuracy(prompts, weights, &base_classes, &bx, &by, tau)?;
    let new_acc = accuracy(prompts, weights, &new_classes, &nx, &ny, tau)?;
    let ref_base_acc = accuracy(&reference, weights, &base_classes, &bx, &by, tau)?;
    let ref_new_acc = accuracy(&reference, weights, &new_classes, &nx, &ny, tau)?;
    let shift = if dataset.shifts.is_empty() {
        "none".to_owned()
    } else {
        dataset.shifts.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+")
    };
    Ok(RunRow {
        regime: regime.to_owned(),
        seed,
        shift,
        base_acc,
        new_acc,
        hm: harmonic_mean_or_zero(base_acc, new_acc),
        ref_base_acc,
        ref_new_acc,
        tos: task_overfitting_score(base_acc, new_acc, ref_base_acc, ref_new_acc),
    })
}
