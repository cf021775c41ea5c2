use crate::autodiff::{Bindings, Graph, NodeId, Values};
use crate::encoder::{
    graph_image_embeddings, graph_soft_cross_entropy, graph_text_embeddings, ClassSet, EncoderWeights, PromptSet,
    ReferencePrompt,
};
use crate::error::{GraphError, ModelError, TrainError};
use crate::regularizer::{graph_modulation, graph_regularizer, ModulatorNodes, ModulatorParams};
use crate::tensor::Tensor;

use super::config::{MetaGradientMode, ModulatorInputs, TrainConfig};
use super::episode::{Episode, LabeledBatch, MixupPlan};

/// Everything frozen during training: encoders, the training label space and
/// the reference prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenModel {
    pub weights: EncoderWeights,
    pub classes: ClassSet,
    pub reference: ReferencePrompt,
    pub tau: f64,
}

impl FrozenModel {
    pub fn new(weights: EncoderWeights, classes: ClassSet, tau: f64) -> Self {
        let reference = ReferencePrompt::zeros(weights.dims().d_p);
        Self {
            weights,
            classes,
            reference,
            tau,
        }
    }

    pub fn d_p(&self) -> usize {
        self.weights.dims().d_p
    }

    pub fn prompt_len(&self) -> usize {
        2 * self.d_p()
    }

    pub fn with_classes(&self, classes: ClassSet) -> Self {
        Self {
            classes,
            ..self.clone()
        }
    }
}

/// The flattened prompt input and its two halves.
#[derive(Clone, Copy, Debug)]
pub struct PromptNodes {
    pub theta: NodeId,
    pub vis: NodeId,
    pub txt: NodeId,
}

fn selection(total: usize, offset: usize, width: usize) -> Tensor {
    let mut s = Tensor::zeros(total, width);
    for k in 0..width {
        s.data_mut()[(offset + k) * width + k] = 1.0;
    }
    s
}

/// Splits a `[1, 2·d_p]` node into its visual and textual halves.
pub fn split_prompt(g: &mut Graph, flat: NodeId, d_p: usize) -> Result<(NodeId, NodeId), GraphError> {
    let sv = g.constant(selection(2 * d_p, 0, d_p))?;
    let st = g.constant(selection(2 * d_p, d_p, d_p))?;
    Ok((g.matmul(flat, sv)?, g.matmul(flat, st)?))
}

pub fn prompt_inputs(g: &mut Graph, d_p: usize) -> Result<PromptNodes, GraphError> {
    let theta = g.input("theta", [1, 2 * d_p])?;
    let (vis, txt) = split_prompt(g, theta, d_p)?;
    Ok(PromptNodes { theta, vis, txt })
}

/// Mean cross-entropy of `batch` over the model's full label space.
pub fn loss_node(
    g: &mut Graph,
    vis: NodeId,
    txt: NodeId,
    batch: &LabeledBatch,
    model: &FrozenModel,
) -> Result<NodeId, ModelError> {
    let z = graph_image_embeddings(g, vis, &batch.features, &model.weights)?;
    let w = graph_text_embeddings(g, txt, &model.classes, &model.weights)?;
    graph_soft_cross_entropy(g, z, w, &batch.one_hot(model.classes.len()), model.tau)
}

/// Regularizer over the batch's images and the classes present in it.
pub fn reg_node(
    g: &mut Graph,
    vis: NodeId,
    txt: NodeId,
    batch: &LabeledBatch,
    model: &FrozenModel,
) -> Result<NodeId, ModelError> {
    let rows = model.classes.embeddings().select_rows(&batch.classes_present());
    graph_regularizer(g, vis, txt, &batch.features, &rows, &model.weights, &model.reference)
}

fn bind_theta(b: &mut Bindings, node: NodeId, theta: &PromptSet) {
    b.insert(node, Tensor::row(theta.flatten()));
}

/// Single gradient step `Θ − lr·∇_Θ(L + λR)` on `batch`; `λ = 0` skips the
/// regularizer entirely. Returns the new prompts, `L` and (if used) `R`.
pub fn gradient_step(
    theta: &PromptSet,
    batch: &LabeledBatch,
    model: &FrozenModel,
    lr: f64,
    lambda: Option<f64>,
) -> Result<(PromptSet, f64, Option<f64>), TrainError> {
    let d_p = model.d_p();
    let mut g = Graph::new();
    let p = prompt_inputs(&mut g, d_p)?;
    let loss = loss_node(&mut g, p.vis, p.txt, batch, model)?;
    let (objective, reg) = match lambda {
        Some(l) => {
            let r = reg_node(&mut g, p.vis, p.txt, batch, model)?;
            let scaled = g.scale(r, l)?;
            (g.add(loss, scaled)?, Some(r))
        }
        None => (loss, None),
    };
    let grads = g.gradient(objective, &[p.theta])?;
    let gn = grads.get(p.theta).expect("requested");
    let mut b = Bindings::new();
    bind_theta(&mut b, p.theta, theta);
    let mut targets = vec![loss, gn];
    targets.extend(reg);
    let v = g.evaluate(&b, &targets)?;
    let next = Tensor::row(theta.flatten()).axpy(lr, v.get(gn));
    Ok((
        PromptSet::from_flat(d_p, next.data())?,
        v.scalar(loss),
        reg.map(|r| v.scalar(r)),
    ))
}

/// `Θ ← Θ − lr_conv·∇_Θ L(Θ; batch)`.
pub fn conventional_step(
    theta: &PromptSet,
    batch: &LabeledBatch,
    model: &FrozenModel,
    lr_conv: f64,
) -> Result<PromptSet, TrainError> {
    Ok(gradient_step(theta, batch, model, lr_conv, None)?.0)
}

/// How the gate on `g_reg` is produced.
#[derive(Clone, Debug, PartialEq)]
pub enum GateMode {
    Learned,
    Fixed(f64),
    /// One constant per prompt coordinate.
    PerCoordinate(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerOptions {
    pub alpha: f64,
    pub use_regularizer: bool,
    pub gate: GateMode,
    pub mode: MetaGradientMode,
    pub inputs: ModulatorInputs,
}

impl InnerOptions {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            alpha: config.alpha,
            use_regularizer: true,
            gate: config.gate_override.map_or(GateMode::Learned, GateMode::Fixed),
            mode: config.meta_gradient_mode,
            inputs: config.modulator_inputs,
        }
    }
}

/// Nodes of one inner adaptation `Θ̂ = Θ − α(g + σ(m)⊙g_reg)`.
#[derive(Clone, Debug)]
pub struct InnerNodes {
    pub prompts: PromptNodes,
    pub phi: ModulatorNodes,
    pub loss: NodeId,
    pub reg: Option<NodeId>,
    pub g: NodeId,
    pub g_reg: Option<NodeId>,
    pub gate: Option<NodeId>,
    pub modulated: Option<NodeId>,
    pub theta_hat: NodeId,
}

/// Appends the inner step on `d_tr` to `graph`.
pub fn build_inner(
    graph: &mut Graph,
    d_tr: &LabeledBatch,
    model: &FrozenModel,
    hidden: usize,
    opts: &InnerOptions,
) -> Result<InnerNodes, TrainError> {
    let d_p = model.d_p();
    let p = prompt_inputs(graph, d_p)?;
    let phi = ModulatorNodes::inputs(graph, 2 * d_p, hidden)?;
    let loss = loss_node(graph, p.vis, p.txt, d_tr, model)?;
    let g = graph.gradient(loss, &[p.theta])?.get(p.theta).expect("requested");
    let g_step = match opts.mode {
        MetaGradientMode::Exact => g,
        MetaGradientMode::FirstOrder => graph.detach(g)?,
    };
    let (reg, g_reg, gate, modulated, step) = if opts.use_regularizer {
        let reg = reg_node(graph, p.vis, p.txt, d_tr, model)?;
        let g_reg = graph.gradient(reg, &[p.theta])?.get(p.theta).expect("requested");
        let gate = match &opts.gate {
            GateMode::Learned => {
                let (gi, ri) = match opts.inputs {
                    ModulatorInputs::Detached => (graph.detach(g)?, graph.detach(g_reg)?),
                    ModulatorInputs::Differentiable => (g, g_reg),
                };
                let m = graph_modulation(graph, &phi, gi, ri)?;
                graph.sigmoid(m)?
            }
            GateMode::Fixed(v) => graph.constant(Tensor::full(1, 2 * d_p, *v))?,
            GateMode::PerCoordinate(v) => {
                if v.len() != 2 * d_p {
                    return Err(ModelError::Dimension {
                        what: "per-coordinate gate",
                        expected: 2 * d_p,
                        found: v.len(),
                    }
                    .into());
                }
                graph.constant(Tensor::row(v.clone()))?
            }
        };
        let r_step = match opts.mode {
            MetaGradientMode::Exact => g_reg,
            MetaGradientMode::FirstOrder => graph.detach(g_reg)?,
        };
        let modulated = graph.hadamard(gate, r_step)?;
        let step = graph.add(g_step, modulated)?;
        (Some(reg), Some(g_reg), Some(gate), Some(modulated), step)
    } else {
        (None, None, None, None, g_step)
    };
    let scaled = graph.scale(step, opts.alpha)?;
    let theta_hat = graph.sub(p.theta, scaled)?;
    Ok(InnerNodes {
        prompts: p,
        phi,
        loss,
        reg,
        g,
        g_reg,
        gate,
        modulated,
        theta_hat,
    })
}

/// `Θ̂` for the given parameters, evaluated.
pub fn inner_adapt(
    theta: &PromptSet,
    phi: &ModulatorParams,
    d_tr: &LabeledBatch,
    model: &FrozenModel,
    opts: &InnerOptions,
) -> Result<PromptSet, TrainError> {
    let mut graph = Graph::new();
    let nodes = build_inner(&mut graph, d_tr, model, phi.hidden(), opts)?;
    let mut b = Bindings::new();
    bind_theta(&mut b, nodes.prompts.theta, theta);
    nodes.phi.bind(&mut b, phi);
    let v = graph.evaluate(&b, &[nodes.theta_hat])?;
    Ok(PromptSet::from_flat(model.d_p(), v.get(nodes.theta_hat).data())?)
}

/// The full one-step meta objective `L(Θ̂; Aug(D_val))` for a fixed episode
/// and mixup draw, with its gradients with respect to `Θ` and `φ`.
pub struct MetaObjective {
    pub graph: Graph,
    pub inner: InnerNodes,
    pub outer: NodeId,
    pub grad_theta: NodeId,
    pub grad_phi: [NodeId; 4],
    d_p: usize,
    hidden: usize,
}

#[derive(Clone, Debug)]
pub struct MetaEvaluation {
    pub outer_loss: f64,
    pub inner_loss: f64,
    pub reg: f64,
    pub grad_theta: Vec<f64>,
    /// Flattened in [`ModulatorParams::flatten`] order.
    pub grad_phi: Vec<f64>,
    pub gate: Vec<f64>,
    pub g: Vec<f64>,
    pub g_reg: Vec<f64>,
}

impl MetaObjective {
    pub fn build(
        batch: &LabeledBatch,
        episode: &Episode,
        plan: &MixupPlan,
        model: &FrozenModel,
        hidden: usize,
        opts: &InnerOptions,
    ) -> Result<Self, TrainError> {
        let d_p = model.d_p();
        let d_tr = episode.train(batch);
        let mut graph = Graph::new();
        let inner = build_inner(&mut graph, &d_tr, model, hidden, opts)?;
        let (vis_hat, txt_hat) = split_prompt(&mut graph, inner.theta_hat, d_p)?;
        let val_rows = batch.features.select_rows(&episode.val_idx);
        let partner_rows = batch.features.select_rows(&plan.partners);
        let h_val = graph_image_embeddings(&mut graph, vis_hat, &val_rows, &model.weights)?;
        let h_tr = graph_image_embeddings(&mut graph, vis_hat, &partner_rows, &model.weights)?;
        let (rho, one_minus) = plan.rho_column();
        let rho = graph.constant(rho)?;
        let one_minus = graph.constant(one_minus)?;
        let a = graph.hadamard(h_val, rho)?;
        let b = graph.hadamard(h_tr, one_minus)?;
        let mixed = graph.add(a, b)?;
        let w_hat = graph_text_embeddings(&mut graph, txt_hat, &model.classes, &model.weights)?;
        let targets = plan.soft_labels(batch, episode, model.classes.len());
        let outer = graph_soft_cross_entropy(&mut graph, mixed, w_hat, &targets, model.tau)?;
        let mut wrt = vec![inner.prompts.theta];
        wrt.extend(inner.phi.all());
        let grads = graph.gradient(outer, &wrt)?;
        let gn = grads.nodes();
        Ok(Self {
            graph,
            grad_theta: gn[0],
            grad_phi: [gn[1], gn[2], gn[3], gn[4]],
            inner,
            outer,
            d_p,
            hidden,
        })
    }

    fn bindings(&self, theta: &[f64], phi: &ModulatorParams) -> Bindings {
        let mut b = Bindings::new();
        b.insert(self.inner.prompts.theta, Tensor::row(theta.to_vec()));
        self.inner.phi.bind(&mut b, phi);
        b
    }

    /// Outer loss only (ancestors of the loss node).
    pub fn loss(&self, theta: &[f64], phi: &ModulatorParams) -> Result<f64, GraphError> {
        let v = self.graph.evaluate(&self.bindings(theta, phi), &[self.outer])?;
        Ok(v.scalar(self.outer))
    }

    pub fn loss_flat(&self, flat_theta_phi: &[f64]) -> Result<f64, TrainError> {
        let p = 2 * self.d_p;
        let phi = ModulatorParams::from_flat(p, self.hidden, &flat_theta_phi[p..])?;
        Ok(self.loss(&flat_theta_phi[..p], &phi)?)
    }

    pub fn evaluate(&self, theta: &[f64], phi: &ModulatorParams) -> Result<MetaEvaluation, GraphError> {
        let mut targets = vec![self.outer, self.inner.loss, self.grad_theta, self.inner.g];
        targets.extend(self.grad_phi);
        targets.extend(self.inner.reg);
        targets.extend(self.inner.g_reg);
        targets.extend(self.inner.gate);
        let v: Values = self.graph.evaluate(&self.bindings(theta, phi), &targets)?;
        let data = |n: Option<NodeId>| n.map(|n| v.get(n).data().to_vec()).unwrap_or_default();
        Ok(MetaEvaluation {
            outer_loss: v.scalar(self.outer),
            inner_loss: v.scalar(self.inner.loss),
            reg: self.inner.reg.map_or(0.0, |r| v.scalar(r)),
            grad_theta: v.get(self.grad_theta).data().to_vec(),
            grad_phi: self.grad_phi.iter().flat_map(|n| v.get(*n).data().to_vec()).collect(),
            gate: data(self.inner.gate),
            g: v.get(self.inner.g).data().to_vec(),
            g_reg: data(self.inner.g_reg),
        })
    }
}

/// Result of one outer meta-update.
#[derive(Clone, Debug)]
pub struct OuterStep {
    pub theta: PromptSet,
    pub phi: ModulatorParams,
    pub eval: MetaEvaluation,
}

/// `Θ ← Θ − β·∇_Θ L(Θ̂; Aug(D_val))`, `φ ← φ − β·∇_φ L(Θ̂; Aug(D_val))`, both
/// through the same mixup draw.
pub fn outer_update_with_plan(
    theta: &PromptSet,
    phi: &ModulatorParams,
    batch: &LabeledBatch,
    episode: &Episode,
    plan: &MixupPlan,
    model: &FrozenModel,
    config: &TrainConfig,
    step: usize,
) -> Result<OuterStep, TrainError> {
    let opts = InnerOptions::from_config(config);
    let objective = MetaObjective::build(batch, episode, plan, model, phi.hidden(), &opts)?;
    let flat = theta.flatten();
    let eval = objective.evaluate(&flat, phi).map_err(|e| TrainError::NonFiniteOuterLoss {
        step,
        diagnostic: format!(
            "{e}; |theta| = {:.6e}, |phi| = {:.6e}, episode train/val sizes {}/{}, rho = {:?}",
            Tensor::row(flat.clone()).norm(),
            Tensor::row(phi.flatten()).norm(),
            episode.train_idx.len(),
            episode.val_idx.len(),
            plan.rho
        ),
    })?;
    let theta_next = Tensor::row(flat).axpy(config.beta, &Tensor::row(eval.grad_theta.clone()));
    let phi_next = Tensor::row(phi.flatten()).axpy(config.beta, &Tensor::row(eval.grad_phi.clone()));
    Ok(OuterStep {
        theta: PromptSet::from_flat(model.d_p(), theta_next.data())?,
        phi: ModulatorParams::from_flat(phi.prompt_len(), phi.hidden(), phi_next.data())?,
        eval,
    })
}

/// Draws the mixup plan from `rng` and applies [`outer_update_with_plan`].
pub fn outer_update(
    theta: &PromptSet,
    phi: &ModulatorParams,
    batch: &LabeledBatch,
    episode: &Episode,
    model: &FrozenModel,
    config: &TrainConfig,
    rng: &mut impl rand::Rng,
) -> Result<OuterStep, TrainError> {
    let plan = super::episode::draw_mixup(episode, config.mu, config.nu, rng)?;
    outer_update_with_plan(theta, phi, batch, episode, &plan, model, config, 0)
}
