//! Embedding-anchoring regularizer and the learnable gradient modulator.
//!
//! The regularizer measures how far prompted embeddings drift from the
//! reference-prompt embeddings (an L1 distance, made smooth at zero). The
//! modulator is a small two-layer network reading `[g ‖ g_reg]` and emitting
//! one logit per prompt coordinate; its sigmoid gates `g_reg`.
//!
//! Flattened prompt-gradient layout is [`crate::encoder::PromptSet::flatten`]:
//! `θ_vis` then `θ_txt`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{self, sigmoid, smooth_abs, Graph, NodeId};
use crate::encoder::{
    graph_image_embeddings, graph_reference_images, graph_reference_texts, graph_text_rows, image_embeddings,
    text_embeddings, ClassSet, EncoderWeights, PromptSet, ReferencePrompt,
};
use crate::error::{FormatError, ModelError};
use crate::params::{digest_values, ParamDoc};
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 32;

/// `φ`: `m = W2 · tanh(W1 · u + b1) + b2` with `u = [g ‖ g_reg]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulatorParams {
    /// `[H, 2P]`
    pub w1: Tensor,
    /// `[1, H]`
    pub b1: Tensor,
    /// `[P, H]`
    pub w2: Tensor,
    /// `[1, P]`
    pub b2: Tensor,
}

impl ModulatorParams {
    pub fn zeros(prompt_len: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(hidden, 2 * prompt_len),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(prompt_len, hidden),
            b2: Tensor::zeros(1, prompt_len),
        }
    }

    pub fn random(rng: &mut impl Rng, prompt_len: usize, hidden: usize, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut draw = |r: usize, c: usize| Tensor::matrix(r, c, (0..r * c).map(|_| normal.sample(rng)).collect());
        let w1 = draw(hidden, 2 * prompt_len);
        let b1 = draw(1, hidden);
        let w2 = draw(prompt_len, hidden);
        let b2 = draw(1, prompt_len);
        Self { w1, b1, w2, b2 }
    }

    pub fn prompt_len(&self) -> usize {
        self.w2.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// `w1, b1, w2, b2`, each row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn from_flat(prompt_len: usize, hidden: usize, flat: &[f64]) -> Result<Self, ModelError> {
        let mut out = Self::zeros(prompt_len, hidden);
        if flat.len() != out.param_count() {
            return Err(ModelError::Dimension {
                what: "flattened modulator length",
                expected: out.param_count(),
                found: flat.len(),
            });
        }
        let mut offset = 0;
        for t in [&mut out.w1, &mut out.b1, &mut out.w2, &mut out.b2] {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    pub fn digest(&self) -> String {
        digest_values(self.tensors().map(|t| t.data()))
    }

    pub(crate) fn put_into(&self, doc: &mut ParamDoc) {
        doc.put_tensor("phi_w1", &self.w1);
        doc.put_tensor("phi_b1", &self.b1);
        doc.put_tensor("phi_w2", &self.w2);
        doc.put_tensor("phi_b2", &self.b2);
    }

    pub(crate) fn take_from(doc: &ParamDoc) -> Result<Self, FormatError> {
        let out = Self {
            w1: doc.get_tensor("phi_w1")?,
            b1: doc.get_tensor("phi_b1")?,
            w2: doc.get_tensor("phi_w2")?,
            b2: doc.get_tensor("phi_b2")?,
        };
        let (h, p) = (out.w1.rows(), out.w2.rows());
        let ok = out.w1.cols() == 2 * p && out.b1.shape() == [1, h] && out.w2.cols() == h && out.b2.shape() == [1, p];
        if !ok {
            return Err(FormatError::Tensor {
                name: "phi".into(),
                message: format!(
                    "inconsistent modulator shapes w1 {:?} b1 {:?} w2 {:?} b2 {:?}",
                    out.w1.shape(),
                    out.b1.shape(),
                    out.w2.shape(),
                    out.b2.shape()
                ),
            });
        }
        Ok(out)
    }

    pub fn to_doc(&self) -> ParamDoc {
        let mut doc = ParamDoc::new("modulator");
        self.put_into(&mut doc);
        doc
    }

    pub fn from_doc(doc: &ParamDoc) -> Result<Self, FormatError> {
        doc.expect_kind("modulator")?;
        Self::take_from(doc)
    }
}

/// Loss and regularizer gradients with respect to the flattened prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair {
    pub g: Vec<f64>,
    pub g_reg: Vec<f64>,
}

impl GradientPair {
    pub fn new(g: Vec<f64>, g_reg: Vec<f64>) -> Result<Self, ModelError> {
        if g.len() != g_reg.len() {
            return Err(ModelError::Dimension {
                what: "regularizer gradient length",
                expected: g.len(),
                found: g_reg.len(),
            });
        }
        if g.iter().chain(&g_reg).any(|v| !v.is_finite()) {
            return Err(ModelError::Dimension {
                what: "finite gradient entries",
                expected: 0,
                found: 1,
            });
        }
        Ok(Self { g, g_reg })
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut u = self.g.clone();
        u.extend_from_slice(&self.g_reg);
        u
    }
}

/// `R = Σ_i |z̃_i − z_i|₁ + Σ_j |w̃_j − w_j|₁` (smooth absolute value), over the
/// rows of `features` and every class in `classes`.
pub fn regularizer(
    prompts: &PromptSet,
    features: &Tensor,
    weights: &EncoderWeights,
    classes: &ClassSet,
    reference: &ReferencePrompt,
) -> Result<f64, ModelError> {
    if features.rows() == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let drift = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| smooth_abs(x - y)).sum::<f64>();
    let z = image_embeddings(features, &prompts.theta_vis, weights)?;
    let z_ref = image_embeddings(features, &reference.ref_vis, weights)?;
    let w = text_embeddings(classes, &prompts.theta_txt, weights)?;
    let w_ref = text_embeddings(classes, &reference.ref_txt, weights)?;
    Ok(drift(&z, &z_ref) + drift(&w, &w_ref))
}

pub fn modulation_vector(pair: &GradientPair, phi: &ModulatorParams) -> Result<Vec<f64>, ModelError> {
    let p = phi.prompt_len();
    if pair.g.len() != p {
        return Err(ModelError::Dimension {
            what: "gradient length for modulator",
            expected: p,
            found: pair.g.len(),
        });
    }
    let u = Tensor::row(pair.concat());
    let mut hidden = autodiff::matmul(&u, &phi.w1, false, true);
    for (h, b) in hidden.data_mut().iter_mut().zip(phi.b1.data()) {
        *h = (*h + b).tanh();
    }
    let mut m = autodiff::matmul(&hidden, &phi.w2, false, true);
    for (v, b) in m.data_mut().iter_mut().zip(phi.b2.data()) {
        *v += b;
    }
    Ok(m.into_data())
}

/// `σ(m) ⊙ g_reg`.
pub fn modulate(g_reg: &[f64], m: &[f64]) -> Result<Vec<f64>, ModelError> {
    if g_reg.len() != m.len() {
        return Err(ModelError::Dimension {
            what: "modulation vector length",
            expected: g_reg.len(),
            found: m.len(),
        });
    }
    Ok(g_reg.iter().zip(m).map(|(g, m)| sigmoid(*m) * g).collect())
}

/// Regularizer as a graph node. `vis`/`txt` are `[1, d_p]` prompt nodes;
/// `class_rows` are the embeddings `c_y` of the classes whose text drift is
/// penalised.
pub fn graph_regularizer(
    g: &mut Graph,
    vis: NodeId,
    txt: NodeId,
    features: &Tensor,
    class_rows: &Tensor,
    weights: &EncoderWeights,
    reference: &ReferencePrompt,
) -> Result<NodeId, ModelError> {
    let z = graph_image_embeddings(g, vis, features, weights)?;
    let w = graph_text_rows(g, txt, class_rows, weights)?;
    graph_regularizer_from(g, z, w, features, class_rows, weights, reference)
}

/// As [`graph_regularizer`] but reusing already-built prompted embeddings.
pub fn graph_regularizer_from(
    g: &mut Graph,
    image: NodeId,
    text: NodeId,
    features: &Tensor,
    class_rows: &Tensor,
    weights: &EncoderWeights,
    reference: &ReferencePrompt,
) -> Result<NodeId, ModelError> {
    let z_ref = graph_reference_images(g, features, weights, reference)?;
    let w_ref = graph_reference_texts(g, class_rows, weights, reference)?;
    let dz = g.sub(image, z_ref)?;
    let dw = g.sub(text, w_ref)?;
    let az = g.smooth_abs(dz)?;
    let aw = g.smooth_abs(dw)?;
    let rz = g.sum(az)?;
    let rw = g.sum(aw)?;
    Ok(g.add(rz, rw)?)
}

/// Graph inputs holding `φ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModulatorNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl ModulatorNodes {
    pub fn inputs(g: &mut Graph, prompt_len: usize, hidden: usize) -> Result<Self, ModelError> {
        Ok(Self {
            w1: g.input("phi_w1", [hidden, 2 * prompt_len])?,
            b1: g.input("phi_b1", [1, hidden])?,
            w2: g.input("phi_w2", [prompt_len, hidden])?,
            b2: g.input("phi_b2", [1, prompt_len])?,
        })
    }

    pub fn all(&self) -> [NodeId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn bind(&self, bindings: &mut autodiff::Bindings, phi: &ModulatorParams) {
        bindings.insert(self.w1, phi.w1.clone());
        bindings.insert(self.b1, phi.b1.clone());
        bindings.insert(self.w2, phi.w2.clone());
        bindings.insert(self.b2, phi.b2.clone());
    }
}

/// `m` as a `[1, P]` node from `[1, P]` gradient nodes. Inputs are used as
/// given; callers detach them when required.
pub fn graph_modulation(
    g: &mut Graph,
    phi: &ModulatorNodes,
    grad: NodeId,
    grad_reg: NodeId,
) -> Result<NodeId, ModelError> {
    let u = g.concat(&[grad, grad_reg], 1)?;
    let pre = g.matmul_t(u, phi.w1, false, true)?;
    let pre = g.add(pre, phi.b1)?;
    let hidden = g.tanh(pre)?;
    let out = g.matmul_t(hidden, phi.w2, false, true)?;
    Ok(g.add(out, phi.b2)?)
}
