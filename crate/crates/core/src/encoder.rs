//! Frozen toy dual encoder with learnable prompt vectors.
//!
//! Both encoders are a single frozen affine map followed by `tanh`. The
//! prompt is concatenated in front of the encoder input:
//!
//! ```text
//! z̃ = tanh(W_img · [θ_vis ‖ x]   + b_img)
//! w̃ = tanh(W_txt · [θ_txt ‖ c_y] + b_txt)
//! ```
//!
//! Host-side functions here evaluate the model directly. The `graph_*`
//! builders emit the same computations as differentiable graph nodes for the
//! trainer; there the prompt block of each weight matrix is split off so
//! that the frozen feature part folds into one constant per batch.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_rows, log_softmax_rows, Graph, NodeId};
use crate::error::{FormatError, ModelError};
use crate::params::{digest_values, ParamDoc};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;
use crate::world;

pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_x: usize,
    pub d_c: usize,
    pub d_p: usize,
    pub d_e: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_x: 16,
            d_c: 8,
            d_p: 4,
            d_e: 8,
        }
    }
}

/// How a pretrained encoder pair is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOptions {
    /// Std of the text weights' deviation from perfect alignment with the
    /// world rendering map (per entry, scaled by `1/sqrt(d_c)`).
    pub text_mismatch: f64,
    /// Gain of the prompt columns (entries `N(0, gain²/d_p)`).
    pub prompt_gain: f64,
    /// Std of the shared bias.
    pub bias_std: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            text_mismatch: 0.3,
            prompt_gain: 1.0,
            bias_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    dims: ModelDims,
    /// `[d_e, d_p + d_x]`, prompt columns first.
    img_w: Tensor,
    img_b: Vec<f64>,
    /// `[d_e, d_p + d_c]`, prompt columns first.
    txt_w: Tensor,
    txt_b: Vec<f64>,
}

impl EncoderWeights {
    pub fn from_parts(
        dims: ModelDims,
        img_w: Tensor,
        img_b: Vec<f64>,
        txt_w: Tensor,
        txt_b: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let check = |what, expected, found| {
            if expected == found {
                Ok(())
            } else {
                Err(ModelError::Dimension {
                    what,
                    expected,
                    found,
                })
            }
        };
        if dims.d_e < 2 {
            return Err(ModelError::Dimension {
                what: "embedding dim (>= 2)",
                expected: 2,
                found: dims.d_e,
            });
        }
        check("image weight rows", dims.d_e, img_w.rows())?;
        check("image weight cols", dims.d_p + dims.d_x, img_w.cols())?;
        check("image bias", dims.d_e, img_b.len())?;
        check("text weight rows", dims.d_e, txt_w.rows())?;
        check("text weight cols", dims.d_p + dims.d_c, txt_w.cols())?;
        check("text bias", dims.d_e, txt_b.len())?;
        let finite = img_w.is_finite()
            && txt_w.is_finite()
            && img_b.iter().chain(&txt_b).all(|v| v.is_finite());
        if !finite {
            return Err(ModelError::Dimension {
                what: "finite weights",
                expected: 0,
                found: 1,
            });
        }
        Ok(Self {
            dims,
            img_w,
            img_b,
            txt_w,
            txt_b,
        })
    }

    /// Unstructured weights with i.i.d. `N(0, 1/fan_in)` entries.
    pub fn random(seed: u64, dims: ModelDims) -> Self {
        let mut rng = SeedStreams::new(seed).stream("encoder");
        let img_w = gaussian(&mut rng, dims.d_e, dims.d_p + dims.d_x, 1.0 / ((dims.d_p + dims.d_x) as f64).sqrt());
        let img_b = gaussian(&mut rng, 1, dims.d_e, 0.1).into_data();
        let txt_w = gaussian(&mut rng, dims.d_e, dims.d_p + dims.d_c, 1.0 / ((dims.d_p + dims.d_c) as f64).sqrt());
        let txt_b = gaussian(&mut rng, 1, dims.d_e, 0.1).into_data();
        Self::from_parts(dims, img_w, img_b, txt_w, txt_b).expect("consistent shapes")
    }

    /// Encoders aligned with the world rendering map, so that a class code
    /// `c` and images near its rendered prototype `A·c` land close together
    /// in the joint space.
    pub fn pretrained(seed: u64, dims: ModelDims, opts: &PretrainOptions) -> Self {
        let mut rng = SeedStreams::new(seed).stream("encoder/pretrained");
        let ModelDims { d_x, d_c, d_p, d_e } = dims;
        let feat_w = gaussian(&mut rng, d_e, d_x, 1.0 / (d_x as f64).sqrt());
        let render = world::rendering(d_x, d_c);
        let aligned = crate::autodiff::matmul(&feat_w, &render, false, false);
        let mismatch = gaussian(&mut rng, d_e, d_c, opts.text_mismatch / (d_c as f64).sqrt());
        let img_p = gaussian(&mut rng, d_e, d_p, opts.prompt_gain / (d_p as f64).sqrt());
        let txt_p = gaussian(&mut rng, d_e, d_p, opts.prompt_gain / (d_p as f64).sqrt());
        let bias = gaussian(&mut rng, 1, d_e, opts.bias_std).into_data();

        let mut img_w = Vec::with_capacity(d_e * (d_p + d_x));
        let mut txt_w = Vec::with_capacity(d_e * (d_p + d_c));
        for k in 0..d_e {
            img_w.extend_from_slice(img_p.row_slice(k));
            img_w.extend_from_slice(feat_w.row_slice(k));
            txt_w.extend_from_slice(txt_p.row_slice(k));
            txt_w.extend(aligned.row_slice(k).iter().zip(mismatch.row_slice(k)).map(|(a, m)| a + m));
        }
        Self::from_parts(
            dims,
            Tensor::matrix(d_e, d_p + d_x, img_w),
            bias.clone(),
            Tensor::matrix(d_e, d_p + d_c, txt_w),
            bias,
        )
        .expect("consistent shapes")
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn image_weights(&self) -> (&Tensor, &[f64]) {
        (&self.img_w, &self.img_b)
    }

    pub fn text_weights(&self) -> (&Tensor, &[f64]) {
        (&self.txt_w, &self.txt_b)
    }

    /// Content hash of all weights, used to check the frozen contract.
    pub fn digest(&self) -> String {
        digest_values([self.img_w.data(), &self.img_b, self.txt_w.data(), &self.txt_b])
    }

    pub fn to_doc(&self) -> ParamDoc {
        let mut doc = ParamDoc::new("encoder_weights");
        doc.put_tensor("img_w", &self.img_w);
        doc.put("img_b", &[self.img_b.len()], &self.img_b);
        doc.put_tensor("txt_w", &self.txt_w);
        doc.put("txt_b", &[self.txt_b.len()], &self.txt_b);
        doc.meta.insert("dims".into(), serde_json::to_value(self.dims).expect("dims"));
        doc
    }

    pub fn from_doc(doc: &ParamDoc) -> Result<Self, FormatError> {
        doc.expect_kind("encoder_weights")?;
        let dims: ModelDims = serde_json::from_value(
            doc.meta.get("dims").cloned().ok_or_else(|| FormatError::Missing("meta.dims".into()))?,
        )?;
        let bad = |e: ModelError| FormatError::Tensor {
            name: "encoder_weights".into(),
            message: e.to_string(),
        };
        Self::from_parts(
            dims,
            doc.get_tensor("img_w")?,
            doc.get_vec("img_b", dims.d_e)?,
            doc.get_tensor("txt_w")?,
            doc.get_vec("txt_b", dims.d_e)?,
        )
        .map_err(bad)
    }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// Frozen class embeddings `c_y`, addressed by position `0..len()`; `ids`
/// records each class's dataset-wide id.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSet {
    ids: Vec<usize>,
    embeddings: Tensor,
}

/// Minimum pairwise distance accepted between class embeddings.
pub const MIN_CLASS_SEPARATION: f64 = 1e-3;

impl ClassSet {
    pub fn new(ids: Vec<usize>, embeddings: Tensor) -> Result<Self, ModelError> {
        if ids.len() < 2 {
            return Err(ModelError::TooFewClasses(ids.len()));
        }
        if embeddings.rows() != ids.len() {
            return Err(ModelError::Dimension {
                what: "class embedding rows",
                expected: ids.len(),
                found: embeddings.rows(),
            });
        }
        let min = min_pairwise_distance(&embeddings);
        if min < MIN_CLASS_SEPARATION {
            return Err(ModelError::DegenerateClasses(min));
        }
        Ok(Self { ids, embeddings })
    }

    /// Unit-variance Gaussian embeddings, redrawn until pairwise distinct.
    pub fn random(seed: u64, n: usize, d_c: usize) -> Result<Self, ModelError> {
        let mut rng = SeedStreams::new(seed).stream("classes");
        loop {
            let emb = gaussian(&mut rng, n, d_c, 1.0);
            match Self::new((0..n).collect(), emb) {
                Err(ModelError::DegenerateClasses(_)) => continue,
                other => return other,
            }
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn embedding(&self, pos: usize) -> Result<&[f64], ModelError> {
        if pos >= self.len() {
            return Err(ModelError::UnknownClass {
                class: pos,
                count: self.len(),
            });
        }
        Ok(self.embeddings.row_slice(pos))
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&c| c == id)
    }

    /// Restricts to the given dataset-wide ids, in that order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self, ModelError> {
        let pos = ids
            .iter()
            .map(|&id| {
                self.position(id).ok_or(ModelError::UnknownClass {
                    class: id,
                    count: self.len(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(ids.to_vec(), self.embeddings.select_rows(&pos))
    }

    pub fn digest(&self) -> String {
        let ids: Vec<f64> = self.ids.iter().map(|&i| i as f64).collect();
        digest_values([ids.as_slice(), self.embeddings.data()])
    }
}

fn min_pairwise_distance(t: &Tensor) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..t.rows() {
        for j in i + 1..t.rows() {
            let d: f64 = t
                .row_slice(i)
                .iter()
                .zip(t.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min = min.min(d);
        }
    }
    min
}

/// The learnable prompts `Θ = {θ_vis, θ_txt}`.
///
/// Flattened order everywhere is `θ_vis` followed by `θ_txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub theta_vis: Vec<f64>,
    pub theta_txt: Vec<f64>,
}

impl PromptSet {
    pub fn zeros(d_p: usize) -> Self {
        Self {
            theta_vis: vec![0.0; d_p],
            theta_txt: vec![0.0; d_p],
        }
    }

    /// Entries i.i.d. `N(0, std²)`.
    pub fn random(rng: &mut impl Rng, d_p: usize, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut draw = || (0..d_p).map(|_| normal.sample(rng)).collect::<Vec<_>>();
        let theta_vis = draw();
        let theta_txt = draw();
        Self { theta_vis, theta_txt }
    }

    pub fn d_p(&self) -> usize {
        self.theta_vis.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.theta_vis.clone();
        v.extend_from_slice(&self.theta_txt);
        v
    }

    pub fn from_flat(d_p: usize, flat: &[f64]) -> Result<Self, ModelError> {
        if flat.len() != 2 * d_p {
            return Err(ModelError::Dimension {
                what: "flattened prompt length",
                expected: 2 * d_p,
                found: flat.len(),
            });
        }
        Ok(Self {
            theta_vis: flat[..d_p].to_vec(),
            theta_txt: flat[d_p..].to_vec(),
        })
    }

    pub fn digest(&self) -> String {
        digest_values([self.theta_vis.as_slice(), &self.theta_txt])
    }

    pub fn to_doc(&self) -> ParamDoc {
        let mut doc = ParamDoc::new("prompt_set");
        doc.put("theta_vis", &[self.theta_vis.len()], &self.theta_vis);
        doc.put("theta_txt", &[self.theta_txt.len()], &self.theta_txt);
        doc
    }

    pub fn from_doc(doc: &ParamDoc) -> Result<Self, FormatError> {
        doc.expect_kind("prompt_set")?;
        Self::from_tensors(doc)
    }

    pub(crate) fn from_tensors(doc: &ParamDoc) -> Result<Self, FormatError> {
        let (sv, theta_vis) = doc.get("theta_vis")?;
        let theta_txt = doc.get_vec("theta_txt", sv.iter().product())?;
        if sv.len() != 1 {
            return Err(FormatError::Tensor {
                name: "theta_vis".into(),
                message: format!("expected a vector, found shape {sv:?}"),
            });
        }
        Ok(Self { theta_vis, theta_txt })
    }
}

/// Fixed "hand-crafted" prompts anchoring the regularizer. Zero vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePrompt {
    pub ref_vis: Vec<f64>,
    pub ref_txt: Vec<f64>,
}

impl ReferencePrompt {
    pub fn zeros(d_p: usize) -> Self {
        Self {
            ref_vis: vec![0.0; d_p],
            ref_txt: vec![0.0; d_p],
        }
    }

    pub fn as_prompts(&self) -> PromptSet {
        PromptSet {
            theta_vis: self.ref_vis.clone(),
            theta_txt: self.ref_txt.clone(),
        }
    }
}

/// A training or evaluation target.
#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Hard(usize),
    Soft(Vec<f64>),
}

fn affine_tanh(w: &Tensor, b: &[f64], input: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|k| {
            let pre: f64 = w.row_slice(k).iter().zip(input).map(|(a, x)| a * x).sum::<f64>() + b[k];
            pre.tanh()
        })
        .collect()
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), ModelError> {
    if expected == found {
        Ok(())
    } else {
        Err(ModelError::Dimension {
            what,
            expected,
            found,
        })
    }
}

pub fn encode_image(x: &[f64], prompt: &[f64], weights: &EncoderWeights) -> Result<Vec<f64>, ModelError> {
    let d = weights.dims;
    check_len("image features", d.d_x, x.len())?;
    check_len("visual prompt", d.d_p, prompt.len())?;
    let mut input = prompt.to_vec();
    input.extend_from_slice(x);
    Ok(affine_tanh(&weights.img_w, &weights.img_b, &input))
}

/// `class` is a position in `classes`.
pub fn encode_text(
    class: usize,
    prompt: &[f64],
    weights: &EncoderWeights,
    classes: &ClassSet,
) -> Result<Vec<f64>, ModelError> {
    let d = weights.dims;
    check_len("textual prompt", d.d_p, prompt.len())?;
    let c = classes.embedding(class)?;
    check_len("class embedding", d.d_c, c.len())?;
    let mut input = prompt.to_vec();
    input.extend_from_slice(c);
    Ok(affine_tanh(&weights.txt_w, &weights.txt_b, &input))
}

pub fn reference_image_embedding(
    x: &[f64],
    weights: &EncoderWeights,
    reference: &ReferencePrompt,
) -> Result<Vec<f64>, ModelError> {
    encode_image(x, &reference.ref_vis, weights)
}

pub fn reference_text_embedding(
    class: usize,
    weights: &EncoderWeights,
    classes: &ClassSet,
    reference: &ReferencePrompt,
) -> Result<Vec<f64>, ModelError> {
    encode_text(class, &reference.ref_txt, weights, classes)
}

/// Image embeddings of every row of `features`, as a `[n, d_e]` matrix.
pub fn image_embeddings(features: &Tensor, prompt: &[f64], weights: &EncoderWeights) -> Result<Tensor, ModelError> {
    let rows = (0..features.rows())
        .map(|i| encode_image(features.row_slice(i), prompt, weights))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

/// Text embeddings of every class in `classes`, as a `[N, d_e]` matrix.
pub fn text_embeddings(classes: &ClassSet, prompt: &[f64], weights: &EncoderWeights) -> Result<Tensor, ModelError> {
    let rows = (0..classes.len())
        .map(|c| encode_text(c, prompt, weights, classes))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

/// `softmax_y(sim(z, w_y) / τ)` with cosine similarity.
pub fn predict_probs(z: &[f64], text: &Tensor, tau: f64) -> Result<Vec<f64>, ModelError> {
    if !(tau > 0.0) {
        return Err(ModelError::Temperature(tau));
    }
    let zt = Tensor::row(z.to_vec());
    let sims = cosine_rows(&zt, text).ok_or(ModelError::ZeroNorm {
        what: "image or text embedding",
    })?;
    let logp = log_softmax_rows(&sims.map(|s| s / tau));
    Ok(logp.data().iter().map(|l| l.exp()).collect())
}

/// Validates a label against `n_classes` and returns it as a distribution.
pub fn label_distribution(label: &Label, n_classes: usize, sample: usize) -> Result<Vec<f64>, ModelError> {
    match label {
        Label::Hard(c) => {
            if *c >= n_classes {
                return Err(ModelError::UnknownClass {
                    class: *c,
                    count: n_classes,
                });
            }
            let mut v = vec![0.0; n_classes];
            v[*c] = 1.0;
            Ok(v)
        }
        Label::Soft(p) => {
            if p.len() != n_classes {
                return Err(ModelError::InvalidLabel {
                    sample,
                    reason: format!("length {} for {n_classes} classes", p.len()),
                });
            }
            if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(ModelError::InvalidLabel {
                    sample,
                    reason: "negative or non-finite entry".into(),
                });
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(ModelError::InvalidLabel {
                    sample,
                    reason: format!("entries sum to {total}"),
                });
            }
            Ok(p.clone())
        }
    }
}

/// Mean soft-label cross-entropy of prompted predictions over a batch.
pub fn contrastive_loss(
    batch: &[(Vec<f64>, Label)],
    prompts: &PromptSet,
    weights: &EncoderWeights,
    classes: &ClassSet,
    tau: f64,
) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let text = text_embeddings(classes, &prompts.theta_txt, weights)?;
    let mut total = 0.0;
    for (i, (x, label)) in batch.iter().enumerate() {
        let y = label_distribution(label, classes.len(), i)?;
        let z = encode_image(x, &prompts.theta_vis, weights)?;
        let p = predict_probs(&z, &text, tau)?;
        total -= y
            .iter()
            .zip(&p)
            .filter(|(yc, _)| **yc > 0.0)
            .map(|(yc, pc)| yc * pc.ln())
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// One-hot / soft targets as a `[n, N]` matrix.
pub fn target_matrix(labels: &[Label], n_classes: usize) -> Result<Tensor, ModelError> {
    let rows = labels
        .iter()
        .enumerate()
        .map(|(i, l)| label_distribution(l, n_classes, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

// ---- graph builders --------------------------------------------------------

fn split_columns(w: &Tensor, d_p: usize) -> (Tensor, Tensor) {
    let (rows, cols) = (w.rows(), w.cols());
    let mut prompt = Vec::with_capacity(rows * d_p);
    let mut rest = Vec::with_capacity(rows * (cols - d_p));
    for k in 0..rows {
        let r = w.row_slice(k);
        prompt.extend_from_slice(&r[..d_p]);
        rest.extend_from_slice(&r[d_p..]);
    }
    (Tensor::matrix(rows, d_p, prompt), Tensor::matrix(rows, cols - d_p, rest))
}

/// `rows · Wᵀ + b` for the frozen (non-prompt) part of an encoder.
fn frozen_preactivation(rows: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let mut out = crate::autodiff::matmul(rows, w, false, true);
    let n = b.len();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b[i % n];
    }
    out
}

fn graph_encoder(
    g: &mut Graph,
    prompt: NodeId,
    inputs: &Tensor,
    w: &Tensor,
    b: &[f64],
    d_p: usize,
) -> Result<NodeId, ModelError> {
    let (w_prompt, w_rest) = split_columns(w, d_p);
    check_len("encoder input width", w_rest.cols(), inputs.cols())?;
    let fixed = g.constant(frozen_preactivation(inputs, &w_rest, b))?;
    let wp = g.constant(w_prompt)?;
    let shift = g.matmul_t(prompt, wp, false, true)?;
    let pre = g.add(fixed, shift)?;
    Ok(g.tanh(pre)?)
}

/// Prompted image embeddings `[n, d_e]` of `features` (`[n, d_x]`);
/// `prompt` is a `[1, d_p]` node.
pub fn graph_image_embeddings(
    g: &mut Graph,
    prompt: NodeId,
    features: &Tensor,
    weights: &EncoderWeights,
) -> Result<NodeId, ModelError> {
    graph_encoder(g, prompt, features, &weights.img_w, &weights.img_b, weights.dims.d_p)
}

/// Prompted text embeddings `[N, d_e]` of every class in `classes`.
pub fn graph_text_embeddings(
    g: &mut Graph,
    prompt: NodeId,
    classes: &ClassSet,
    weights: &EncoderWeights,
) -> Result<NodeId, ModelError> {
    graph_text_rows(g, prompt, &classes.embeddings, weights)
}

/// Prompted text embeddings of raw class-embedding rows `[k, d_c]`.
pub fn graph_text_rows(
    g: &mut Graph,
    prompt: NodeId,
    class_rows: &Tensor,
    weights: &EncoderWeights,
) -> Result<NodeId, ModelError> {
    graph_encoder(g, prompt, class_rows, &weights.txt_w, &weights.txt_b, weights.dims.d_p)
}

/// Reference image embeddings, behind a detach boundary.
pub fn graph_reference_images(
    g: &mut Graph,
    features: &Tensor,
    weights: &EncoderWeights,
    reference: &ReferencePrompt,
) -> Result<NodeId, ModelError> {
    let c = g.constant(image_embeddings(features, &reference.ref_vis, weights)?)?;
    Ok(g.detach(c)?)
}

/// Reference text embeddings of raw class-embedding rows, detached.
pub fn graph_reference_texts(
    g: &mut Graph,
    class_rows: &Tensor,
    weights: &EncoderWeights,
    reference: &ReferencePrompt,
) -> Result<NodeId, ModelError> {
    check_len("textual prompt", weights.dims.d_p, reference.ref_txt.len())?;
    let rows = (0..class_rows.rows())
        .map(|j| {
            let mut input = reference.ref_txt.clone();
            input.extend_from_slice(class_rows.row_slice(j));
            affine_tanh(&weights.txt_w, &weights.txt_b, &input)
        })
        .collect::<Vec<_>>();
    let c = g.constant(Tensor::from_rows(&rows)?)?;
    Ok(g.detach(c)?)
}

/// Mean over rows of `-Σ_c y_c log p(c | z)`.
pub fn graph_soft_cross_entropy(
    g: &mut Graph,
    image: NodeId,
    text: NodeId,
    targets: &Tensor,
    tau: f64,
) -> Result<NodeId, ModelError> {
    if !(tau > 0.0) {
        return Err(ModelError::Temperature(tau));
    }
    let sims = g.cosine_similarity(image, text)?;
    let logits = g.scale(sims, 1.0 / tau)?;
    let logp = g.log_softmax(logits)?;
    let y = g.constant(targets.clone())?;
    let picked = g.hadamard(logp, y)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -1.0 / targets.rows() as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Bindings;

    fn small() -> (EncoderWeights, ClassSet) {
        let dims = ModelDims {
            d_x: 5,
            d_c: 3,
            d_p: 2,
            d_e: 4,
        };
        (EncoderWeights::random(3, dims), ClassSet::random(3, 4, 3).unwrap())
    }

    #[test]
    fn reference_prompt_matches_encode() {
        let (w, classes) = small();
        let reference = ReferencePrompt::zeros(2);
        let x = [0.3, -0.2, 1.0, 0.5, -0.7];
        assert_eq!(
            encode_image(&x, &[0.0, 0.0], &w).unwrap(),
            reference_image_embedding(&x, &w, &reference).unwrap()
        );
        assert_eq!(
            encode_text(2, &[0.0, 0.0], &w, &classes).unwrap(),
            reference_text_embedding(2, &w, &classes, &reference).unwrap()
        );
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let dims = ModelDims {
            d_x: 3,
            d_c: 2,
            d_p: 2,
            d_e: 2,
        };
        let w = EncoderWeights::from_parts(
            dims,
            Tensor::zeros(2, 5),
            vec![0.0; 2],
            Tensor::zeros(2, 4),
            vec![0.0; 2],
        )
        .unwrap();
        assert_eq!(encode_image(&[1.0, 2.0, 3.0], &[0.5, 0.5], &w).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_and_class_errors() {
        let (w, classes) = small();
        assert!(matches!(encode_image(&[1.0; 4], &[0.0; 2], &w), Err(ModelError::Dimension { .. })));
        assert!(matches!(encode_image(&[1.0; 5], &[0.0; 3], &w), Err(ModelError::Dimension { .. })));
        assert!(matches!(
            encode_text(4, &[0.0; 2], &w, &classes),
            Err(ModelError::UnknownClass { class: 4, count: 4 })
        ));
    }

    #[test]
    fn predict_probs_examples() {
        let text = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        // z at 45° between the first two classes: equal similarity to them.
        let p = predict_probs(&[1.0, 1.0], &Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]), 0.07).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        // sims (1, 0) at τ = 1
        let p = predict_probs(&[1.0, 0.0], &Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
        // large τ flattens the distribution
        let p = predict_probs(&[0.3, -0.9], &text, 100.0).unwrap();
        let spread = p.iter().cloned().fold(f64::MIN, f64::max) - p.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread <= 0.01);
        assert!(matches!(predict_probs(&[0.0, 0.0], &text, 1.0), Err(ModelError::ZeroNorm { .. })));
        assert!(matches!(predict_probs(&[1.0, 0.0], &text, 0.0), Err(ModelError::Temperature(_))));
    }

    #[test]
    fn label_validation() {
        assert!(label_distribution(&Label::Soft(vec![0.5, 0.6]), 2, 0).is_err());
        assert!(label_distribution(&Label::Soft(vec![1.2, -0.2]), 2, 0).is_err());
        assert!(label_distribution(&Label::Hard(2), 2, 0).is_err());
        assert_eq!(label_distribution(&Label::Soft(vec![0.25, 0.75]), 2, 0).unwrap(), vec![0.25, 0.75]);
    }

    #[test]
    fn graph_loss_matches_host_loss() {
        let (w, classes) = small();
        let prompts = PromptSet {
            theta_vis: vec![0.4, -0.3],
            theta_txt: vec![-0.2, 0.6],
        };
        let feats = Tensor::matrix(3, 5, (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect());
        let labels = vec![Label::Hard(0), Label::Soft(vec![0.1, 0.2, 0.3, 0.4]), Label::Hard(3)];
        let batch: Vec<(Vec<f64>, Label)> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (feats.row_slice(i).to_vec(), l.clone()))
            .collect();
        let host = contrastive_loss(&batch, &prompts, &w, &classes, 0.07).unwrap();

        let mut g = Graph::new();
        let vis = g.input("vis", [1, 2]).unwrap();
        let txt = g.input("txt", [1, 2]).unwrap();
        let z = graph_image_embeddings(&mut g, vis, &feats, &w).unwrap();
        let t = graph_text_embeddings(&mut g, txt, &classes, &w).unwrap();
        let loss = graph_soft_cross_entropy(&mut g, z, t, &target_matrix(&labels, 4).unwrap(), 0.07).unwrap();
        let mut b = Bindings::new();
        b.insert(vis, Tensor::row(prompts.theta_vis.clone()));
        b.insert(txt, Tensor::row(prompts.theta_txt.clone()));
        let v = g.forward(&b).unwrap();
        assert!((v.scalar(loss) - host).abs() < 1e-12, "{} vs {host}", v.scalar(loss));
        let zh = image_embeddings(&feats, &prompts.theta_vis, &w).unwrap();
        for (a, b) in v.get(z).data().iter().zip(zh.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn weights_round_trip() {
        let w = EncoderWeights::pretrained(9, ModelDims::default(), &PretrainOptions::default());
        let back = EncoderWeights::from_doc(&ParamDoc::from_json(&w.to_doc().to_json()).unwrap()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.digest(), w.digest());
    }
}
