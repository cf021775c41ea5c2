use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} has a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("ragged rows: expected {expected} columns, found {found}")]
    RaggedRows { expected: usize, found: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node}: input `{name}` is not bound")]
    UnboundInput { node: usize, name: String },
    #[error("node {node}: input `{name}` expects shape {expected:?}, bound value has {found:?}")]
    BindingShape {
        node: usize,
        name: String,
        expected: [usize; 2],
        found: Vec<usize>,
    },
    #[error("node {node}: gradient output must be scalar, got shape {shape:?}")]
    NonScalarOutput { node: usize, shape: [usize; 2] },
    #[error("node {node} ({op}): produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("node {node}: cosine similarity of a zero-norm row")]
    ZeroNorm { node: usize },
    #[error("unknown node {0}")]
    UnknownNode(usize),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("unknown class {class} (have {count} classes)")]
    UnknownClass { class: usize, count: usize },
    #[error("cosine similarity undefined for a zero-norm {what} vector")]
    ZeroNorm { what: &'static str },
    #[error("invalid label distribution for sample {sample}: {reason}")]
    InvalidLabel { sample: usize, reason: String },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("class embeddings are not pairwise distinct (min distance {0:e})")]
    DegenerateClasses(f64),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("could not draw separated prototypes after {attempts} attempts (min distance {min_distance}); try a larger feature dimension")]
    Separation { attempts: usize, min_distance: f64 },
    #[error("invalid domain shift descriptor `{0}` (expected none, noise:<sigma> or rotate:<radians>)")]
    ShiftDescriptor(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("episode split needs at least 2 classes in the batch, found {0}")]
    SingleClassBatch(usize),
    #[error("episode train subset is empty")]
    EmptyTrainSubset,
    #[error("non-finite outer loss at step {step}: {diagnostic}")]
    NonFiniteOuterLoss { step: usize, diagnostic: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("harmonic mean needs positive accuracies, got ({0}, {1})")]
    NonPositive(f64, f64),
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("evaluation label {0} is not among the candidate classes")]
    UnknownClass(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("unsupported document version {0}")]
    Version(u64),
    #[error("document kind `{found}`, expected `{expected}`")]
    Kind { expected: String, found: String },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}`: {message}")]
    Tensor { name: String, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
