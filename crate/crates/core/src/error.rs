use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: zero-norm vector")]
    ZeroNorm { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable is not recorded on this graph")]
    NotOnTape,
    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("species {0} has no genus/family mapping")]
    MissingHierarchy(usize),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("unknown species id {0}")]
    UnknownSpecies(usize),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("invalid bundle: {0}")]
    Invalid(String),
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dim { what: &'static str, expected: usize, got: usize },
    #[error("no visual center for class {class} at level {level}")]
    MissingCenter { level: &'static str, class: usize },
}

#[derive(Debug, Error)]
pub enum NfgError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("stability thresholds require kappa1 > kappa2 (got {kappa1} <= {kappa2})")]
    Thresholds { kappa1: f64, kappa2: f64 },
    #[error("no class with semantics to sample parents from")]
    EmptyDataset,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nfg(#[from] NfgError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite {what} at loop {outer_loop}")]
    NonFinite { what: &'static str, outer_loop: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("no prototypes")]
    NoPrototypes,
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("curve needs at least two points, got {0}")]
    ShortCurve(usize),
    #[error("unknown class id {0}")]
    UnknownClass(usize),
    #[error("empty retrieval pool")]
    EmptyPool,
    #[error("n_syn must be at least 1")]
    NoSamples,
}
