use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rank {0} exceeds the supported maximum of 3")]
    RankTooHigh(usize),
    #[error("expected rank {expected}, got shape {shape:?}")]
    ExpectedRank { expected: usize, shape: Vec<usize> },
    #[error("expected a single element, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("node {0} is not connected to the loss")]
    Disconnected(usize),
    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("zero attention denominator at position {position}")]
    ZeroDenominator { position: usize },
    #[error("{what}: expected width {expected}, got {got}")]
    Width { what: &'static str, expected: usize, got: usize },
    #[error("{what}: expected {expected} rows, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureMapError {
    #[error("element {elem} outside vocabulary of size {vocab}")]
    OutOfVocab { elem: u32, vocab: usize },
    #[error("roster element {0} repeated")]
    DuplicateRoster(u32),
    #[error("invalid feature map parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("budget {budget} too small for question of length {question} (need at least {needed})")]
    BudgetTooSmall { budget: usize, question: usize, needed: usize },
    #[error("repeat count must be at least 1")]
    ZeroRepeats,
    #[error("answer span {start}..{end} does not fit in the {keep} context tokens kept")]
    SpanDoesNotFit { start: usize, end: usize, keep: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdError {
    #[error("set of size {size} does not fit in half-vocabulary of {half}")]
    SetTooLarge { size: usize, half: usize },
    #[error("set sizes must be at least 1")]
    EmptySet,
    #[error("expected one separator per copy (2 in total), found {found}")]
    MalformedSeparators { found: usize },
    #[error("JRT input must consist of two identical copies")]
    NotRepeated,
    #[error("element {value} needs more than {bits} bits")]
    ElementTooWide { value: u64, bits: u32 },
    #[error("kernel cross-talk {measured} exceeds the 1/3 tolerance")]
    EpsilonTooLarge { measured: f64 },
    #[error("key {key} mapped to conflicting values {first} and {second}")]
    ConflictingKey { key: u32, first: u32, second: u32 },
    #[error("value {value} not representable in {bits} bits without colliding with Null")]
    ValueOutOfRange { value: u32, bits: u32 },
    #[error("expected exactly one shared element, found {found}")]
    IntersectionSize { found: usize },
    #[error("scale must lie in (0, 1], got {0}")]
    InvalidScale(f64),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    FeatureMap(#[from] FeatureMapError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("loss weights must be non-negative with a positive sum")]
    BadWeights,
    #[error("mask probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("encoder length {encoder} does not fit a sequence of length {len}")]
    EncoderTooLong { encoder: usize, len: usize },
    #[error("loss is not finite")]
    NonFinite,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token {token} outside vocabulary of size {vocab}")]
    OutOfVocab { token: u32, vocab: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no instances in slice {0}")]
    EmptySlice(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
