//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // ── tensor / autodiff ───────────────────────────────────────────
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid dropout rate {0}; must lie in [0, 1)")]
    InvalidRate(f64),
    #[error("zero-norm row {0}; cosine similarity is undefined")]
    ZeroNormRow(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    // ── corpus ──────────────────────────────────────────────────────
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{have} content tokens cannot fill {want} buckets")]
    TooFewTokens { have: usize, want: usize },
    #[error("sentence of {len} target tokens exceeds batch budget {budget}")]
    SentenceTooLong { len: usize, budget: usize },
    #[error("test set is empty")]
    EmptyTestSet,

    // ── contrastive ─────────────────────────────────────────────────
    #[error("dropout passes are misaligned: {0}")]
    PassMisalignment(String),
    #[error("weight matrix is {got:?}, expected {want:?}")]
    WeightShapeMismatch { got: Vec<usize>, want: Vec<usize> },

    // ── training ────────────────────────────────────────────────────
    #[error("gold id {id} out of vocabulary of size {vocab}")]
    InvalidGoldId { id: usize, vocab: usize },
    #[error("non-finite loss at step {step} ({part})")]
    NonFiniteLoss { step: u64, part: &'static str },

    // ── checkpoint / io ─────────────────────────────────────────────
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint version {got} unsupported (expected {want})")]
    VersionMismatch { got: u32, want: u32 },
    #[error("checkpoint checksum mismatch or truncated file")]
    CorruptChecksum,

    // ── evaluation ──────────────────────────────────────────────────
    #[error("hypothesis/reference line counts differ: {hyp} vs {refs}")]
    LengthMismatch { hyp: usize, refs: usize },
    #[error("text is empty")]
    EmptyText,
    #[error("text of {len} tokens is shorter than sample size {sample}")]
    TextTooShort { len: usize, sample: usize },
    #[error("lexical diversity undefined: no factor completes")]
    UndefinedDiversity,
    #[error("subsets do not partition the test set: {0}")]
    NotAPartition(String),

    // ── geometry ────────────────────────────────────────────────────
    #[error("embedding row {0} has zero norm")]
    DegenerateRow(usize),
    #[error("subset of {0} rows is too small for pairwise statistics")]
    SubsetTooSmall(usize),
    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),

    #[error("{0}")]
    Msg(String),
}

pub type Result<T> = std::result::Result<T, Error>;
