//! Error type shared by all core modules.

use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

/// Everything that can go wrong in the core pipeline, from file parsing
/// through training. Variants carry enough context to point at the
/// offending input.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Malformed input data (missing column, wrong arity, bad header).
    Format(String),
    /// A field failed to parse as the expected type.
    Parse(String),
    /// Input violated a documented invariant.
    Validation(String),
    /// A score outside its prompt's admissible range.
    ScoreOutOfRange {
        essay_id: u32,
        prompt_id: u8,
        score: i32,
    },
    /// Value outside the mathematical domain of an operation.
    Domain(String),
    /// NaN or infinity where a finite number is required.
    NonFinite(String),
    /// Invalid operation parameter (bin count, kernel size, dropout rate...).
    Parameter(String),
    /// Tensor shape disagreement.
    Shape(String),
    /// API contract violation (non-scalar loss, length mismatch...).
    Contract(String),
    /// Invalid run or model configuration.
    Config(String),
    /// Attention pooling over an empty (fully masked) set.
    Pooling(String),
    /// A gaze label points outside the essay's token stream.
    Alignment {
        essay_id: u32,
        token_index: usize,
        token_count: usize,
    },
    /// An essay that produced no tokens cannot be encoded.
    EmptyEssay { essay_id: u32 },
    /// Inference over an essay with no usable content.
    Inference(String),
    /// Training aborted (non-finite gradients and similar).
    Training(String),
    /// Paired test with zero variance but nonzero mean difference.
    DegenerateVariance,
    /// Reports that cannot be compared (different targets or seeds).
    Comparison(String),
}

impl core::fmt::Display for Error {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::ScoreOutOfRange {
                essay_id,
                prompt_id,
                score,
            } => write!(
                f,
                "validation error: essay {essay_id}: score {score} outside the range of prompt {prompt_id}"
            ),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Pooling(m) => write!(f, "pooling error: {m}"),
            Error::Alignment {
                essay_id,
                token_index,
                token_count,
            } => write!(
                f,
                "alignment error: essay {essay_id}: gaze label at token {token_index} but the essay has {token_count} tokens"
            ),
            Error::EmptyEssay { essay_id } => {
                write!(f, "encoding error: essay {essay_id} tokenizes to nothing")
            }
            Error::Inference(m) => write!(f, "inference error: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
            Error::DegenerateVariance => write!(
                f,
                "degenerate-variance error: zero spread with nonzero mean difference"
            ),
            Error::Comparison(m) => write!(f, "comparison error: {m}"),
        }
    }
}

impl core::error::Error for Error {}
