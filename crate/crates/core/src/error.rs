use std::fmt;

/// Result alias used throughout the crate.
pub type CoreResult<T> = Result<T, CoreError>;

/// Errors emitted by the tensor kernel, mask engine, model, corpus and trainer.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes are incompatible for the requested op.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A tensor constructor received data whose length disagrees with the shape.
    DataLength { expected: usize, got: usize },
    /// A softmax row had no unmasked entry; callers must bypass the sublayer instead.
    FullyMaskedRow { row: usize },
    /// backward() called twice on the same graph without reset.
    BackwardTwice,
    /// backward() requires a scalar root.
    NonScalarRoot { shape: Vec<usize> },
    /// A value that must be finite was not.
    NonFinite { context: String },
    /// A mask was requested for a disabled decoder slot.
    DisabledMask,
    /// Unknown task name.
    UnknownTask { name: String },
    /// A required generation condition is missing or an unsupported one was given.
    BadCondition { task: &'static str, detail: String },
    /// Token id out of range for its vocabulary.
    TokenOutOfRange { id: u32, vocab: usize },
    /// Sequence longer than the configured context.
    Overlength { len: usize, max: usize },
    /// Invalid configuration value.
    InvalidConfig { detail: String },
    /// Unknown key in a config file.
    UnknownConfigKey { key: String },
    /// A corpus / checkpoint / report record failed to parse.
    Malformed { path: String, line: usize, detail: String },
    /// Wrapper around I/O failures.
    Io { path: String, detail: String },
    /// An edit span fell outside the lyric bounds or the 1..=15 word range.
    BadEditSpan { detail: String },
    /// Non-finite gradient during an optimizer step.
    BadGradient { group: String },
    /// Training aborted on a non-finite loss.
    Diverged { step: u64 },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch lhs={lhs:?} rhs={rhs:?}")
            }
            CoreError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            CoreError::FullyMaskedRow { row } => {
                write!(f, "softmax row {row} is fully masked; bypass the sublayer instead")
            }
            CoreError::BackwardTwice => write!(f, "backward called twice without reset"),
            CoreError::NonScalarRoot { shape } => {
                write!(f, "backward root must be scalar, got shape {shape:?}")
            }
            CoreError::NonFinite { context } => write!(f, "non-finite value in {context}"),
            CoreError::DisabledMask => {
                write!(f, "mask requested for a disabled decoder; skip the decoder instead")
            }
            CoreError::UnknownTask { name } => write!(f, "unknown task '{name}'"),
            CoreError::BadCondition { task, detail } => {
                write!(f, "task {task}: {detail}")
            }
            CoreError::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} out of range for vocab size {vocab}")
            }
            CoreError::Overlength { len, max } => {
                write!(f, "sequence length {len} exceeds max context {max}")
            }
            CoreError::InvalidConfig { detail } => write!(f, "invalid config: {detail}"),
            CoreError::UnknownConfigKey { key } => write!(f, "unknown config key '{key}'"),
            CoreError::Malformed { path, line, detail } => {
                write!(f, "{path}:{line}: malformed record: {detail}")
            }
            CoreError::Io { path, detail } => write!(f, "{path}: {detail}"),
            CoreError::BadEditSpan { detail } => write!(f, "bad edit span: {detail}"),
            CoreError::BadGradient { group } => {
                write!(f, "non-finite gradient in parameter group '{group}'")
            }
            CoreError::Diverged { step } => {
                write!(f, "training diverged at step {step}: non-finite loss")
            }
        }
    }
}

impl std::error::Error for CoreError {}
