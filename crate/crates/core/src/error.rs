use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("decomposition failed on frames {first}..={last}: {reason}")]
    Decomposition {
        first: usize,
        last: usize,
        reason: String,
    },

    #[error("non-finite {component} loss at iteration {iteration}")]
    Diverged {
        iteration: usize,
        component: &'static str,
    },

    #[error("editor failed in phase {phase}: {reason}")]
    Editor { phase: usize, reason: String },

    #[error("internal error: {0}")]
    Internal(String),
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}

pub(crate) use bail;
