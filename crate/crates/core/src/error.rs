use thiserror::Error;

/// Error type shared by all modules of this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or point-set dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A projection or grid construction is geometrically impossible.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A binary file does not conform to its format.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// A text file (CSV/JSON) could not be parsed.
    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A named tensor is absent from a weight store.
    #[error("missing weight tensor `{0}`")]
    MissingTensor(String),

    /// Non-finite or otherwise invalid numeric input.
    #[error("invalid value: {0}")]
    Invalid(String),

    /// All match weights are zero; the alignment has no support.
    #[error("no support: sum of match weights is zero")]
    NoSupport,

    /// The rotation cannot be determined from the given matches.
    #[error("rotation indeterminate: {0}")]
    RotationIndeterminate(String),

    /// A derivative or solve is requested too close to a singularity.
    #[error("ill-conditioned: {0}")]
    IllConditioned(String),

    /// Input is too small or too collapsed for the requested statistic.
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    /// True for errors that signal numerical degeneracy rather than bad
    /// data or I/O. The CLI maps these to a dedicated exit code.
    pub fn is_degeneracy(&self) -> bool {
        matches!(
            self,
            Error::NoSupport
                | Error::RotationIndeterminate(_)
                | Error::IllConditioned(_)
                | Error::Degenerate(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
