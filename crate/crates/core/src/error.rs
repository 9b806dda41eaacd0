use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated by its caller.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("provenance: {0}")]
    Provenance(String),

    /// The tape cannot perform the requested differentiation order.
    #[error("capability: {0}")]
    Capability(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite loss or gradient at inner step {step}")]
    Divergence { step: usize },

    #[error("task {task} failed: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("method mismatch: {0}")]
    MethodMismatch(String),

    /// Finite differences are meaningless near a relu or sign kink; the
    /// caller should draw a fresh instance.
    #[error("instance within {margin:e} of a kink; resample")]
    KinkProximity { margin: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
