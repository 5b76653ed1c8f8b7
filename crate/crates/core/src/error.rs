use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty concatenation")]
    EmptyConcatenation,

    #[error("duplicate part for subsystem {0} in concatenation")]
    DuplicatePart(usize),

    #[error("unknown subsystem {0}")]
    UnknownSubsystem(usize),

    #[error("non-unique edge {from}->{to}")]
    NonUniqueEdge { from: usize, to: usize },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("numerical blow-up at step {step}")]
    NumericalBlowUp { step: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("ill-posed MPC; add input regularization")]
    IllPosedMpc,

    #[error("set-point supplied to uncontrolled subsystem {0}")]
    UnexpectedSetpoint(usize),

    #[error("missing set-point for controlled subsystem {0}")]
    MissingSetpoint(usize),

    #[error("linear MPC requires a linear model (subsystem {0})")]
    NotLinear(usize),

    #[error("algebraic loop in coupling interconnection")]
    AlgebraicLoop,

    #[error("composition: {0}")]
    Composition(String),

    #[error("subsystem {subsystem}: {inner}")]
    Subsystem {
        subsystem: usize,
        #[source]
        inner: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("mismatched scenarios: {0} vs {1}")]
    ScenarioMismatch(String, String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn in_subsystem(self, subsystem: usize) -> Self {
        match self {
            e @ Error::Subsystem { .. } => e,
            e => Error::Subsystem {
                subsystem,
                inner: Box::new(e),
            },
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
