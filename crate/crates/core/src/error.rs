use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mdp: {0}")]
    InvalidMdp(String),

    #[error("state {0} is terminal")]
    TerminalStep(usize),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("linear system is singular")]
    Singular,

    #[error("no available action in state {0}")]
    EmptyActionSet(usize),

    #[error("invalid intervention '{label}': {reason}")]
    InvalidIntervention { label: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("enumeration budget exceeded: {needed} outcomes > {budget}")]
    BudgetExceeded { needed: f64, budget: f64 },

    #[error("all likelihood evaluations were -inf")]
    DegenerateLikelihood,

    #[error("missing component for criterion: {0}")]
    MissingComponent(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
