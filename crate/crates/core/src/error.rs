use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("contact azimuth {psi} coincides with a polygon vertex")]
    VertexAzimuth { psi: f64 },
    #[error("contact azimuth {psi} outside [-pi, pi]")]
    AzimuthOutOfRange { psi: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("input violates its bounds: {0}")]
    InvalidInput(String),
    #[error("contact point left face {face} during rollout")]
    FaceExit { face: usize },
    #[error("mode polytope is empty")]
    InfeasibleCell,
    #[error("nearest-neighbor query on an empty tree")]
    EmptyTree,
    #[error("riccati recursion hit a singular input Hessian")]
    SingularRiccati,
    #[error("bodies are not in contact")]
    NotInContact,
    #[error("contact LCP could not be solved")]
    LcpUnsolvable,
    #[error("node {0} is not in the tree")]
    NodeNotInTree(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error at `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
