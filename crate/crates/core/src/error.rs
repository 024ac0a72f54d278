use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("inconsistent direction: phi_x^2 + phi_y^2 = {0} exceeds 1")]
    InconsistentDirection(f64),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("RIS phase entry {index} has modulus {modulus}, expected 1")]
    NonUnitModulus { index: usize, modulus: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("combiner is singular (eigenvalue ratio {0:e})")]
    SingularCombiner(f64),

    #[error("observation block ({0}, {1}) is missing")]
    MissingBlock(usize, usize),

    #[error("selected atom has numerically zero norm")]
    NoProgress,

    #[error("no line-of-sight path available")]
    NoLoSPath,

    #[error("clock offset is under-determined: no usable NLoS path")]
    UnderDetermined,

    #[error("non-positive absolute delay {0:e} s")]
    NegativeDelay(f64),

    #[error("anchors and MS are collinear; clock offset cannot be solved")]
    ParallelGeometry,

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite value in input")]
    NonFinite,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Short machine-friendly name, used in failure records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InconsistentDirection(_) => "InconsistentDirection",
            Error::DegenerateGeometry(_) => "DegenerateGeometry",
            Error::NonUnitModulus { .. } => "NonUnitModulus",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::Config(_) => "ConfigError",
            Error::SingularCombiner(_) => "SingularCombiner",
            Error::MissingBlock(..) => "MissingBlock",
            Error::NoProgress => "NoProgress",
            Error::NoLoSPath => "NoLoSPath",
            Error::UnderDetermined => "UnderDetermined",
            Error::NegativeDelay(_) => "NegativeDelay",
            Error::ParallelGeometry => "ParallelGeometry",
            Error::EmptyInput => "EmptyInput",
            Error::NonFinite => "NonFinite",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Parse(_) => "Parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
