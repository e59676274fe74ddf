use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("panel is empty ({rows} x {cols})")]
    EmptyPanel { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value at observed cell (unit {unit}, period {period})")]
    NonFiniteObservation { unit: usize, period: usize },

    #[error("unit {unit} is observed at period {period} after a missing period; treatment must be irreversible")]
    NonStaggered { unit: usize, period: usize },

    #[error("missingness does not form a complete staircase: {0}")]
    IncompleteStaircase(String),

    #[error("block ({i0}, {j0}) is observed; only blocks with j0 > k + 1 - i0 are imputed")]
    BlockObserved { i0: usize, j0: usize },

    #[error("index {index} out of range 1..={max} for {what}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        max: usize,
    },

    #[error("rank {rank} exceeds the admissible maximum {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("rank must be at least 1")]
    ZeroRank,

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("matrix is numerically singular (smallest/largest singular value {ratio:e})")]
    Singular { ratio: f64 },

    #[error("design matrix is rank deficient (smallest singular value {sigma_min:e})")]
    RankDeficient { sigma_min: f64 },

    #[error("U1 is rank deficient (sigma_r = {sigma_r:e}); the missing block is not identifiable")]
    RankDeficientU1 { sigma_r: f64 },

    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    BadAlpha(f64),

    #[error("variance estimate is zero; rescaled error undefined")]
    ZeroVariance,

    #[error(
        "invalid constants: need c_u >= c_l > 0 and e >= 0 (c_u = {c_u}, c_l = {c_l}, e = {e})"
    )]
    BadConstants { c_u: f64, c_l: f64, e: f64 },

    #[error("signal strength must be positive")]
    ZeroSignal,

    #[error("incoherence level {level} outside (0, {max})")]
    LevelOutOfRange { level: f64, max: f64 },

    #[error("matrix does not have rank exactly {expected}: {detail}")]
    RankMismatch { expected: usize, detail: String },

    #[error("entry (unit {unit}, period {period}) is observed; no counterfactual to impute")]
    EntryObserved { unit: usize, period: usize },

    #[error("treated outcome for (unit {unit}, period {period}) was not supplied")]
    MissingTreatedOutcome { unit: usize, period: usize },

    #[error("block ({i0}, {j0}): {source}")]
    Block {
        i0: usize,
        j0: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration at {pointer}: {message}")]
    InvalidConfig { pointer: String, message: String },

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_block(self, i0: usize, j0: usize) -> Self {
        Error::Block {
            i0,
            j0,
            source: Box::new(self),
        }
    }

    /// Strips block context, returning the underlying cause.
    pub fn root(&self) -> &Error {
        match self {
            Error::Block { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the staggered-adoption structure itself.
    /// Variant name of the innermost error, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::EmptyPanel { .. } => "EmptyPanel",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::NonFiniteObservation { .. } => "NonFiniteObservation",
            Error::NonStaggered { .. } => "NonStaggered",
            Error::IncompleteStaircase(_) => "IncompleteStaircase",
            Error::BlockObserved { .. } => "BlockObserved",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::RankTooLarge { .. } => "RankTooLarge",
            Error::ZeroRank => "ZeroRank",
            Error::NonFinite => "NonFinite",
            Error::Singular { .. } => "Singular",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::RankDeficientU1 { .. } => "RankDeficientU1",
            Error::BadAlpha(_) => "BadAlpha",
            Error::ZeroVariance => "ZeroVariance",
            Error::BadConstants { .. } => "BadConstants",
            Error::ZeroSignal => "ZeroSignal",
            Error::LevelOutOfRange { .. } => "LevelOutOfRange",
            Error::RankMismatch { .. } => "RankMismatch",
            Error::EntryObserved { .. } => "EntryObserved",
            Error::MissingTreatedOutcome { .. } => "MissingTreatedOutcome",
            Error::Block { .. } => "Block",
            Error::InvalidConfig { .. } => "InvalidConfig",
            Error::Schema { .. } => "Schema",
            Error::Io(_) => "Io",
        }
    }

    /// `(i0, j0)` of the outermost block wrapper, if any.
    pub fn block(&self) -> Option<(usize, usize)> {
        match self {
            Error::Block { i0, j0, .. } => Some((*i0, *j0)),
            _ => None,
        }
    }

    pub fn is_pattern_error(&self) -> bool {
        matches!(
            self.root(),
            Error::EmptyPanel { .. }
                | Error::NonStaggered { .. }
                | Error::IncompleteStaircase(_)
                | Error::BlockObserved { .. }
                | Error::NonFiniteObservation { .. }
        )
    }

    /// True for rank and conditioning failures.
    pub fn is_numerical_error(&self) -> bool {
        matches!(
            self.root(),
            Error::RankTooLarge { .. }
                | Error::ZeroRank
                | Error::NonFinite
                | Error::Singular { .. }
                | Error::RankDeficient { .. }
                | Error::RankDeficientU1 { .. }
                | Error::ZeroVariance
                | Error::ZeroSignal
                | Error::RankMismatch { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
