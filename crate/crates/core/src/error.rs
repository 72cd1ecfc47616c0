use std::fmt;

use thiserror::Error;

/// Location of a problem inside a hierarchical dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub cluster_id: usize,
    pub unit_id: Option<usize>,
}

impl Site {
    pub fn cluster(cluster_id: usize) -> Self {
        Self {
            cluster_id,
            unit_id: None,
        }
    }

    pub fn unit(cluster_id: usize, unit_id: usize) -> Self {
        Self {
            cluster_id,
            unit_id: Some(unit_id),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.unit_id {
            Some(j) => write!(f, "(cluster {}, unit {})", self.cluster_id, j),
            None => write!(f, "(cluster {})", self.cluster_id),
        }
    }
}

/// A single violated dataset invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationIssue {
    pub site: Option<Site>,
    pub kind: IssueKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IssueKind {
    NoClusters,
    EmptyCluster,
    DimensionTooSmall { p: usize },
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    ZeroSamples,
    NonFiniteCovariate,
    NonFiniteCovariance,
    AsymmetricCovariance { max_rel_asymmetry: f64 },
    NotPositiveSemidefinite { min_eigenvalue: f64 },
    DuplicateUnit,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(site) = self.site {
            write!(f, "{site}: ")?;
        }
        match &self.kind {
            IssueKind::NoClusters => write!(f, "dataset has no clusters"),
            IssueKind::EmptyCluster => write!(f, "cluster has no units"),
            IssueKind::DimensionTooSmall { p } => write!(f, "dimension p = {p} is below 2"),
            IssueKind::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(f, "dimension mismatch in {what}: expected {expected}, found {found}"),
            IssueKind::ZeroSamples => write!(f, "unit has no samples (T = 0)"),
            IssueKind::NonFiniteCovariate => write!(f, "non-finite covariate"),
            IssueKind::NonFiniteCovariance => write!(f, "non-finite sample covariance entry"),
            IssueKind::AsymmetricCovariance { max_rel_asymmetry } => {
                write!(f, "sample covariance is not symmetric (relative asymmetry {max_rel_asymmetry:e})")
            }
            IssueKind::NotPositiveSemidefinite { min_eigenvalue } => {
                write!(f, "sample covariance is not PSD (smallest eigenvalue {min_eigenvalue:e})")
            }
            IssueKind::DuplicateUnit => write!(f, "duplicate (cluster_id, unit_id)"),
        }
    }
}

fn join_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum McapError {
    #[error("invalid dataset: {}", join_issues(.0))]
    Validation(Vec<ValidationIssue>),

    #[error("input error: {0}")]
    Input(String),

    #[error("parse error in {file} at line {line}: {detail}")]
    Parse {
        file: String,
        line: u64,
        detail: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate cluster {cluster_id}: {detail}")]
    DegenerateCluster { cluster_id: usize, detail: String },

    #[error("rank deficiency {site}: {detail}")]
    RankDeficient { site: Site, detail: String },

    #[error("design matrix is rank deficient: {0}")]
    DesignRank(String),

    #[error("numerical overflow in {term}")]
    Overflow { term: &'static str },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("estimator failure in block {block}: {detail}")]
    Block { block: String, detail: String },

    #[error("all {} starts failed: {}", .0.len(), .0.join("; "))]
    AllStartsFailed(Vec<String>),

    #[error("inference failure: {0}")]
    Inference(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl McapError {
    /// True for problems with the user's input as opposed to numerical breakdowns.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            McapError::Validation(_)
                | McapError::Input(_)
                | McapError::Parse { .. }
                | McapError::Io(_)
                | McapError::Json(_)
                | McapError::DesignRank(_)
        )
    }
}

pub type Result<T, E = McapError> = std::result::Result<T, E>;
