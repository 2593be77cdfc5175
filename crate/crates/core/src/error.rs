use alloc::string::String;

use crate::graph::NodeId;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Field of a planner decision that failed to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionField {
    Type,
    Parents,
    Instruction,
}

impl core::fmt::Display for DecisionField {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            DecisionField::Type => "type",
            DecisionField::Parents => "parents",
            DecisionField::Instruction => "instruction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dangling parent: node {0} does not exist")]
    DanglingParent(NodeId),

    #[error("graph is closed: a Stop node has already been appended")]
    GraphClosed,

    #[error("decision parse error in `{field}`: {reason}")]
    Parse { field: DecisionField, reason: String },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("no scripted rule matched request: {0}")]
    UnmatchedRequest(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("degenerate embedding: vector has zero norm")]
    DegenerateEmbedding,

    #[error("knowledge base build failed: {0}")]
    Build(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("accounting violation: {0}")]
    AccountingViolation(String),

    #[error("missing template `{0}`")]
    MissingTemplate(String),

    #[error("template `{template}` references unknown placeholder `{placeholder}`")]
    UnboundPlaceholder { template: String, placeholder: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Failures that should abort a run instead of being folded into a
    /// diagnostic node.
    pub fn is_fatal(&self) -> bool {
        matches!(self, Error::BackendUnavailable(_))
    }
}
