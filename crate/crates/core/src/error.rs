use thiserror::Error;

use crate::ir::NodeId;
use crate::validate::Violation;

pub type Result<T, E = EvaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EvaError {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("node {node}: reference to undefined node {target}")]
    DanglingReference { node: NodeId, target: u64 },

    #[error("cycle detected through node {0}")]
    Cycle(NodeId),

    #[error("unsupported opcode {0}")]
    UnsupportedOpcode(String),

    #[error("node {node}: {op} expects {expected} argument(s), got {got}")]
    Arity {
        node: NodeId,
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("vec_size {0} is not a positive power of two")]
    VecSize(usize),

    #[error("node {node}: {msg}")]
    Malformed { node: NodeId, msg: String },

    #[error("node {node}: scale ratio 2^{ratio} at Add/Sub exceeds s_f = 2^{sf}")]
    ScaleRatio { node: NodeId, ratio: f64, sf: f64 },

    #[error("program failed validation with {} violation(s)", .0.len())]
    Validation(Vec<Violation>),

    #[error("parameter selection: {0}")]
    Params(String),

    #[error("missing input {0}")]
    MissingInput(NodeId),

    #[error("input {id}: length {len} does not divide vec_size {vec_size}")]
    InputLength { id: NodeId, len: usize, vec_size: usize },

    #[error("node {0}: non-finite result")]
    NonFinite(NodeId),

    #[error("internal: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EvaError {
    pub(crate) fn malformed(node: NodeId, msg: impl Into<String>) -> Self {
        EvaError::Malformed { node, msg: msg.into() }
    }
}
