//! Crate-wide error type.

use thiserror::Error;

/// Errors produced across the stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A camera model with non-positive focals or an out-of-image principal point.
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),

    /// Pixel outside the image or non-positive depth during back-projection.
    #[error("invalid back-projection input: {0}")]
    InvalidBackprojection(String),

    /// A controller spec that is missing fields required by its kind.
    #[error("invalid controller spec: {0}")]
    InvalidControllerSpec(String),

    /// Composition of an empty command list.
    #[error("cannot compose an empty command list")]
    EmptyComposition,

    /// Unknown task family or a keypoint count that does not match the family.
    #[error("controller generation: {0}")]
    ControllerGeneration(String),

    /// Joint vector outside the arm's limits.
    #[error("joint {index} value {value} outside limits [{min}, {max}]")]
    JointLimit {
        index: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    /// IK target outside the reachable workspace.
    #[error("IK target unreachable; closest approach {closest_approach} m")]
    Unreachable { closest_approach: f64 },

    /// Mismatched task families between states or configs.
    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    /// Degenerate camera or scene handed to the renderer.
    #[error("render: {0}")]
    Render(String),

    /// Tensor shape mismatch in the compute graph, naming the offending node.
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },

    /// Backward called before forward has populated node values.
    #[error("backward before forward at node {0}")]
    BackwardBeforeForward(String),

    /// Non-finite gradients or loss.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Empty training dataset.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Checkpoint file malformed or of an unsupported version.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A pipeline stage was started without its prerequisite artifact.
    #[error("stage `{stage}` missing prerequisite: {detail}")]
    MissingStage { stage: String, detail: String },

    /// The frozen task policy changed during keypoint learning.
    #[error("frozen task policy was modified during keypoint learning")]
    PolicyUnfrozen,

    /// Configuration error (schema violation, bad override).
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
