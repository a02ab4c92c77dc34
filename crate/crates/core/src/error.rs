use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("target list is empty")]
    EmptyTargets,

    #[error("expert {expert} unavailable: {reason}")]
    ExpertUnavailable { expert: String, reason: String },

    #[error("malformed response from {source_name}: {reason}")]
    MalformedResponse { source_name: String, reason: String },

    #[error("no in-bounds placement of box {index} satisfies IoU < {max_iou}")]
    NoisePlacementImpossible { index: usize, max_iou: f64 },

    #[error("target extraction reply is not a valid objects list: {0}")]
    MalformedExtraction(String),

    #[error("missing ground truth for {0}")]
    MissingGroundTruth(String),

    #[error("record set is empty")]
    EmptyRecordSet,

    #[error("image {image_id} has {count} questions in category {category}, expected 2")]
    UnpairedImage {
        image_id: String,
        category: String,
        count: usize,
    },

    #[error("no matching record for id {0}")]
    JoinFailure(String),

    #[error("cannot read image {path}: {reason}")]
    ImageUnreadable { path: PathBuf, reason: String },

    #[error("reasoner unavailable: {0}")]
    ReasonerUnavailable(String),

    #[error("fixture error at line {line}: {reason}")]
    Fixture { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
