//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("unknown token id {0} (vocab size {1})")]
    UnknownToken(u32, usize),

    #[error("unknown customized prompt {name:?}; registered prompts: {known:?}")]
    UnknownPrompt { name: String, known: Vec<String> },

    #[error("degenerate box (non-positive width or height): [{0}, {1}, {2}, {3}]")]
    DegenerateBox(f32, f32, f32, f32),

    #[error("coordinate {0} outside [0, 1]")]
    CoordOutOfRange(f32),

    #[error("image size {0}x{1} not divisible by 32; pad the image up to the next multiple of 32")]
    BadImageSize(usize, usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("frozen parameter digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("held-out contamination: {0}")]
    Contamination(String),

    #[error("run directory locked: {0}")]
    Lock(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
