use thiserror::Error;

use crate::annotations::AnnotationError;
use crate::encoders::EncoderError;
use crate::evaluation::EvalError;
use crate::lora::LoraError;
use crate::negatives::NegativeError;
use crate::numerics::ShapeError;
use crate::prompting::TemplateError;
use crate::trainer::TrainError;

/// Malformed or truncated binary/JSONL input.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated input while reading {what}")]
    Truncated { what: &'static str },
    #[error("invalid UTF-8 in {what}")]
    Utf8 { what: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Any error the pipeline can produce.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Negative(#[from] NegativeError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    /// Process exit code: 1 for validation problems, 2 for I/O and format problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format(_) => 2,
            Error::Annotation(AnnotationError::Io { .. }) => 2,
            Error::Encoder(e) | Error::Train(TrainError::Encoder(e)) => encoder_code(e),
            Error::Eval(EvalError::Format(_) | EvalError::MissingEmbedding(_)) => 2,
            Error::Train(TrainError::Format(_) | TrainError::Io(_)) => 2,
            _ => 1,
        }
    }
}

fn encoder_code(e: &EncoderError) -> i32 {
    match e {
        EncoderError::Shape(_) => 1,
        _ => 2,
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
