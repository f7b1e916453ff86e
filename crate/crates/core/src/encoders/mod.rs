//! Frozen encoders, embedding files and the planted synthetic task.

mod backbone;
mod embfile;
mod frames;
pub mod planted;
mod text;

pub use backbone::{Backbone, BackboneConfig};
pub use embfile::EmbeddingMatrix;
pub use frames::FrameStore;
pub use planted::{planted_pair_generator, PlantedConfig, PlantedData};
pub use text::{token_vector, TextConfig, TextEncoder, TextTowerConfig};

use thiserror::Error;

use crate::error::FormatError;
use crate::numerics::ShapeError;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("no embedding for frame {0}")]
    MissingFrame(String),
    #[error("frame {frame}: expected a [{tokens}, {dim}] token grid, got {got:?}")]
    FrameShape {
        frame: String,
        tokens: usize,
        dim: usize,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}
