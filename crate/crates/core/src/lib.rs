//! Adapting a frozen image-text encoder to video events with verb/role
//! annotations: template prompts, hard negatives, LoRA adapters, a video
//! contextualizer and contrastive training on top of a small autodiff core.

pub mod annotations;
pub mod cli;
pub mod contextualizer;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod lora;
pub mod losses;
pub mod negatives;
pub mod nn;
pub mod numerics;
pub mod prompting;
pub mod trainer;

pub use error::{Error, FormatError, Result};
