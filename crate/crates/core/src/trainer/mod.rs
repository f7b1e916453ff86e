//! Post-pretraining: batch construction, frame subsampling, the model
//! assembly and the optimisation loop.

mod batches;
mod model;
mod run;

pub use batches::{make_batches, subsample_frames, subsample_indices, Batch, BatchStrategy, FrameSampling};
pub use model::{Model, ModelConfig, LOGIT_TAU, MAX_LOGIT_TAU};
pub use run::{StepRecord, TrainOutcome, Trainer, CHECKPOINT_EPOCH, CHECKPOINT_STEP, TRAIN_LOG};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::EncoderError;
use crate::error::FormatError;
use crate::lora::{LoraError, LoraTarget};
use crate::losses::LossWeights;
use crate::negatives::NegativeError;
use crate::numerics::{Precision, ShapeError};
use crate::prompting::{PromptStyle, TemplateError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no videos")]
    EmptyDataset,
    #[error("{available} item(s) cannot fill a single batch of {batch}")]
    NoFullBatch { available: usize, batch: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: u64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Negative(#[from] NegativeError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters. Field names are the JSON config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Videos per batch (`B`).
    pub batch_videos: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    /// Verb-role hard negatives per event.
    pub nvr: usize,
    /// Role-noun hard negatives per event.
    pub nrn: usize,
    /// Fraction of an event's nouns a role-noun negative replaces.
    pub swap_fraction: f64,
    pub lora_rank: usize,
    pub lora_targets: Vec<LoraTarget>,
    /// Adapters on the text tower; needs `model.text.tower`.
    pub text_lora_targets: Vec<LoraTarget>,
    pub batch_strategy: BatchStrategy,
    /// Frames per event (`T`).
    pub frames_per_event: usize,
    pub frame_sampling: FrameSampling,
    pub seed: u64,
    pub precision: Precision,
    pub prompt_style: PromptStyle,
    pub ce: bool,
    pub cv: bool,
    pub vce: bool,
    pub vcv: bool,
    pub act_p: bool,
    pub extra_negatives: bool,
    pub hn_both_directions: bool,
    /// Sample hard negatives once instead of once per epoch.
    pub static_negatives: bool,
    pub normalize: bool,
    /// Constant logit scale instead of a learned one.
    pub fixed_scale: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_videos: 20,
            epochs: 40,
            lr: 1e-6,
            weight_decay: 0.01,
            lambda: 0.25,
            nvr: 4,
            nrn: 0,
            swap_fraction: 0.5,
            lora_rank: 64,
            lora_targets: vec![LoraTarget::Q, LoraTarget::K, LoraTarget::V],
            text_lora_targets: Vec::new(),
            batch_strategy: BatchStrategy::Default,
            frames_per_event: 4,
            frame_sampling: FrameSampling::Jitter,
            seed: 0,
            precision: Precision::F32,
            prompt_style: PromptStyle::Template,
            ce: true,
            cv: true,
            vce: true,
            vcv: true,
            act_p: false,
            extra_negatives: false,
            hn_both_directions: false,
            static_negatives: false,
            normalize: true,
            fixed_scale: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            ce: self.ce,
            cv: self.cv,
            vce: self.vce,
            vcv: self.vcv,
            use_hn: self.nvr + self.nrn > 0,
            extra_negatives: self.extra_negatives,
            act_p: self.act_p,
            hn_both_directions: self.hn_both_directions,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_videos == 0 {
            return bad("batch_videos must be >= 1".into());
        }
        if self.frames_per_event == 0 {
            return bad("frames_per_event must be >= 1".into());
        }
        if self.frames_per_event > self.model.vc.max_frames {
            return bad(format!(
                "frames_per_event {} exceeds model.vc.max_frames {}",
                self.frames_per_event, self.model.vc.max_frames
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        self.loss_weights().validate().map_err(TrainError::Config)?;
        if self.nrn > 0 && !(self.swap_fraction > 0.0 && self.swap_fraction < 1.0) {
            return bad(format!("swap_fraction must be in (0, 1), got {}", self.swap_fraction));
        }
        if let Some(s) = self.fixed_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("fixed_scale must be positive, got {s}"));
            }
        }
        if !(self.ce || self.cv || self.vce || self.vcv || self.act_p) {
            return bad("every loss term is disabled".into());
        }
        if self.batch_strategy == BatchStrategy::ShuffleEvents && (self.vce || self.vcv || self.cv) {
            return bad(
                "shuffle_events mixes events of different videos; disable vce, vcv and cv (the contextualizer \
                 needs whole videos)"
                    .into(),
            );
        }
        if !self.text_lora_targets.is_empty() && self.model.text.tower.is_none() {
            return bad("text_lora_targets needs model.text.tower".into());
        }
        if self.model.text.dim != self.model.backbone.dim {
            return bad(format!(
                "text dim {} differs from backbone dim {}",
                self.model.text.dim, self.model.backbone.dim
            ));
        }
        Ok(())
    }
}

/// SplitMix64 over a sequence of words; used for every derived seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
