use serde::{Deserialize, Serialize};

use super::{batches::subsample_frames, FrameSampling, TrainConfig, TrainError};
use crate::annotations::{Dataset, FrameRef};
use crate::contextualizer::{VcConfig, VideoContextualizer};
use crate::encoders::{Backbone, BackboneConfig, EncoderError, FrameStore, TextConfig, TextEncoder};
use crate::lora::{self, LoraError};
use crate::losses::LogitScale;
use crate::numerics::{Binding, Graph, ParamId, ParamStore, Real, ShapeError, Tensor, Var};
use crate::prompting::{positive_prompt, PromptStyle};

use super::mix_seed;

/// Architecture of every component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub text: TextConfig,
    pub vc: VcConfig,
}

pub const LOGIT_TAU: &str = "logit_scale.tau";
/// `ln 100`: the learned scale never exceeds 100.
pub const MAX_LOGIT_TAU: f64 = 4.605_170_185_988_092;

/// Frozen backbone and text encoder with their adapters, the contextualizer
/// and the logit scale, all in one parameter store.
#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub store: ParamStore<F>,
    pub backbone: Backbone,
    pub text: TextEncoder<F>,
    pub vc: VideoContextualizer,
    pub tau: Option<ParamId>,
    pub fixed_scale: Option<f64>,
    pub normalize: bool,
}

const EVAL_CHUNK: usize = 16;

impl<F: Real> Model<F> {
    /// Frozen parts are seeded by their own config seeds; adapters, the
    /// contextualizer and the scale by `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self, TrainError> {
        let mc = &config.model;
        let mut store = ParamStore::new();
        let mut backbone = Backbone::new(&mut store, "backbone", &mc.backbone);
        let mut text = TextEncoder::new(&mut store, &mc.text);
        if !config.lora_targets.is_empty() {
            lora::inject(
                &mut backbone.blocks,
                &mut store,
                &config.lora_targets,
                config.lora_rank,
                mix_seed(&[config.seed, 1]),
            )?;
        }
        if !config.text_lora_targets.is_empty() {
            let blocks = text
                .tower_blocks_mut()
                .ok_or_else(|| TrainError::Config("text_lora_targets needs model.text.tower".into()))?;
            lora::inject(
                blocks,
                &mut store,
                &config.text_lora_targets,
                config.lora_rank,
                mix_seed(&[config.seed, 2]),
            )?;
        }
        let vc = VideoContextualizer::new(&mut store, mc.backbone.dim, &mc.vc, mix_seed(&[config.seed, 3]));
        let tau = config
            .fixed_scale
            .is_none()
            .then(|| store.add(LOGIT_TAU, Tensor::scalar(F::lit((1.0f64 / 0.07).ln())), false));
        Ok(Self {
            store,
            backbone,
            text,
            vc,
            tau,
            fixed_scale: config.fixed_scale,
            normalize: config.normalize,
        })
    }

    /// Raw bytes of the frozen backbone and text encoder weights (adapters excluded).
    pub fn frozen_fingerprint(&self) -> Vec<u8> {
        self.store.fingerprint(|p| {
            (p.name.starts_with("backbone.") || p.name.starts_with("text.")) && !p.name.contains(".lora.")
        })
    }

    pub fn logit_scale(&self, g: &mut Graph<F>, p: &Binding) -> LogitScale<F> {
        match (self.tau, self.fixed_scale) {
            (Some(t), _) => LogitScale::Learned(g.exp(p.var(t))),
            (None, Some(s)) => LogitScale::Fixed(F::lit(s)),
            (None, None) => LogitScale::Fixed(F::one()),
        }
    }

    pub fn logit_scale_value(&self) -> f64 {
        match (self.tau, self.fixed_scale) {
            (Some(t), _) => self.store.tensor(t).data()[0].to_f64().unwrap_or(f64::NAN).exp(),
            (None, Some(s)) => s,
            (None, None) => 1.0,
        }
    }

    /// Keep the learned scale at or below 100.
    pub fn clamp_scale(&mut self) {
        if let Some(t) = self.tau {
            let max = F::lit(MAX_LOGIT_TAU);
            let v = &mut self.store.tensor_mut(t).data_mut()[0];
            if *v > max {
                *v = max;
            }
        }
    }

    /// Backbone (with live adapters) on grids `[n, L, input_dim]`.
    pub fn encode_grids(&self, g: &mut Graph<F>, p: &Binding, grids: Var) -> Result<Var, ShapeError> {
        self.backbone.forward(g, p, grids, self.normalize)
    }

    pub fn load_grids(&self, frames: &FrameStore, refs: &[FrameRef]) -> Result<Vec<Tensor<F>>, EncoderError> {
        let (l, d) = (self.backbone.config.tokens, self.backbone.config.input_dim);
        refs.iter()
            .map(|r| {
                let t = frames.grid(r)?;
                if t.shape() != [l, d] {
                    return Err(EncoderError::FrameShape {
                        frame: r.to_string(),
                        tokens: l,
                        dim: d,
                        got: t.shape().to_vec(),
                    });
                }
                Ok(t.cast())
            })
            .collect()
    }

    /// Frame embeddings `[n, d]` outside training.
    pub fn encode_frames(&self, frames: &FrameStore, refs: &[FrameRef]) -> Result<Tensor<F>, TrainError> {
        let grids = self.load_grids(frames, refs)?;
        Ok(self.backbone.encode(&self.store, &grids, self.normalize)?)
    }

    pub fn embed_texts(&self, prompts: &[&str]) -> Result<Tensor<F>, ShapeError> {
        self.text.embed_batch(&self.store, prompts, self.normalize)
    }

    /// Positive prompt text of every event, video-major.
    pub fn positive_prompts(dataset: &Dataset, style: PromptStyle) -> Result<Vec<String>, TrainError> {
        dataset
            .events()
            .map(|(_, e)| Ok(positive_prompt(e, style)?.text))
            .collect()
    }

    pub fn event_text_embeddings(&self, dataset: &Dataset, style: PromptStyle) -> Result<Tensor<F>, TrainError> {
        let prompts = Self::positive_prompts(dataset, style)?;
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        Ok(self.embed_texts(&refs)?)
    }

    /// `l2(mean_k t_ik)` per video.
    pub fn video_text_embeddings(&self, dataset: &Dataset, style: PromptStyle) -> Result<Tensor<F>, TrainError> {
        let ev = self.event_text_embeddings(dataset, style)?;
        let d = ev.row_len();
        let mut out = Vec::with_capacity(dataset.videos.len() * d);
        let mut row = 0;
        for v in &dataset.videos {
            let n = v.events.len();
            let block = Tensor::new(vec![n, d], ev.data()[row * d..(row + n) * d].to_vec())?;
            row += n;
            out.extend_from_slice(block.mean_rows().data());
        }
        let t = Tensor::new(vec![dataset.videos.len(), d], out)?;
        Ok(if self.normalize { t.l2_normalized_rows() } else { t })
    }

    /// `l2(mean of all frame embeddings)` per video, on the backbone alone.
    pub fn video_embeddings(&self, dataset: &Dataset, frames: &FrameStore) -> Result<Tensor<F>, TrainError> {
        let d = self.backbone.config.dim;
        let mut out = Vec::with_capacity(dataset.videos.len() * d);
        for v in &dataset.videos {
            let refs: Vec<FrameRef> = v.events.iter().flat_map(|e| e.frame_refs.iter().cloned()).collect();
            let emb = self.encode_frames(frames, &refs)?;
            out.extend_from_slice(emb.mean_rows().data());
        }
        let t = Tensor::new(vec![dataset.videos.len(), d], out)?;
        Ok(if self.normalize { t.l2_normalized_rows() } else { t })
    }

    /// Visual event representations `[E, d]` from `t` uniformly sampled
    /// frames per event: contextualised when `use_vc`, mean-pooled otherwise.
    pub fn event_embeddings(
        &self,
        dataset: &Dataset,
        frames: &FrameStore,
        t: usize,
        use_vc: bool,
    ) -> Result<Tensor<F>, TrainError> {
        Ok(self.video_level(dataset, frames, t, use_vc)?.0)
    }

    /// Contextualised video representations `v̂` `[V, d]`.
    pub fn vc_video_embeddings(&self, dataset: &Dataset, frames: &FrameStore, t: usize) -> Result<Tensor<F>, TrainError> {
        Ok(self.video_level(dataset, frames, t, true)?.1)
    }

    fn video_level(
        &self,
        dataset: &Dataset,
        frames: &FrameStore,
        t: usize,
        use_vc: bool,
    ) -> Result<(Tensor<F>, Tensor<F>), TrainError> {
        let d = self.backbone.config.dim;
        let p = dataset.events_per_video().unwrap_or(0);
        let mut events = Vec::with_capacity(dataset.num_events() * d);
        let mut videos = Vec::with_capacity(dataset.videos.len() * d);
        for chunk in dataset.videos.chunks(EVAL_CHUNK) {
            let refs: Vec<FrameRef> = chunk
                .iter()
                .flat_map(|v| v.events.iter())
                .flat_map(|e| subsample_frames(e, t, FrameSampling::Uniform, 0))
                .collect();
            let grids = self.load_grids(frames, &refs)?;
            let mut g = Graph::new();
            let b = self.store.bind(&mut g);
            let x = g.constant(Tensor::stack(&grids)?);
            let f = self.encode_grids(&mut g, &b, x)?;
            let f = g.reshape(f, &[chunk.len(), p, t, d])?;
            if use_vc {
                let out = self.vc.forward(&mut g, &b, f, self.normalize)?;
                events.extend_from_slice(g.value(out.e_hat).data());
                videos.extend_from_slice(g.value(out.v_hat).data());
            } else {
                let e = g.reshape(f, &[chunk.len() * p, t, d])?;
                let e = g.mean(e, 1)?;
                let e = if self.normalize { g.l2_normalize(e) } else { e };
                events.extend_from_slice(g.value(e).data());
                let v = g.reshape(f, &[chunk.len(), p * t, d])?;
                let v = g.mean(v, 1)?;
                let v = if self.normalize { g.l2_normalize(v) } else { v };
                videos.extend_from_slice(g.value(v).data());
            }
        }
        Ok((
            Tensor::new(vec![dataset.num_events(), d], events)?,
            Tensor::new(vec![dataset.videos.len(), d], videos)?,
        ))
    }

    /// Copy with backbone adapters folded into their weights.
    pub fn merged(&self) -> Result<Self, LoraError> {
        let (blocks, store) = lora::merge(&self.backbone.blocks, &self.store)?;
        let mut backbone = self.backbone.rebind(&store);
        backbone.blocks = blocks;
        Ok(Self {
            backbone,
            text: self.text.rebind(&store),
            vc: self.vc.rebind(&store),
            tau: self.tau.map(|_| store.id(LOGIT_TAU).expect("tau")),
            fixed_scale: self.fixed_scale,
            normalize: self.normalize,
            store,
        })
    }

    /// Adapter elements on the backbone.
    pub fn adapter_params(&self) -> usize {
        lora::adapter_param_count(&self.backbone.blocks)
    }
}
