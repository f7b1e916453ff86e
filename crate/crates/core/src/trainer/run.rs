use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::batches::{make_batches, subsample_frames, Batch, BatchStrategy};
use super::{mix_seed, Model, TrainConfig, TrainError};
use crate::annotations::{build_verb_lexicon, Dataset, FrameRef};
use crate::encoders::FrameStore;
use crate::losses::{total_loss, video_text_from_events, HardNegatives, LossBatchInputs, LossWeights};
use crate::negatives::{make_role_noun_negatives, make_verb_role_negatives, noun_pool, verb_frames, NegativeError};
use crate::numerics::{AdamW, AdamWConfig, Checkpoint, Graph, Real, Tensor};
use crate::prompting::{positive_prompt, render_action_prompt};

pub const TRAIN_LOG: &str = "trainlog.jsonl";
pub const CHECKPOINT_EPOCH: &str = "trainer.epochs_done";
pub const CHECKPOINT_STEP: &str = "trainer.global_step";

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub ce: Option<f64>,
    pub cv: Option<f64>,
    pub vce: Option<f64>,
    pub vcv: Option<f64>,
    pub actp: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean total loss of each epoch run so far.
    pub epoch_losses: Vec<f64>,
    pub log: Vec<StepRecord>,
    /// Hard negatives that could not be generated (e.g. a single-verb batch).
    pub skipped_negatives: usize,
}

/// Training state over one dataset.
pub struct Trainer<'a, F: Real> {
    pub config: TrainConfig,
    dataset: &'a Dataset,
    frames: &'a FrameStore,
    lexicon: BTreeMap<String, Vec<String>>,
    pub model: Model<F>,
    pub optimizer: AdamW<F>,
    pub epochs_done: usize,
    pub global_step: u64,
    pub outcome: TrainOutcome,
}

/// Text inputs of one batch.
struct BatchText {
    positives: Vec<String>,
    negatives: Vec<String>,
    owners: Vec<usize>,
    actions: Vec<String>,
    skipped: usize,
}

impl<'a, F: Real> Trainer<'a, F> {
    pub fn new(dataset: &'a Dataset, frames: &'a FrameStore, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if dataset.videos.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let p = dataset.events_per_video().unwrap_or(0);
        if config.loss_weights().uses_vc() && p > config.model.vc.max_events {
            return Err(TrainError::Config(format!(
                "{p} events per video exceed model.vc.max_events {}",
                config.model.vc.max_events
            )));
        }
        let model = Model::new(&config)?;
        let optimizer = AdamW::new(AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(Self {
            lexicon: build_verb_lexicon(dataset),
            dataset,
            frames,
            model,
            optimizer,
            epochs_done: 0,
            global_step: 0,
            outcome: TrainOutcome {
                epoch_losses: Vec::new(),
                log: Vec::new(),
                skipped_negatives: 0,
            },
            config,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        dataset: &'a Dataset,
        frames: &'a FrameStore,
        config: TrainConfig,
        ckpt: &Checkpoint,
    ) -> Result<Self, TrainError> {
        let mut t = Self::new(dataset, frames, config)?;
        t.model.store.load_checkpoint(ckpt)?;
        t.optimizer.import(&t.model.store, ckpt)?;
        let scalar = |name: &str| {
            ckpt.get(name)
                .map(|x| x.data()[0] as u64)
                .ok_or_else(|| crate::error::FormatError::Invalid(format!("checkpoint lacks {name}")))
        };
        t.epochs_done = scalar(CHECKPOINT_EPOCH)? as usize;
        t.global_step = scalar(CHECKPOINT_STEP)?;
        Ok(t)
    }

    /// Parameters, optimizer moments and progress counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.store.to_checkpoint();
        self.optimizer.export(&self.model.store, &mut ckpt);
        ckpt.entries
            .push((CHECKPOINT_EPOCH.into(), Tensor::scalar(self.epochs_done as f32)));
        ckpt.entries
            .push((CHECKPOINT_STEP.into(), Tensor::scalar(self.global_step as f32)));
        ckpt
    }

    /// Train until `config.epochs` epochs are done. With `out_dir`, writes
    /// `ckpt_epoch<N>.fgckpt` after every epoch and appends to `trainlog.jsonl`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<&TrainOutcome, TrainError> {
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(
                    std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join(TRAIN_LOG))?,
                )
            }
            None => None,
        };
        while self.epochs_done < self.config.epochs {
            let first = self.outcome.log.len();
            self.run_epoch()?;
            if let (Some(dir), Some(f)) = (out_dir, log.as_mut()) {
                for rec in &self.outcome.log[first..] {
                    writeln!(f, "{}", serde_json::to_string(rec).expect("log record"))?;
                }
                f.flush()?;
                self.checkpoint()
                    .save(dir.join(format!("ckpt_epoch{}.fgckpt", self.epochs_done)))?;
            }
        }
        Ok(&self.outcome)
    }

    pub fn batches(&self, epoch: usize) -> Result<Vec<Batch>, TrainError> {
        make_batches(
            self.dataset,
            self.config.batch_strategy,
            self.config.batch_videos,
            mix_seed(&[self.config.seed, 10, epoch as u64]),
        )
    }

    /// One pass over the data; returns the mean total loss.
    pub fn run_epoch(&mut self) -> Result<f64, TrainError> {
        let epoch = self.epochs_done;
        let batches = self.batches(epoch)?;
        let mut sum = 0.0;
        for batch in &batches {
            let rec = self.step(epoch, batch)?;
            sum += rec.total;
            self.outcome.log.push(rec);
        }
        let mean = sum / batches.len() as f64;
        self.outcome.epoch_losses.push(mean);
        self.epochs_done += 1;
        Ok(mean)
    }

    fn batch_text(&self, epoch: usize, batch: &Batch) -> Result<BatchText, TrainError> {
        let cfg = &self.config;
        let style = cfg.prompt_style.template();
        let events = batch.event_refs(self.dataset);
        let frames = verb_frames(events.iter().copied(), &self.lexicon);
        let pool = noun_pool(events.iter().copied());
        let hn_epoch = if cfg.static_negatives { 0 } else { epoch as u64 + 1 };
        let mut out = BatchText {
            positives: Vec::with_capacity(events.len()),
            negatives: Vec::new(),
            owners: Vec::new(),
            actions: Vec::new(),
            skipped: 0,
        };
        for (j, (e, &(v, k))) in events.iter().zip(&batch.events).enumerate() {
            out.positives.push(positive_prompt(e, cfg.prompt_style)?.text);
            if cfg.act_p {
                out.actions.push(render_action_prompt(e).text);
            }
            let seed = |kind: u64| mix_seed(&[cfg.seed, kind, hn_epoch, v as u64, k as u64]);
            let mut push = |res: Result<Vec<crate::prompting::PromptRecord>, NegativeError>, want: usize| match res {
                Ok(recs) => {
                    for r in recs {
                        out.negatives.push(r.text);
                        out.owners.push(j);
                    }
                    Ok(())
                }
                Err(NegativeError::PoolExhausted { .. } | NegativeError::Unsatisfiable { .. }) => {
                    out.skipped += want;
                    Ok(())
                }
                Err(e) => Err(e),
            };
            if cfg.nvr > 0 {
                push(make_verb_role_negatives(e, &frames, cfg.nvr, seed(20), style), cfg.nvr)?;
            }
            if cfg.nrn > 0 {
                push(
                    make_role_noun_negatives(e, &pool, cfg.nrn, cfg.swap_fraction, seed(21), style),
                    cfg.nrn,
                )?;
            }
        }
        Ok(out)
    }

    /// Frame references of a batch, event-major, `T` per event.
    fn batch_frames(&self, epoch: usize, batch: &Batch) -> Vec<FrameRef> {
        let t = self.config.frames_per_event;
        batch
            .events
            .iter()
            .flat_map(|&(v, k)| {
                let e = &self.dataset.videos[v].events[k];
                let seed = mix_seed(&[self.config.seed, 30, epoch as u64, v as u64, k as u64]);
                subsample_frames(e, t, self.config.frame_sampling, seed)
            })
            .collect()
    }

    fn step(&mut self, epoch: usize, batch: &Batch) -> Result<StepRecord, TrainError> {
        let cfg = &self.config;
        let weights: LossWeights = cfg.loss_weights();
        let (b, p) = match cfg.batch_strategy {
            BatchStrategy::ShuffleEvents => (1, batch.events.len()),
            _ => (batch.videos.len(), batch.events.len() / batch.videos.len().max(1)),
        };
        let t = cfg.frames_per_event;
        let d = self.model.backbone.config.dim;
        let text = self.batch_text(epoch, batch)?;
        let grids = self.model.load_grids(self.frames, &self.batch_frames(epoch, batch))?;

        let model = &self.model;
        let mut g = Graph::new();
        let binding = model.store.bind(&mut g);
        let x = g.constant(Tensor::stack(&grids)?);
        let f = model.encode_grids(&mut g, &binding, x)?;
        let frame_embs = g.reshape(f, &[b, p, t, d])?;
        let vc = if weights.uses_vc() {
            Some(model.vc.forward(&mut g, &binding, frame_embs, model.normalize)?)
        } else {
            None
        };
        let embed = |g: &mut Graph<F>, texts: &[String]| {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            model.text.embed_graph(g, &binding, &model.store, &refs, model.normalize)
        };
        let event_text = embed(&mut g, &text.positives)?;
        let video_text = video_text_from_events(&mut g, event_text, b, model.normalize)?;
        let hard_negatives = if text.negatives.is_empty() {
            None
        } else {
            Some(HardNegatives {
                emb: embed(&mut g, &text.negatives)?,
                owner: Some(text.owners.clone()),
            })
        };
        let action_text = if cfg.act_p { Some(embed(&mut g, &text.actions)?) } else { None };
        let scale = model.logit_scale(&mut g, &binding);
        let inputs = LossBatchInputs {
            frame_embs,
            vc,
            event_text,
            video_text,
            hard_negatives,
            action_text,
            scale,
            normalize: model.normalize,
        };
        let (loss, report) = total_loss(&mut g, &inputs, &weights)?;
        if !report.total.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                step: self.global_step,
            });
        }
        let grads = g.backward(loss);
        let grads = model.store.collect_grads(&binding, &grads);
        if grads.iter().any(|(_, t)| !t.all_finite()) {
            return Err(TrainError::NonFinite {
                epoch,
                step: self.global_step,
            });
        }
        drop(g);
        self.optimizer.step(&mut self.model.store, &grads);
        self.model.clamp_scale();
        self.outcome.skipped_negatives += text.skipped;
        let rec = StepRecord {
            step: self.global_step,
            ce: report.ce,
            cv: report.cv,
            vce: report.vce,
            vcv: report.vcv,
            actp: report.actp,
            total: report.total,
        };
        self.global_step += 1;
        Ok(rec)
    }
}
