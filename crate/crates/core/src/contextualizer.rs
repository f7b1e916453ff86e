//! Video contextualizer: a transformer over one video's frame embeddings
//! interleaved with learnable video and event tokens.
//!
//! The sequence for `P` events of `T` frames is
//! `[v, e₁, f₁¹..f₁ᵀ, e₂, .., e_P, f_P¹..f_Pᵀ]`, length `1 + P(1 + T)`. Every
//! entry gets a type embedding (video / event / frame); event tokens and
//! frames also get the position of their event, frames additionally the
//! position of the frame within the event.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Block, LayerNorm};
use crate::numerics::{Binding, Graph, ParamId, ParamStore, Real, ShapeError, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VcConfig {
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub max_events: usize,
    pub max_frames: usize,
    /// Std of the token and position embeddings.
    pub embed_std: f64,
}

impl Default for VcConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            layers: 6,
            mlp_ratio: 4,
            max_events: 16,
            max_frames: 16,
            embed_std: 0.05,
        }
    }
}

const TYPE_VIDEO: usize = 0;
const TYPE_EVENT: usize = 1;
const TYPE_FRAME: usize = 2;

#[derive(Clone, Debug)]
pub struct VcEmbeddingTable {
    pub video_token: ParamId,
    /// Shared by every event slot; slots differ through their position embedding.
    pub event_token: ParamId,
    /// `[3, d]`: video, event, frame.
    pub type_embed: ParamId,
    /// `[max_events, d]`
    pub event_pos: ParamId,
    /// `[max_frames, d]`
    pub frame_pos: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct VcOutput {
    /// `[B, d]`
    pub v_hat: Var,
    /// `[B, P, d]`
    pub e_hat: Var,
    /// `[B, P, T, d]`
    pub f_hat: Var,
}

#[derive(Clone, Debug)]
pub struct VideoContextualizer {
    pub config: VcConfig,
    pub dim: usize,
    pub table: VcEmbeddingTable,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<Block>,
}

pub fn sequence_len(events: usize, frames: usize) -> usize {
    1 + events * (1 + frames)
}

/// `[n, rows]` selection matrix with a one in column `cols[i]` of row `i`.
fn one_hot<F: Real>(cols: &[usize], width: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(vec![cols.len(), width]);
    for (i, &c) in cols.iter().enumerate() {
        t.data_mut()[i * width + c] = F::one();
    }
    t
}

impl VideoContextualizer {
    /// Trainable parameters under `vc.`.
    pub fn new<F: Real>(store: &mut ParamStore<F>, dim: usize, config: &VcConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.embed_std;
        let table = VcEmbeddingTable {
            video_token: store.add("vc.video_token", Tensor::randn(vec![dim], s, &mut rng), false),
            event_token: store.add("vc.event_token", Tensor::randn(vec![dim], s, &mut rng), false),
            type_embed: store.add("vc.type_embed", Tensor::randn(vec![3, dim], s, &mut rng), false),
            event_pos: store.add("vc.event_pos", Tensor::randn(vec![config.max_events, dim], s, &mut rng), false),
            frame_pos: store.add("vc.frame_pos", Tensor::randn(vec![config.max_frames, dim], s, &mut rng), false),
        };
        let ln_pre = LayerNorm::new(store, "vc.ln_pre", dim, false);
        let blocks = (0..config.layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("vc.block{i}"),
                    dim,
                    config.heads,
                    config.mlp_ratio,
                    false,
                    1.0 / (dim as f64).sqrt(),
                    &mut rng,
                )
            })
            .collect();
        Self {
            config: config.clone(),
            dim,
            table,
            ln_pre,
            blocks,
        }
    }

    /// Normalised input sequence `[B, 1 + P(1+T), d]` for frames `[B, P, T, d]`.
    pub fn assemble_sequence<F: Real>(&self, g: &mut Graph<F>, p: &Binding, frames: Var) -> Result<Var, ShapeError> {
        let shape = g.shape(frames).to_vec();
        let d = self.dim;
        if shape.len() != 4 || shape[3] != d {
            return Err(ShapeError::new("assemble_sequence", &shape, &[0, 0, 0, d]));
        }
        let (b, np, nt) = (shape[0], shape[1], shape[2]);
        if np > self.config.max_events || nt > self.config.max_frames {
            return Err(ShapeError::new(
                "assemble_sequence",
                &shape,
                &[b, self.config.max_events, self.config.max_frames, d],
            ));
        }
        let t = &self.table;
        let types = p.var(t.type_embed);
        let type_of = |g: &mut Graph<F>, k: usize| -> Result<Var, ShapeError> {
            let r = g.slice(types, 0, k, 1)?;
            g.reshape(r, &[d])
        };
        let ty_v = type_of(g, TYPE_VIDEO)?;
        let ty_e = type_of(g, TYPE_EVENT)?;
        let ty_f = type_of(g, TYPE_FRAME)?;

        // Frame entries: f + type + event position + frame position.
        let ev_idx: Vec<usize> = (0..np).flat_map(|k| std::iter::repeat_n(k, nt)).collect();
        let fr_idx: Vec<usize> = (0..np).flat_map(|_| 0..nt).collect();
        let sel_e = g.constant(one_hot(&ev_idx, self.config.max_events));
        let sel_f = g.constant(one_hot(&fr_idx, self.config.max_frames));
        let pe = g.matmul(sel_e, p.var(t.event_pos))?;
        let pf = g.matmul(sel_f, p.var(t.frame_pos))?;
        let pos = g.add(pe, pf)?;
        let pos = g.add(pos, ty_f)?;
        let pos = g.reshape(pos, &[np, nt, d])?;
        let f = g.add(frames, pos)?;

        // Event entries: shared token + type + event position, `[P, d]`.
        let sel_p = g.constant(one_hot(&(0..np).collect::<Vec<_>>(), self.config.max_events));
        let pe = g.matmul(sel_p, p.var(t.event_pos))?;
        let ev = g.add(pe, p.var(t.event_token))?;
        let ev = g.add(ev, ty_e)?;

        let zeros = g.constant(Tensor::zeros(vec![b, 1, d]));
        let v = g.add(p.var(t.video_token), ty_v)?;
        let v = g.add(zeros, v)?;

        let mut parts = Vec::with_capacity(1 + 2 * np);
        parts.push(v);
        for k in 0..np {
            let e = g.slice(ev, 0, k, 1)?;
            parts.push(g.add(zeros, e)?);
            let fk = g.slice(f, 1, k, 1)?;
            parts.push(g.reshape(fk, &[b, nt, d])?);
        }
        let seq = g.concat(&parts, 1)?;
        self.ln_pre.forward(g, p, seq)
    }

    /// Contextualised video, event and frame representations for frames
    /// `[B, P, T, d]`. `v_hat` and `e_hat` are unit-normalised when `normalize`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Binding,
        frames: Var,
        normalize: bool,
    ) -> Result<VcOutput, ShapeError> {
        let shape = g.shape(frames).to_vec();
        let mut x = self.assemble_sequence(g, p, frames)?;
        let (b, np, nt, d) = (shape[0], shape[1], shape[2], shape[3]);
        for blk in &self.blocks {
            x = blk.forward(g, p, x)?;
        }
        let v_hat = g.slice(x, 1, 0, 1)?;
        let v_hat = g.reshape(v_hat, &[b, d])?;
        let rest = g.slice(x, 1, 1, np * (1 + nt))?;
        let rest = g.reshape(rest, &[b, np, 1 + nt, d])?;
        let e_hat = g.slice(rest, 2, 0, 1)?;
        let e_hat = g.reshape(e_hat, &[b, np, d])?;
        let f_hat = g.slice(rest, 2, 1, nt)?;
        let (v_hat, e_hat) = if normalize {
            (g.l2_normalize(v_hat), g.l2_normalize(e_hat))
        } else {
            (v_hat, e_hat)
        };
        Ok(VcOutput { v_hat, e_hat, f_hat })
    }

    pub fn rebind<F: Real>(&self, store: &ParamStore<F>) -> Self {
        let id = |n: &str| store.id(n).unwrap_or_else(|| panic!("parameter {n} missing"));
        Self {
            config: self.config.clone(),
            dim: self.dim,
            table: VcEmbeddingTable {
                video_token: id("vc.video_token"),
                event_token: id("vc.event_token"),
                type_embed: id("vc.type_embed"),
                event_pos: id("vc.event_pos"),
                frame_pos: id("vc.frame_pos"),
            },
            ln_pre: self.ln_pre.rebind(store),
            blocks: self.blocks.iter().map(|b| b.rebind(store)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ParamStore<f64>, VideoContextualizer) {
        let mut store = ParamStore::new();
        let cfg = VcConfig {
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            max_events: 4,
            max_frames: 4,
            embed_std: 0.5,
        };
        let vc = VideoContextualizer::new(&mut store, 4, &cfg, 3);
        (store, vc)
    }

    #[test]
    fn sequence_layout() {
        assert_eq!(sequence_len(5, 4), 26);
        let (store, vc) = small();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let frames = g.constant(Tensor::from_fn(vec![2, 3, 2, 4], |i| i as f64 * 0.01));
        let seq = vc.assemble_sequence(&mut g, &p, frames).unwrap();
        assert_eq!(g.shape(seq), &[2, 10, 4]);
        let out = vc.forward(&mut g, &p, frames, true).unwrap();
        assert_eq!(g.shape(out.v_hat), &[2, 4]);
        assert_eq!(g.shape(out.e_hat), &[2, 3, 4]);
        assert_eq!(g.shape(out.f_hat), &[2, 3, 2, 4]);
    }

    #[test]
    fn too_many_events_is_a_shape_error() {
        let (store, vc) = small();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let frames = g.constant(Tensor::zeros(vec![1, 5, 1, 4]));
        assert!(vc.assemble_sequence(&mut g, &p, frames).is_err());
    }
}
