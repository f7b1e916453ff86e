use std::collections::HashMap;
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use crate::nn::{Block, Linear};
use crate::numerics::{Binding, Graph, ParamStore, Real, ShapeError, Tensor, Var};

/// Optional transformer over token vectors, used when the text side is adapted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextTowerConfig {
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TextTowerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub token_dim: usize,
    pub dim: usize,
    pub seed: u64,
    pub tower: Option<TextTowerConfig>,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            dim: 64,
            seed: 0x5eed_0002,
            tower: None,
        }
    }
}

/// Whitespace-separated tokens, byte-exact.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> + '_ {
    text.split_whitespace()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Unit-norm Gaussian direction for a token, keyed by its FNV-1a hash.
pub fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token.as_bytes()) ^ seed);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / n).collect()
}

/// Frozen text encoder: hashed token vectors, mean-pooled (or run through a
/// small transformer), then a random orthogonal linear map.
#[derive(Debug)]
pub struct TextEncoder<F: Real> {
    pub config: TextConfig,
    pub proj: Linear,
    pub tower: Option<Backbone>,
    cache: RwLock<HashMap<String, Vec<F>>>,
}

impl<F: Real> Clone for TextEncoder<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            proj: self.proj.clone(),
            tower: self.tower.clone(),
            cache: RwLock::new(self.cache.read().expect("cache").clone()),
        }
    }
}

impl<F: Real> TextEncoder<F> {
    pub fn new(store: &mut ParamStore<F>, config: &TextConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tower = config.tower.as_ref().map(|t| {
            Backbone::new(
                store,
                "text.tower",
                &BackboneConfig {
                    tokens: 0,
                    input_dim: config.token_dim,
                    dim: config.token_dim,
                    heads: t.heads,
                    layers: t.layers,
                    mlp_ratio: t.mlp_ratio,
                    seed: config.seed ^ 0x7077_e200,
                },
            )
        });
        let proj = Linear::orthogonal(store, "text.proj", config.token_dim, config.dim, true, &mut rng);
        Self {
            config: config.clone(),
            proj,
            tower,
            cache: RwLock::new(HashMap::new()),
        }
    }

    /// Tower blocks, for adapter injection.
    pub fn tower_blocks_mut(&mut self) -> Option<&mut [Block]> {
        self.tower.as_mut().map(|t| t.blocks.as_mut_slice())
    }

    fn adapted(&self) -> bool {
        self.tower
            .as_ref()
            .is_some_and(|t| t.blocks.iter().any(|b| b.linears().iter().any(|(_, l)| l.adapter.is_some())))
    }

    /// `[L, token_dim]`; an empty prompt is a single empty-string token.
    pub fn token_grid(&self, prompt: &str) -> Tensor<F> {
        let mut toks: Vec<&str> = tokenize(prompt).collect();
        if toks.is_empty() {
            toks.push("");
        }
        let d = self.config.token_dim;
        let mut data = Vec::with_capacity(toks.len() * d);
        for t in &toks {
            data.extend(token_vector(t, d, self.config.seed).into_iter().map(F::lit));
        }
        Tensor::new(vec![toks.len(), d], data).expect("grid shape")
    }

    fn forward_group(
        &self,
        g: &mut Graph<F>,
        p: &Binding,
        grids: &[Tensor<F>],
        normalize: bool,
    ) -> Result<Var, ShapeError> {
        let x = g.constant(Tensor::stack(grids)?);
        let pooled = match &self.tower {
            Some(t) => t.forward(g, p, x, false)?,
            None => g.mean(x, 1)?,
        };
        let y = self.proj.forward(g, p, pooled)?;
        Ok(if normalize { g.l2_normalize(y) } else { y })
    }

    /// Embeddings `[n, dim]` as a graph value. Differentiable through the
    /// tower's adapters when it has any; a constant otherwise.
    pub fn embed_graph(
        &self,
        g: &mut Graph<F>,
        p: &Binding,
        store: &ParamStore<F>,
        prompts: &[&str],
        normalize: bool,
    ) -> Result<Var, ShapeError> {
        if !self.adapted() {
            let t = self.embed_batch(store, prompts, normalize)?;
            return Ok(g.constant(t));
        }
        // Batch prompts of equal token count through the tower together.
        let grids: Vec<Tensor<F>> = prompts.iter().map(|s| self.token_grid(s)).collect();
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, t) in grids.iter().enumerate() {
            groups.entry(t.shape()[0]).or_default().push(i);
        }
        let mut rows: Vec<Option<Var>> = vec![None; prompts.len()];
        for idx in groups.values() {
            let batch: Vec<Tensor<F>> = idx.iter().map(|&i| grids[i].clone()).collect();
            let out = self.forward_group(g, p, &batch, normalize)?;
            for (j, &i) in idx.iter().enumerate() {
                rows[i] = Some(g.slice(out, 0, j, 1)?);
            }
        }
        let rows: Vec<Var> = rows.into_iter().map(|r| r.expect("every prompt grouped")).collect();
        match rows.len() {
            0 => Ok(g.constant(Tensor::zeros(vec![0, self.config.dim]))),
            1 => Ok(rows[0]),
            _ => g.concat(&rows, 0),
        }
    }

    /// Embeddings `[n, dim]` outside any training graph. Cached per prompt
    /// while the tower carries no adapters.
    pub fn embed_batch(&self, store: &ParamStore<F>, prompts: &[&str], normalize: bool) -> Result<Tensor<F>, ShapeError> {
        let d = self.config.dim;
        let cacheable = !self.adapted();
        let mut out = vec![F::zero(); prompts.len() * d];
        let mut missing = Vec::new();
        {
            let cache = self.cache.read().expect("cache");
            for (i, s) in prompts.iter().enumerate() {
                match cache.get(*s).filter(|_| cacheable) {
                    Some(v) => out[i * d..(i + 1) * d].copy_from_slice(v),
                    None => missing.push(i),
                }
            }
        }
        if !missing.is_empty() {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let mut by_len: std::collections::BTreeMap<usize, Vec<(usize, Tensor<F>)>> = Default::default();
            for &i in &missing {
                let grid = self.token_grid(prompts[i]);
                by_len.entry(grid.shape()[0]).or_default().push((i, grid));
            }
            let mut cache = self.cache.write().expect("cache");
            for items in by_len.values() {
                let grids: Vec<Tensor<F>> = items.iter().map(|(_, t)| t.clone()).collect();
                let y = self.forward_group(&mut g, &p, &grids, false)?;
                let vals = g.value(y).data();
                for (j, (i, _)) in items.iter().enumerate() {
                    let row = &vals[j * d..(j + 1) * d];
                    out[i * d..(i + 1) * d].copy_from_slice(row);
                    if cacheable {
                        cache.insert(prompts[*i].to_string(), row.to_vec());
                    }
                }
            }
        }
        let t = Tensor::new(vec![prompts.len(), d], out)?;
        Ok(if normalize { t.l2_normalized_rows() } else { t })
    }

    pub fn embed(&self, store: &ParamStore<F>, prompt: &str, normalize: bool) -> Result<Tensor<F>, ShapeError> {
        let t = self.embed_batch(store, &[prompt], normalize)?;
        t.reshape(vec![self.config.dim])
    }

    /// Fresh encoder over another store, with an empty cache.
    pub fn rebind(&self, store: &ParamStore<F>) -> Self {
        Self {
            config: self.config.clone(),
            proj: self.proj.rebind(store),
            tower: self.tower.as_ref().map(|t| t.rebind(store)),
            cache: RwLock::new(HashMap::new()),
        }
    }
}
