use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Block, LayerNorm, Linear};
use crate::numerics::{Binding, Graph, ParamStore, Real, ShapeError, Tensor, Var};

/// Shape of the frozen ViT-style frame encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Tokens per frame grid.
    pub tokens: usize,
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// Seeds the random "pretrained" weights; independent of the training seed.
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            tokens: 16,
            input_dim: 64,
            dim: 64,
            heads: 4,
            layers: 4,
            mlp_ratio: 4,
            seed: 0x5eed_0001,
        }
    }
}

/// input projection, pre-norm blocks, token mean-pool, final norm, output projection.
/// Both projections are random orthogonal so the frozen map stays well conditioned.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub prefix: String,
    pub config: BackboneConfig,
    pub input_proj: Linear,
    pub blocks: Vec<Block>,
    pub ln_post: LayerNorm,
    pub output_proj: Linear,
}

impl Backbone {
    /// All weights are added frozen.
    pub fn new<F: Real>(store: &mut ParamStore<F>, prefix: &str, config: &BackboneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let input_proj = Linear::orthogonal(store, &format!("{prefix}.input_proj"), config.input_dim, d, true, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("{prefix}.block{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    true,
                    1.0 / (d as f64).sqrt(),
                    &mut rng,
                )
            })
            .collect();
        let ln_post = LayerNorm::new(store, &format!("{prefix}.ln_post"), d, true);
        let output_proj = Linear::orthogonal(store, &format!("{prefix}.output_proj"), d, d, true, &mut rng);
        Self {
            prefix: prefix.to_string(),
            config: config.clone(),
            input_proj,
            blocks,
            ln_post,
            output_proj,
        }
    }

    /// `tokens` is `[n, L, input_dim]`; `L` may differ from the configured grid size.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Binding,
        tokens: Var,
        normalize: bool,
    ) -> Result<Var, ShapeError> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 3 || shape[2] != self.config.input_dim {
            return Err(ShapeError::new("backbone", &shape, &[0, 0, self.config.input_dim]));
        }
        let mut x = self.input_proj.forward(g, p, tokens)?;
        for b in &self.blocks {
            x = b.forward(g, p, x)?;
        }
        let pooled = g.mean(x, 1)?;
        let pooled = self.ln_post.forward(g, p, pooled)?;
        let out = self.output_proj.forward(g, p, pooled)?;
        Ok(if normalize { g.l2_normalize(out) } else { out })
    }

    /// Embed grids outside any training graph.
    pub fn encode<F: Real>(
        &self,
        store: &ParamStore<F>,
        grids: &[Tensor<F>],
        normalize: bool,
    ) -> Result<Tensor<F>, ShapeError> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(grids.len() * self.config.dim);
        for chunk in grids.chunks(CHUNK) {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(Tensor::stack(chunk)?);
            let y = self.forward(&mut g, &p, x, normalize)?;
            out.extend_from_slice(g.value(y).data());
        }
        Tensor::new(vec![grids.len(), self.config.dim], out)
    }

    pub fn rebind<F: Real>(&self, store: &ParamStore<F>) -> Self {
        Self {
            prefix: self.prefix.clone(),
            config: self.config.clone(),
            input_proj: self.input_proj.rebind(store),
            blocks: self.blocks.iter().map(|b| b.rebind(store)).collect(),
            ln_post: self.ln_post.rebind(store),
            output_proj: self.output_proj.rebind(store),
        }
    }
}
