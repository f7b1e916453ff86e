//! Layers shared by the frozen backbone, the text tower and the contextualizer.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::lora::{self, LoraAdapter};
use crate::numerics::{Binding, Graph, ParamId, ParamStore, Real, ShapeError, Tensor, Var};

/// `y = x·Wᵀ + b` with `W` stored `[out, in]`, optionally low-rank adapted.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<LoraAdapter>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        frozen: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(name, Tensor::randn(vec![out_dim, in_dim], std, rng), frozen);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), frozen));
        Self {
            name: name.to_string(),
            weight,
            bias,
            adapter: None,
            in_dim,
            out_dim,
        }
    }

    /// Bias-free layer with a random orthogonal weight.
    pub fn orthogonal<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        frozen: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(name, orthogonal(out_dim, in_dim, rng).cast(), frozen);
        Self {
            name: name.to_string(),
            weight,
            bias: None,
            adapter: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var) -> Result<Var, ShapeError> {
        let w = p.var(self.weight);
        let y = match &self.adapter {
            Some(a) => lora::effective_forward(g, w, a, p, x)?,
            None => g.matmul_nt(x, w)?,
        };
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }

    /// Same layer with ids looked up by name in another store. Adapters
    /// whose factors are absent there are dropped.
    pub fn rebind<F: Real>(&self, store: &ParamStore<F>) -> Self {
        let id = |n: &str| store.id(n).unwrap_or_else(|| panic!("parameter {n} missing"));
        Self {
            name: self.name.clone(),
            weight: id(&self.name),
            bias: self.bias.map(|_| id(&format!("{}.bias", self.name))),
            adapter: self.adapter.as_ref().and_then(|a| a.rebind(store)),
            in_dim: self.in_dim,
            out_dim: self.out_dim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, frozen: bool) -> Self {
        Self {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![dim], F::one()), frozen),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), frozen),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var) -> Result<Var, ShapeError> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }

    pub fn rebind<F: Real>(&self, store: &ParamStore<F>) -> Self {
        Self {
            name: self.name.clone(),
            gamma: store.id(&format!("{}.gamma", self.name)).expect("gamma"),
            beta: store.id(&format!("{}.beta", self.name)).expect("beta"),
        }
    }
}

/// Pre-norm transformer encoder block with full (unmasked) self-attention.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc: Linear,
    pub proj: Linear,
    pub heads: usize,
}

/// Weight-type names accepted by LoRA injection.
pub const WEIGHT_TYPES: [&str; 6] = ["q", "k", "v", "o", "fc", "proj"];

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        frozen: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        let hidden = dim * mlp_ratio;
        let mut lin = |name: &str, i: usize, o: usize, std: f64, rng: &mut _| {
            Linear::new(store, &format!("{prefix}.{name}"), i, o, true, frozen, std, rng)
        };
        let q = lin("attn.q", dim, dim, std, rng);
        let k = lin("attn.k", dim, dim, std, rng);
        let v = lin("attn.v", dim, dim, std, rng);
        let o = lin("attn.o", dim, dim, std, rng);
        let fc = lin("mlp.fc", dim, hidden, std, rng);
        let proj = lin("mlp.proj", hidden, dim, std / (mlp_ratio as f64).sqrt(), rng);
        Self {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), dim, frozen),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dim, frozen),
            q,
            k,
            v,
            o,
            fc,
            proj,
            heads,
        }
    }

    pub fn linears(&self) -> [(&'static str, &Linear); 6] {
        [
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("o", &self.o),
            ("fc", &self.fc),
            ("proj", &self.proj),
        ]
    }

    pub fn linears_mut(&mut self) -> [(&'static str, &mut Linear); 6] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
            ("fc", &mut self.fc),
            ("proj", &mut self.proj),
        ]
    }

    /// `x` is `[.., L, d]`; attention runs over `L` independently per leading index.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var) -> Result<Var, ShapeError> {
        let attn = self.attention(g, p, x)?;
        let x = g.add(x, attn)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.fc.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.proj.forward(g, p, h)?;
        g.add(x, h)
    }

    fn attention<F: Real>(&self, g: &mut Graph<F>, p: &Binding, x: Var) -> Result<Var, ShapeError> {
        let h = self.ln1.forward(g, p, x)?;
        let q = self.q.forward(g, p, h)?;
        let k = self.k.forward(g, p, h)?;
        let v = self.v.forward(g, p, h)?;
        let dim = *g.shape(q).last().expect("rank");
        let axis = g.shape(q).len() - 1;
        let dh = dim / self.heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice(q, axis, head * dh, dh)?;
            let kh = g.slice(k, axis, head * dh, dh)?;
            let vh = g.slice(v, axis, head * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores);
            outs.push(g.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs, axis)? };
        self.o.forward(g, p, merged)
    }

    pub fn rebind<F: Real>(&self, store: &ParamStore<F>) -> Self {
        Self {
            ln1: self.ln1.rebind(store),
            q: self.q.rebind(store),
            k: self.k.rebind(store),
            v: self.v.rebind(store),
            o: self.o.rebind(store),
            ln2: self.ln2.rebind(store),
            fc: self.fc.rebind(store),
            proj: self.proj.rebind(store),
            heads: self.heads,
        }
    }
}

/// Orthonormalise columns by modified Gram-Schmidt; returns them as a
/// row-major `[rows, cols]` tensor.
pub(crate) fn gram_schmidt(mut c: Vec<Vec<f64>>) -> Tensor<f64> {
    let (rows, cols) = (c[0].len(), c.len());
    for j in 0..cols {
        for i in 0..j {
            let (head, tail) = c.split_at_mut(j);
            let dot: f64 = head[i].iter().zip(&tail[0]).map(|(a, b)| a * b).sum();
            for (x, y) in tail[0].iter_mut().zip(&head[i]) {
                *x -= dot * y;
            }
        }
        let n = c[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        c[j].iter_mut().for_each(|x| *x /= n);
    }
    Tensor::from_fn(vec![rows, cols], |k| c[k % cols][k / cols])
}

/// Random `[rows, cols]` matrix with orthonormal columns (or rows, when wide).
pub fn orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let (long, short) = (rows.max(cols), rows.min(cols));
    let c: Vec<Vec<f64>> = (0..short)
        .map(|_| (0..long).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let q = gram_schmidt(c);
    if rows >= cols {
        q
    } else {
        Tensor::from_fn(vec![rows, cols], |k| q.data()[(k % cols) * rows + k / cols])
    }
}
