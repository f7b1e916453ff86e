//! Low-rank adapters on frozen linear weights: `W* = W + s·A·Bᵀ`.
//!
//! `A` is `[d_out, r]` with Gaussian init, `B` is `[d_in, r]` with zero init,
//! so an injected model starts out computing exactly what the frozen model does.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Block, WEIGHT_TYPES};
use crate::numerics::{Binding, Graph, ParamId, ParamStore, Real, ShapeError, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoraError {
    #[error("unknown LoRA target {0:?} (expected one of q, k, v, o, fc, proj)")]
    UnknownTarget(String),
    #[error("LoRA rank {rank} must be in 1..={max} for {layer}")]
    InvalidRank { rank: usize, max: usize, layer: String },
    #[error("{0} already carries an adapter")]
    AlreadyInjected(String),
    #[error("adapters are already merged")]
    AlreadyMerged,
    #[error("{0} is trainable; adapters only attach to frozen weights")]
    NotFrozen(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    Fc,
    Proj,
}

impl LoraTarget {
    pub fn as_str(self) -> &'static str {
        WEIGHT_TYPES[self as usize]
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoraTarget {
    type Err = LoraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "q" => LoraTarget::Q,
            "k" => LoraTarget::K,
            "v" => LoraTarget::V,
            "o" => LoraTarget::O,
            "fc" => LoraTarget::Fc,
            "proj" => LoraTarget::Proj,
            other => return Err(LoraError::UnknownTarget(other.to_string())),
        })
    }
}

pub fn parse_targets<S: AsRef<str>>(names: &[S]) -> Result<Vec<LoraTarget>, LoraError> {
    names.iter().map(|s| s.as_ref().parse()).collect()
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// Name of the adapted weight; the factors are `<target>.lora.A` / `.lora.B`.
    pub target: String,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scaling: f64,
}

impl LoraAdapter {
    /// `None` when the other store has no factors for this weight.
    pub fn rebind<F: Real>(&self, store: &ParamStore<F>) -> Option<Self> {
        Some(Self {
            target: self.target.clone(),
            a: store.id(&format!("{}.lora.A", self.target))?,
            b: store.id(&format!("{}.lora.B", self.target))?,
            rank: self.rank,
            scaling: self.scaling,
        })
    }

    /// `s·A·Bᵀ`, shaped like the adapted weight.
    pub fn delta<F: Real>(&self, store: &ParamStore<F>) -> Tensor<F> {
        let a = store.tensor(self.a);
        let b = store.tensor(self.b);
        let (d_out, d_in, r) = (a.shape()[0], b.shape()[0], self.rank);
        let s = F::lit(self.scaling);
        Tensor::from_fn(vec![d_out, d_in], |i| {
            let (o, c) = (i / d_in, i % d_in);
            let ar = &a.data()[o * r..(o + 1) * r];
            let br = &b.data()[c * r..(c + 1) * r];
            ar.iter().zip(br).fold(F::zero(), |acc, (&x, &y)| acc + x * y) * s
        })
    }
}

/// Attach trainable adapters to the selected (frozen) weight types of every block.
/// Targets are applied in canonical order regardless of how they are listed.
pub fn inject<F: Real>(
    blocks: &mut [Block],
    store: &mut ParamStore<F>,
    targets: &[LoraTarget],
    rank: usize,
    seed: u64,
) -> Result<Vec<LoraAdapter>, LoraError> {
    let mut targets = targets.to_vec();
    targets.sort();
    targets.dedup();
    for block in blocks.iter() {
        for (kind, lin) in block.linears() {
            if !targets.iter().any(|t| t.as_str() == kind) {
                continue;
            }
            let max = lin.in_dim.min(lin.out_dim);
            if rank == 0 || rank > max {
                return Err(LoraError::InvalidRank {
                    rank,
                    max,
                    layer: lin.name.clone(),
                });
            }
            if lin.adapter.is_some() {
                return Err(LoraError::AlreadyInjected(lin.name.clone()));
            }
            if !store.get(lin.weight).frozen {
                return Err(LoraError::NotFrozen(lin.name.clone()));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = Vec::new();
    for block in blocks.iter_mut() {
        for (kind, lin) in block.linears_mut() {
            if !targets.iter().any(|t| t.as_str() == kind) {
                continue;
            }
            let a = store.add(
                format!("{}.lora.A", lin.name),
                Tensor::randn(vec![lin.out_dim, rank], INIT_STD, &mut rng),
                false,
            );
            let b = store.add(format!("{}.lora.B", lin.name), Tensor::zeros(vec![lin.in_dim, rank]), false);
            let adapter = LoraAdapter {
                target: lin.name.clone(),
                a,
                b,
                rank,
                scaling: 1.0,
            };
            lin.adapter = Some(adapter.clone());
            adapters.push(adapter);
        }
    }
    Ok(adapters)
}

/// `x·Wᵀ + s·(x·B)·Aᵀ` without materialising the merged weight.
pub fn effective_forward<F: Real>(
    g: &mut Graph<F>,
    weight: Var,
    adapter: &LoraAdapter,
    p: &Binding,
    x: Var,
) -> Result<Var, ShapeError> {
    let base = g.matmul_nt(x, weight)?;
    let down = g.matmul(x, p.var(adapter.b))?;
    let up = g.matmul_nt(down, p.var(adapter.a))?;
    let up = if adapter.scaling == 1.0 {
        up
    } else {
        g.scale(up, F::lit(adapter.scaling))
    };
    g.add(base, up)
}

/// Fold every adapter of `blocks` into its weight. Returns new blocks and a
/// new store without the adapter factors; the inputs are left untouched.
pub fn merge<F: Real>(blocks: &[Block], store: &ParamStore<F>) -> Result<(Vec<Block>, ParamStore<F>), LoraError> {
    let adapters: Vec<&LoraAdapter> = blocks
        .iter()
        .flat_map(|b| b.linears().into_iter().filter_map(|(_, l)| l.adapter.as_ref()))
        .collect();
    if adapters.is_empty() {
        return Err(LoraError::AlreadyMerged);
    }
    let mut factors = std::collections::HashSet::new();
    for a in &adapters {
        factors.insert(a.a);
        factors.insert(a.b);
    }
    let mut merged = ParamStore::new();
    for (id, p) in store.iter() {
        if factors.contains(&id) {
            continue;
        }
        let mut t = p.tensor.clone();
        if let Some(a) = adapters.iter().find(|a| a.target == p.name) {
            let delta = a.delta(store);
            for (w, d) in t.data_mut().iter_mut().zip(delta.data()) {
                *w = *w + *d;
            }
        }
        merged.add(p.name.clone(), t, p.frozen);
    }
    Ok((blocks.iter().map(|b| b.rebind(&merged)).collect(), merged))
}

/// Number of adapter elements `Σ (d_out·r + d_in·r)` over adapted weights.
pub fn adapter_param_count(blocks: &[Block]) -> usize {
    blocks
        .iter()
        .flat_map(|b| b.linears().into_iter())
        .filter_map(|(_, l)| l.adapter.as_ref().map(|a| (l.out_dim + l.in_dim) * a.rank))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_parse() {
        assert_eq!(parse_targets(&["q", "k", "v"]).unwrap(), vec![LoraTarget::Q, LoraTarget::K, LoraTarget::V]);
        assert_eq!("fc".parse::<LoraTarget>().unwrap().as_str(), "fc");
        assert_eq!("qq".parse::<LoraTarget>(), Err(LoraError::UnknownTarget("qq".into())));
        let t: Vec<LoraTarget> = serde_json::from_str(r#"["proj","o"]"#).unwrap();
        assert_eq!(t, vec![LoraTarget::Proj, LoraTarget::O]);
    }
}
