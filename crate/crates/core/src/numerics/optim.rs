use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, ParamId, ParamStore, Real, Tensor};
use crate::error::FormatError;

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a single buffer. `step_index` counts from 1.
pub fn adamw_update<F: Real>(
    param: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    cfg: &AdamWConfig,
    step_index: u64,
) {
    let b1 = F::lit(cfg.beta1);
    let b2 = F::lit(cfg.beta2);
    let lr = F::lit(cfg.lr);
    let eps = F::lit(cfg.eps);
    let decay = F::one() - F::lit(cfg.lr * cfg.weight_decay);
    let t = step_index as i32;
    let bc1 = F::one() - b1.powi(t);
    let bc2 = F::one() - b2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (F::one() - b1) * g;
        v[i] = b2 * v[i] + (F::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<F> {
    step: u64,
    m: Vec<F>,
    v: Vec<F>,
}

/// AdamW with decoupled weight decay and per-parameter moment state.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    state: BTreeMap<ParamId, Moments<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update. Frozen parameters are skipped even if a gradient is
    /// supplied for them.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)]) {
        for (id, g) in grads {
            if store.get(*id).frozen {
                continue;
            }
            let n = g.len();
            let st = self.state.entry(*id).or_insert_with(|| Moments {
                step: 0,
                m: vec![F::zero(); n],
                v: vec![F::zero(); n],
            });
            st.step += 1;
            let param = store.tensor_mut(*id).data_mut();
            adamw_update(param, g.data(), &mut st.m, &mut st.v, &self.config, st.step);
        }
    }

    /// Number of updates applied to `id` so far.
    pub fn steps_taken(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |s| s.step)
    }

    /// Append moment state as `optim.{t,m,v}.<param name>` entries.
    pub fn export(&self, store: &ParamStore<F>, ckpt: &mut Checkpoint) {
        for (id, st) in &self.state {
            let name = &store.get(*id).name;
            let shape = store.tensor(*id).shape().to_vec();
            let to32 = |x: &[F]| {
                Tensor::new(shape.clone(), x.iter().map(|v| v.to_f32_lossy()).collect())
                    .expect("moment shape")
            };
            ckpt.entries
                .push((format!("optim.t.{name}"), Tensor::scalar(st.step as f32)));
            ckpt.entries.push((format!("optim.m.{name}"), to32(&st.m)));
            ckpt.entries.push((format!("optim.v.{name}"), to32(&st.v)));
        }
    }

    /// Restore moment state written by [`AdamW::export`].
    pub fn import(&mut self, store: &ParamStore<F>, ckpt: &Checkpoint) -> Result<(), FormatError> {
        self.state.clear();
        for (id, p) in store.iter() {
            let Some(t) = ckpt.get(&format!("optim.t.{}", p.name)) else {
                continue;
            };
            let fetch = |kind: &str| {
                ckpt.get(&format!("optim.{kind}.{}", p.name))
                    .filter(|t| t.len() == p.tensor.len())
                    .map(|t| t.data().iter().map(|&x| F::lit(x as f64)).collect::<Vec<F>>())
                    .ok_or_else(|| FormatError::Invalid(format!("missing optimizer {kind} for {}", p.name)))
            };
            self.state.insert(
                id,
                Moments {
                    step: t.data()[0] as u64,
                    m: fetch("m")?,
                    v: fetch("v")?,
                },
            );
        }
        Ok(())
    }
}
