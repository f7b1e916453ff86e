//! Contrastive objectives.
//!
//! `L(q, k)` is the InfoNCE loss with query `i` matched to key `i` and every
//! other key in the batch as a negative; each term used in training is the
//! symmetric sum `L(q, k) + L(k, q)`. The combination is
//!
//! ```text
//! total = CE + VCE + λ·(CV + VCV) [+ ActP]
//! ```
//!
//! where CE/CV use mean-pooled frame embeddings and VCE/VCV the
//! contextualizer's event and video outputs. Hard-negative prompts extend the
//! denominator of the visual→text half of the event-level terms.

use serde::{Deserialize, Serialize};

use crate::contextualizer::VcOutput;
use crate::numerics::{Graph, Real, ShapeError, Tensor, Var};

/// Multiplier applied to cosine similarities.
#[derive(Clone, Copy, Debug)]
pub enum LogitScale<F> {
    Fixed(F),
    /// A one-element graph value (already exponentiated).
    Learned(Var),
}

impl<F: Real> LogitScale<F> {
    fn apply(&self, g: &mut Graph<F>, x: Var) -> Result<Var, ShapeError> {
        match *self {
            LogitScale::Fixed(s) if s == F::one() => Ok(x),
            LogitScale::Fixed(s) => Ok(g.scale(x, s)),
            LogitScale::Learned(s) => g.mul_scalar(x, s),
        }
    }
}

/// Hard-negative text embeddings `[M, d]`. With `owner`, row `m` only
/// competes for query `owner[m]`; without, every row is a negative for
/// every query.
#[derive(Clone, Debug)]
pub struct HardNegatives {
    pub emb: Var,
    pub owner: Option<Vec<usize>>,
}

impl HardNegatives {
    /// `H` negatives per query from an `[N, H, d]` value.
    pub fn per_query<F: Real>(g: &mut Graph<F>, negs: Var) -> Result<Self, ShapeError> {
        let s = g.shape(negs).to_vec();
        if s.len() != 3 {
            return Err(ShapeError::new("hard negatives", &s, &[0, 0, 0]));
        }
        let emb = g.reshape(negs, &[s[0] * s[1], s[2]])?;
        let owner = (0..s[0]).flat_map(|i| std::iter::repeat_n(i, s[1])).collect();
        Ok(Self {
            emb,
            owner: Some(owner),
        })
    }

    /// Same rows, shared by all queries.
    pub fn shared(&self) -> Self {
        Self {
            emb: self.emb,
            owner: None,
        }
    }
}

/// `mean_i −log(exp(s·qᵢ·kᵢ) / (Σⱼ exp(s·qᵢ·kⱼ) + Σₘ exp(s·qᵢ·nₘ)))`, where
/// `m` runs over the negatives available to query `i`.
pub fn info_nce<F: Real>(
    g: &mut Graph<F>,
    query: Var,
    keys: Var,
    negatives: Option<&HardNegatives>,
    scale: &LogitScale<F>,
) -> Result<Var, ShapeError> {
    nce_rows(g, query, keys, query, negatives, scale)
}

/// Rows `rows_q·keysᵀ`, extended with `neg_q·negativesᵀ`.
fn nce_rows<F: Real>(
    g: &mut Graph<F>,
    rows_q: Var,
    keys: Var,
    neg_q: Var,
    negatives: Option<&HardNegatives>,
    scale: &LogitScale<F>,
) -> Result<Var, ShapeError> {
    let qs = g.shape(rows_q).to_vec();
    let ks = g.shape(keys).to_vec();
    if qs.len() != 2 || qs != ks {
        return Err(ShapeError::new("info_nce", &qs, &ks));
    }
    let n = qs[0];
    let sim = g.matmul_nt(rows_q, keys)?;
    let mut logits = scale.apply(g, sim)?;
    if let Some(neg) = negatives {
        let m = g.shape(neg.emb)[0];
        if m > 0 {
            let sn = g.matmul_nt(neg_q, neg.emb)?;
            let mut sn = scale.apply(g, sn)?;
            if let Some(owner) = &neg.owner {
                if owner.len() != m {
                    return Err(ShapeError::new("info_nce negatives", &[owner.len()], &[m]));
                }
                // Added after scaling so the backward pass never sees 0·∞.
                let mask = Tensor::from_fn(vec![n, m], |i| {
                    if owner[i % m] == i / m {
                        F::zero()
                    } else {
                        F::neg_infinity()
                    }
                });
                let mask = g.constant(mask);
                sn = g.add(sn, mask)?;
            }
            logits = g.concat(&[logits, sn], 1)?;
        }
    }
    let lse = g.logsumexp(logits);
    let diag: Vec<usize> = (0..n).collect();
    let pos = g.pick(logits, &diag)?;
    let per = g.sub(lse, pos)?;
    Ok(g.mean_all(per))
}

/// `L(q, k) + L(k, q)`. Negatives extend the `q → k` half, and also the
/// `k → q` half (as similarities to the paired query) when `both_directions`.
pub fn symmetric_info_nce<F: Real>(
    g: &mut Graph<F>,
    query: Var,
    keys: Var,
    negatives: Option<&HardNegatives>,
    both_directions: bool,
    scale: &LogitScale<F>,
) -> Result<Var, ShapeError> {
    let forward = info_nce(g, query, keys, negatives, scale)?;
    let back_neg = negatives.filter(|_| both_directions);
    let backward = nce_rows(g, keys, query, query, back_neg, scale)?;
    g.add(forward, backward)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub ce: bool,
    pub cv: bool,
    pub vce: bool,
    pub vcv: bool,
    pub use_hn: bool,
    /// Every hard negative in the batch competes for every event.
    pub extra_negatives: bool,
    pub act_p: bool,
    pub hn_both_directions: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.25,
            ce: true,
            cv: true,
            vce: true,
            vcv: true,
            use_hn: true,
            extra_negatives: false,
            act_p: false,
            hn_both_directions: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        Ok(())
    }

    pub fn uses_vc(&self) -> bool {
        self.vce || self.vcv
    }
}

/// Everything one batch contributes to the loss.
#[derive(Clone, Debug)]
pub struct LossBatchInputs<F> {
    /// Per-frame embeddings `[B, P, T, d]` before the contextualizer.
    pub frame_embs: Var,
    pub vc: Option<VcOutput>,
    /// `[B·P, d]` (or `[B, P, d]`), event-major within each video.
    pub event_text: Var,
    /// `[B, d]`
    pub video_text: Var,
    /// Owners index flattened events.
    pub hard_negatives: Option<HardNegatives>,
    /// Action-only prompts `[B·P, d]`.
    pub action_text: Option<Var>,
    pub scale: LogitScale<F>,
    pub normalize: bool,
}

/// Per-term values of one evaluation; `None` marks a disabled term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: Option<f64>,
    pub cv: Option<f64>,
    pub vce: Option<f64>,
    pub vcv: Option<f64>,
    pub actp: Option<f64>,
    pub total: f64,
}

impl LossReport {
    /// `Σ weight·term`, which equals `total`.
    pub fn weighted_sum(&self, lambda: f64) -> f64 {
        let v = |x: Option<f64>| x.unwrap_or(0.0);
        v(self.ce) + v(self.vce) + lambda * (v(self.cv) + v(self.vcv)) + v(self.actp)
    }
}

/// `l2(mean_k t_ik)` from flattened event texts.
pub fn video_text_from_events<F: Real>(
    g: &mut Graph<F>,
    event_text: Var,
    videos: usize,
    normalize: bool,
) -> Result<Var, ShapeError> {
    let s = g.shape(event_text).to_vec();
    let d = *s.last().expect("rank");
    let n: usize = s[..s.len() - 1].iter().product();
    if videos == 0 || !n.is_multiple_of(videos) {
        return Err(ShapeError::new("video_text", &s, &[videos, 0, d]));
    }
    let x = g.reshape(event_text, &[videos, n / videos, d])?;
    let m = g.mean(x, 1)?;
    Ok(if normalize { g.l2_normalize(m) } else { m })
}

struct Dims {
    b: usize,
    p: usize,
    t: usize,
    d: usize,
}

fn dims<F: Real>(g: &Graph<F>, inputs: &LossBatchInputs<F>) -> Result<Dims, ShapeError> {
    let s = g.shape(inputs.frame_embs);
    if s.len() != 4 {
        return Err(ShapeError::new("frame_embs", s, &[0, 0, 0, 0]));
    }
    Ok(Dims {
        b: s[0],
        p: s[1],
        t: s[2],
        d: s[3],
    })
}

fn flat_events<F: Real>(g: &mut Graph<F>, x: Var, n: usize, d: usize) -> Result<Var, ShapeError> {
    if g.shape(x) == [n, d] {
        Ok(x)
    } else {
        g.reshape(x, &[n, d])
    }
}

/// Mean-pooled frames per event, `[B·P, d]`.
pub fn clip_event_query<F: Real>(g: &mut Graph<F>, inputs: &LossBatchInputs<F>) -> Result<Var, ShapeError> {
    let Dims { b, p, t, d } = dims(g, inputs)?;
    let x = g.reshape(inputs.frame_embs, &[b * p, t, d])?;
    let m = g.mean(x, 1)?;
    Ok(if inputs.normalize { g.l2_normalize(m) } else { m })
}

/// Mean-pooled frames per video, `[B, d]`.
pub fn clip_video_query<F: Real>(g: &mut Graph<F>, inputs: &LossBatchInputs<F>) -> Result<Var, ShapeError> {
    let Dims { b, p, t, d } = dims(g, inputs)?;
    let x = g.reshape(inputs.frame_embs, &[b, p * t, d])?;
    let m = g.mean(x, 1)?;
    Ok(if inputs.normalize { g.l2_normalize(m) } else { m })
}

fn negatives_for(inputs: &LossBatchInputs<impl Real>, w: &LossWeights) -> Option<HardNegatives> {
    let hn = inputs.hard_negatives.as_ref().filter(|_| w.use_hn)?;
    Some(if w.extra_negatives { hn.shared() } else { hn.clone() })
}

pub fn clip_event_loss<F: Real>(g: &mut Graph<F>, inputs: &LossBatchInputs<F>, w: &LossWeights) -> Result<Var, ShapeError> {
    let Dims { b, p, d, .. } = dims(g, inputs)?;
    let q = clip_event_query(g, inputs)?;
    let k = flat_events(g, inputs.event_text, b * p, d)?;
    let neg = negatives_for(inputs, w);
    symmetric_info_nce(g, q, k, neg.as_ref(), w.hn_both_directions, &inputs.scale)
}

pub fn clip_video_loss<F: Real>(g: &mut Graph<F>, inputs: &LossBatchInputs<F>) -> Result<Var, ShapeError> {
    let q = clip_video_query(g, inputs)?;
    symmetric_info_nce(g, q, inputs.video_text, None, false, &inputs.scale)
}

fn vc_of<F: Real>(inputs: &LossBatchInputs<F>, g: &Graph<F>) -> Result<VcOutput, ShapeError> {
    inputs
        .vc
        .ok_or_else(|| ShapeError::new("contextualizer output missing", g.shape(inputs.frame_embs), &[]))
}

pub fn vc_event_loss<F: Real>(g: &mut Graph<F>, inputs: &LossBatchInputs<F>, w: &LossWeights) -> Result<Var, ShapeError> {
    let Dims { b, p, d, .. } = dims(g, inputs)?;
    let vc = vc_of(inputs, g)?;
    let q = g.reshape(vc.e_hat, &[b * p, d])?;
    let k = flat_events(g, inputs.event_text, b * p, d)?;
    let neg = negatives_for(inputs, w);
    symmetric_info_nce(g, q, k, neg.as_ref(), w.hn_both_directions, &inputs.scale)
}

pub fn vc_video_loss<F: Real>(g: &mut Graph<F>, inputs: &LossBatchInputs<F>) -> Result<Var, ShapeError> {
    let vc = vc_of(inputs, g)?;
    symmetric_info_nce(g, vc.v_hat, inputs.video_text, None, false, &inputs.scale)
}

/// Event-level loss against action-only prompts, on the contextualised
/// event outputs when present and on pooled frames otherwise.
pub fn action_prompt_loss<F: Real>(g: &mut Graph<F>, inputs: &LossBatchInputs<F>) -> Result<Var, ShapeError> {
    let Dims { b, p, d, .. } = dims(g, inputs)?;
    let q = match inputs.vc {
        Some(vc) => g.reshape(vc.e_hat, &[b * p, d])?,
        None => clip_event_query(g, inputs)?,
    };
    let text = inputs
        .action_text
        .ok_or_else(|| ShapeError::new("action prompts missing", &[b * p, d], &[]))?;
    let k = flat_events(g, text, b * p, d)?;
    symmetric_info_nce(g, q, k, None, false, &inputs.scale)
}

/// Weighted sum of the enabled terms. Contextualizer terms need `inputs.vc`.
pub fn total_loss<F: Real>(
    g: &mut Graph<F>,
    inputs: &LossBatchInputs<F>,
    w: &LossWeights,
) -> Result<(Var, LossReport), ShapeError> {
    let mut report = LossReport::default();
    let mut terms: Vec<Var> = Vec::with_capacity(5);
    let lambda = F::lit(w.lambda);
    let mut push = |g: &mut Graph<F>, v: Var, weight: Option<F>, slot: &mut Option<f64>| {
        *slot = Some(g.scalar(v).to_f64().unwrap_or(f64::NAN));
        terms.push(match weight {
            Some(c) => g.scale(v, c),
            None => v,
        });
    };
    if w.ce {
        let v = clip_event_loss(g, inputs, w)?;
        push(g, v, None, &mut report.ce);
    }
    if w.cv {
        let v = clip_video_loss(g, inputs)?;
        push(g, v, Some(lambda), &mut report.cv);
    }
    if w.vce {
        let v = vc_event_loss(g, inputs, w)?;
        push(g, v, None, &mut report.vce);
    }
    if w.vcv {
        let v = vc_video_loss(g, inputs)?;
        push(g, v, Some(lambda), &mut report.vcv);
    }
    if w.act_p {
        let v = action_prompt_loss(g, inputs)?;
        push(g, v, None, &mut report.actp);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => g.constant(Tensor::scalar(F::zero())),
    };
    for &t in terms.iter().skip(1) {
        total = g.add(total, t)?;
    }
    report.total = g.scalar(total).to_f64().unwrap_or(f64::NAN);
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_is_zero() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let l = info_nce(&mut g, q, k, None, &LogitScale::Fixed(1.0)).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn two_by_two_worked_value() {
        let mut g = Graph::<f64>::new();
        let l3 = 3f64.ln();
        let q = g.constant(Tensor::new(vec![2, 2], vec![l3, 0.0, 0.0, l3]).unwrap());
        let k = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = info_nce(&mut g, q, k, None, &LogitScale::Fixed(1.0)).unwrap();
        assert!((g.scalar(l) - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((g.scalar(l) - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn equal_hard_negative_increases_loss() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let base = info_nce(&mut g, q, q, None, &LogitScale::Fixed(5.0)).unwrap();
        let n = g.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.3, 0.2]).unwrap());
        let hn = HardNegatives::per_query(&mut g, n).unwrap();
        let with = info_nce(&mut g, q, q, Some(&hn), &LogitScale::Fixed(5.0)).unwrap();
        assert!(g.scalar(with) > g.scalar(base));
    }

    #[test]
    fn equal_terms_total_two_and_a_half() {
        let r = LossReport {
            ce: Some(1.0),
            cv: Some(1.0),
            vce: Some(1.0),
            vcv: Some(1.0),
            actp: None,
            total: 0.0,
        };
        assert_eq!(r.weighted_sum(0.25), 2.5);
    }
}
