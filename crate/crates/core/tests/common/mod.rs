//! Reference implementations and fixtures shared by the integration tests.
//!
//! The oracles are written with plain loops over `Vec<f64>` and share no code
//! with the library beyond the input data.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;

use srl_adapt::annotations::{EventAnnotation, FrameRef, RolePair};
use srl_adapt::numerics::{Graph, ShapeError, Tensor, Var};

pub type Rows = Vec<Vec<f64>>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

pub fn mean_rows(rows: &[&[f64]]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (acc, x) in m.iter_mut().zip(r.iter()) {
            *acc += x;
        }
    }
    m.iter().map(|x| x / rows.len() as f64).collect()
}

pub fn randn_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn unit_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    normalize(&randn_vec(rng, d))
}

pub fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).expect("fixture shape")
}

/// One direction of InfoNCE: query `i` against every key, plus the raw
/// similarities in `extra[i]`, all scaled by `s`.
pub fn nce(q: &Rows, k: &Rows, extra: &[Vec<f64>], s: f64) -> f64 {
    let n = q.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for kj in k {
            denom += (s * dot(&q[i], kj)).exp();
        }
        for &x in &extra[i] {
            denom += (s * x).exp();
        }
        let num = (s * dot(&q[i], &k[i])).exp();
        total += -(num / denom).ln();
    }
    total / n as f64
}

/// `L(q, k) + L(k, q)`. `negs[i]` are the negatives of query `i`; with
/// `both`, row `i` of the reverse half also sees `q_i · n` for each of them.
pub fn symmetric_nce(q: &Rows, k: &Rows, negs: &[Rows], both: bool, s: f64) -> f64 {
    let fwd: Vec<Vec<f64>> = (0..q.len())
        .map(|i| negs[i].iter().map(|n| dot(&q[i], n)).collect())
        .collect();
    let back: Vec<Vec<f64>> = if both { fwd.clone() } else { vec![Vec::new(); q.len()] };
    nce(q, k, &fwd, s) + nce(k, q, &back, s)
}

/// Raw inputs of one loss batch.
#[derive(Clone, Debug)]
pub struct LossCase {
    pub b: usize,
    pub p: usize,
    pub t: usize,
    pub d: usize,
    /// `[B][P][T]` rows of length `d`.
    pub frames: Vec<Vec<Rows>>,
    /// `[B][P]`
    pub e_hat: Vec<Rows>,
    /// `[B]`
    pub v_hat: Rows,
    /// `B·P` rows, event-major within each video.
    pub event_text: Rows,
    /// Per flattened event.
    pub hard_negatives: Vec<Rows>,
    pub action_text: Rows,
}

impl LossCase {
    pub fn random(rng: &mut impl Rng, b: usize, p: usize, t: usize, d: usize, h: usize) -> Self {
        let n = b * p;
        Self {
            b,
            p,
            t,
            d,
            frames: (0..b)
                .map(|_| (0..p).map(|_| (0..t).map(|_| unit_vec(rng, d)).collect()).collect())
                .collect(),
            e_hat: (0..b).map(|_| (0..p).map(|_| unit_vec(rng, d)).collect()).collect(),
            v_hat: (0..b).map(|_| unit_vec(rng, d)).collect(),
            event_text: (0..n).map(|_| unit_vec(rng, d)).collect(),
            hard_negatives: (0..n).map(|_| (0..h).map(|_| unit_vec(rng, d)).collect()).collect(),
            action_text: (0..n).map(|_| unit_vec(rng, d)).collect(),
        }
    }

    pub fn video_text(&self) -> Rows {
        (0..self.b)
            .map(|i| {
                let rows: Vec<&[f64]> = (0..self.p).map(|k| self.event_text[i * self.p + k].as_slice()).collect();
                normalize(&mean_rows(&rows))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OracleFlags {
    pub lambda: f64,
    pub ce: bool,
    pub cv: bool,
    pub vce: bool,
    pub vcv: bool,
    pub use_hn: bool,
    pub extra_negatives: bool,
    pub act_p: bool,
    pub both_directions: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct OracleTerms {
    pub ce: Option<f64>,
    pub cv: Option<f64>,
    pub vce: Option<f64>,
    pub vcv: Option<f64>,
    pub actp: Option<f64>,
    pub total: f64,
}

/// All loss terms by direct summation. Frame queries are normalised means.
pub fn oracle_losses(c: &LossCase, f: &OracleFlags, s: f64) -> OracleTerms {
    let n = c.b * c.p;
    let negs: Vec<Rows> = if !f.use_hn {
        vec![Vec::new(); n]
    } else if f.extra_negatives {
        let all: Rows = c.hard_negatives.iter().flatten().cloned().collect();
        vec![all; n]
    } else {
        c.hard_negatives.clone()
    };
    let no_negs = vec![Vec::new(); n];
    let video_text = c.video_text();
    let mut out = OracleTerms::default();
    if f.ce {
        let mut q = Vec::new();
        for i in 0..c.b {
            for k in 0..c.p {
                let rows: Vec<&[f64]> = c.frames[i][k].iter().map(Vec::as_slice).collect();
                q.push(normalize(&mean_rows(&rows)));
            }
        }
        out.ce = Some(symmetric_nce(&q, &c.event_text, &negs, f.both_directions, s));
    }
    if f.cv {
        let q: Rows = (0..c.b)
            .map(|i| {
                let rows: Vec<&[f64]> = c.frames[i].iter().flatten().map(Vec::as_slice).collect();
                normalize(&mean_rows(&rows))
            })
            .collect();
        out.cv = Some(symmetric_nce(&q, &video_text, &no_negs[..c.b], false, s));
    }
    let e_flat: Rows = c.e_hat.iter().flatten().cloned().collect();
    if f.vce {
        out.vce = Some(symmetric_nce(&e_flat, &c.event_text, &negs, f.both_directions, s));
    }
    if f.vcv {
        out.vcv = Some(symmetric_nce(&c.v_hat, &video_text, &no_negs[..c.b], false, s));
    }
    if f.act_p {
        out.actp = Some(symmetric_nce(&e_flat, &c.action_text, &no_negs, false, s));
    }
    let v = |x: Option<f64>| x.unwrap_or(0.0);
    out.total = v(out.ce) + v(out.vce) + f.lambda * (v(out.cv) + v(out.vcv)) + v(out.actp);
    out
}

/// Rank of each query's target by fully sorting its row: descending score,
/// equal scores in gallery order.
pub fn oracle_ranks(sim: &[Vec<f64>], targets: &[usize]) -> Vec<usize> {
    sim.iter()
        .zip(targets)
        .map(|(row, &t)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            order.iter().position(|&g| g == t).unwrap() + 1
        })
        .collect()
}

/// `(recall per k in %, mean rank, lower median rank)`.
pub fn oracle_metrics(ranks: &[usize], ks: &[usize]) -> (Vec<f64>, f64, f64) {
    let n = ranks.len() as f64;
    let recall = ks
        .iter()
        .map(|&k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect();
    let mean = ranks.iter().sum::<usize>() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort();
    let median = sorted[(sorted.len() - 1) / 2] as f64;
    (recall, mean, median)
}

/// `mean(out ⊙ W)` for a fixed, non-constant weight pattern `W`, so every
/// output element influences the scalar differently.
pub fn project(g: &mut Graph<f64>, out: Var) -> Result<Var, ShapeError> {
    let shape = g.shape(out).to_vec();
    let w = Tensor::from_fn(shape, |i| (1.3 * i as f64 + 0.7).sin() + 0.1);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.mean_all(prod))
}

pub fn event(id: &str, verb: &str, roles: &[(&str, &str)]) -> EventAnnotation {
    EventAnnotation {
        event_id: id.into(),
        verb: verb.into(),
        roles: roles.iter().map(|(r, n)| RolePair::new(*r, *n)).collect(),
        start_s: 0.0,
        end_s: 2.0,
        frame_refs: vec![FrameRef::Row(0)],
        natural_prompt: None,
    }
}
