//! Retrieval, zero-shot classification and caption-choice metrics over
//! embedding matrices.
//!
//! Ranks are 1-based. The rank of a query's true item is one plus the number
//! of gallery items scoring strictly higher, plus the number of equal-scoring
//! items that come earlier in gallery order. Medians of an even count take
//! the lower middle value.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FormatError;
use crate::numerics::{Real, ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// `k → percentage of queries ranked within k`.
    pub recall: BTreeMap<usize, f64>,
    pub mean_rank: f64,
    pub median_rank: f64,
    pub ranks: Vec<usize>,
}

impl RetrievalMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    /// `{"R@1": .., "R@5": .., "MnR": .., "MdR": ..}`.
    pub fn summary(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (k, v) in &self.recall {
            m.insert(format!("R@{k}"), (*v).into());
        }
        m.insert("MnR".into(), self.mean_rank.into());
        m.insert("MdR".into(), self.median_rank.into());
        m.insert("queries".into(), self.ranks.len().into());
        serde_json::Value::Object(m)
    }
}

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];

/// Rank of `target` within one row of scores.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let s = row[target];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

/// Ranks and metrics for `sim[q][g]` with true match `targets[q]`.
pub fn retrieval_metrics_with(sim: &Tensor<f64>, targets: &[usize], ks: &[usize]) -> Result<RetrievalMetrics, EvalError> {
    if sim.ndim() != 2 || sim.shape()[0] != targets.len() {
        return Err(ShapeError::new("retrieval_metrics", sim.shape(), &[targets.len(), 0]).into());
    }
    let (q, gsize) = (sim.shape()[0], sim.shape()[1]);
    if q == 0 {
        return Err(EvalError::Empty("no queries"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= gsize) {
        return Err(ShapeError::new("retrieval target", &[t], &[gsize]).into());
    }
    let ranks: Vec<usize> = (0..q)
        .into_par_iter()
        .map(|i| rank_of(sim.row(i), targets[i]))
        .collect();
    Ok(metrics_from_ranks(ranks, ks))
}

/// Square `sim`: query `i` matches gallery item `i`.
pub fn retrieval_metrics(sim: &Tensor<f64>, ks: &[usize]) -> Result<RetrievalMetrics, EvalError> {
    if sim.ndim() != 2 || sim.shape()[0] != sim.shape()[1] {
        return Err(ShapeError::new("retrieval_metrics (square)", sim.shape(), sim.shape()).into());
    }
    let targets: Vec<usize> = (0..sim.shape()[0]).collect();
    retrieval_metrics_with(sim, &targets, ks)
}

fn metrics_from_ranks(ranks: Vec<usize>, ks: &[usize]) -> RetrievalMetrics {
    let n = ranks.len() as f64;
    let recall = ks
        .iter()
        .map(|&k| (k, 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    let mean_rank = ranks.iter().sum::<usize>() as f64 / n;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let median_rank = sorted[(sorted.len() - 1) / 2] as f64;
    RetrievalMetrics {
        recall,
        mean_rank,
        median_rank,
        ranks,
    }
}

/// Cosine similarities `[Q, G]` in 64-bit.
pub fn cosine_matrix<F: Real>(queries: &Tensor<F>, gallery: &Tensor<F>) -> Result<Tensor<f64>, EvalError> {
    if queries.ndim() != 2 || gallery.ndim() != 2 || queries.shape()[1] != gallery.shape()[1] {
        return Err(ShapeError::new("cosine_matrix", queries.shape(), gallery.shape()).into());
    }
    let q = queries.cast::<f64>().l2_normalized_rows();
    let g = gallery.cast::<f64>().l2_normalized_rows();
    let (nq, ng, d) = (q.shape()[0], g.shape()[0], q.shape()[1]);
    let mut out = vec![0.0; nq * ng];
    out.par_chunks_mut(ng.max(1)).enumerate().for_each(|(i, row)| {
        let a = &q.data()[i * d..(i + 1) * d];
        for (j, o) in row.iter_mut().enumerate() {
            let b = &g.data()[j * d..(j + 1) * d];
            *o = a.iter().zip(b).map(|(x, y)| x * y).sum();
        }
    });
    Ok(Tensor::new(vec![nq, ng], out)?)
}

/// Text-to-video retrieval: query `i` (a text) matches video `i`.
pub fn video_retrieval<F: Real>(
    video_emb: &Tensor<F>,
    text_emb: &Tensor<F>,
    ks: &[usize],
) -> Result<RetrievalMetrics, EvalError> {
    retrieval_metrics(&cosine_matrix(text_emb, video_emb)?, ks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub top1: f64,
    pub top5: f64,
    pub samples: usize,
}

/// Predict by cosine against one prompt embedding per class; ties follow
/// the rank rule above.
pub fn zero_shot_classify<F: Real>(
    video_emb: &Tensor<F>,
    class_emb: &Tensor<F>,
    labels: &[usize],
) -> Result<ClassifyReport, EvalError> {
    let sim = cosine_matrix(video_emb, class_emb)?;
    let m = retrieval_metrics_with(&sim, labels, &[1, 5])?;
    Ok(ClassifyReport {
        top1: m.recall[&1],
        top5: m.recall[&5],
        samples: labels.len(),
    })
}

/// Whether `v` prefers the positive caption over every negative (strictly).
pub fn caption_choice<F: Real>(v: &[F], positive: &[F], negatives: &[Vec<F>]) -> Result<bool, EvalError> {
    if negatives.is_empty() {
        return Err(FormatError::Invalid("caption case without negatives".into()).into());
    }
    let cos = |a: &[F], b: &[F]| -> f64 {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let (x, y) = (x.to_f64().unwrap_or(f64::NAN), y.to_f64().unwrap_or(f64::NAN));
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        ab / (aa.sqrt() * bb.sqrt()).max(1e-300)
    };
    let pos = cos(v, positive);
    Ok(negatives.iter().all(|n| pos > cos(v, n)))
}

/// One line of a caption-choice case file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeCase {
    /// Row id of the visual embedding.
    pub id: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

pub fn parse_compose_cases(text: &str) -> Result<Vec<ComposeCase>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let c: ComposeCase =
                serde_json::from_str(l).map_err(|e| FormatError::Invalid(format!("case line {}: {e}", i + 1)))?;
            if c.negatives.is_empty() {
                return Err(FormatError::Invalid(format!("case line {}: no negatives", i + 1)));
            }
            Ok(c)
        })
        .collect()
}

pub fn load_compose_cases(path: impl AsRef<Path>) -> Result<Vec<ComposeCase>, FormatError> {
    parse_compose_cases(&std::fs::read_to_string(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposeReport {
    pub accuracy: f64,
    pub correct: usize,
    pub cases: usize,
}

/// Accuracy over cases, given visual embeddings by id and a text embedder.
pub fn caption_accuracy<F: Real>(
    cases: &[ComposeCase],
    visual: impl Fn(&str) -> Option<Vec<F>>,
    embed: impl Fn(&[&str]) -> Result<Tensor<F>, ShapeError>,
) -> Result<ComposeReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::Empty("no caption cases"));
    }
    let mut correct = 0;
    for c in cases {
        let v = visual(&c.id).ok_or_else(|| EvalError::MissingEmbedding(c.id.clone()))?;
        let mut texts: Vec<&str> = vec![c.positive.as_str()];
        texts.extend(c.negatives.iter().map(String::as_str));
        let t = embed(&texts)?;
        let negs: Vec<Vec<F>> = (1..texts.len()).map(|i| t.row(i).to_vec()).collect();
        if caption_choice(&v, t.row(0), &negs)? {
            correct += 1;
        }
    }
    Ok(ComposeReport {
        accuracy: 100.0 * correct as f64 / cases.len() as f64,
        correct,
        cases: cases.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    #[test]
    fn worked_three_by_three() {
        let s = m(&[&[0.9, 0.1, 0.2], &[0.5, 0.4, 0.1], &[0.2, 0.1, 0.5]]);
        let r = retrieval_metrics(&s, &[1]).unwrap();
        assert_eq!(r.ranks, vec![1, 2, 1]);
        assert!((r.recall_at(1).unwrap() - 66.666_666).abs() < 1e-3);
        assert!((r.mean_rank - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.median_rank, 1.0);
    }

    #[test]
    fn all_equal_uses_gallery_order() {
        let s = m(&[&[0.3; 3], &[0.3; 3], &[0.3; 3]]);
        assert_eq!(retrieval_metrics(&s, &[1]).unwrap().ranks, vec![1, 2, 3]);
    }

    #[test]
    fn diagonal_dominant_is_perfect() {
        let s = m(&[&[0.9, 0.1, 0.0], &[0.05, 0.8, 0.1], &[0.0, 0.2, 0.5]]);
        let r = retrieval_metrics(&s, &[1]).unwrap();
        assert_eq!(r.recall_at(1), Some(100.0));
        assert_eq!(r.median_rank, 1.0);
    }

    #[test]
    fn caption_choice_is_strict() {
        let v = [1.0f64, 0.0];
        let p = [0.8, 0.6];
        assert!(!caption_choice(&v, &p, &[p.to_vec()]).unwrap());
        assert!(caption_choice(&v, &p, &[vec![0.0, 1.0]]).unwrap());
        assert!(matches!(caption_choice(&v, &p, &[]), Err(EvalError::Format(_))));
    }

    #[test]
    fn one_class_is_always_right() {
        let v = Tensor::new(vec![3, 2], vec![1.0f64, 0.0, 0.0, 1.0, -1.0, 0.5]).unwrap();
        let c = Tensor::new(vec![1, 2], vec![0.3f64, 0.4]).unwrap();
        let r = zero_shot_classify(&v, &c, &[0, 0, 0]).unwrap();
        assert_eq!(r.top1, 100.0);
        assert!(r.top5 >= r.top1);
    }
}
