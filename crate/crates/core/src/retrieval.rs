//! Text-to-video retrieval metrics.
//!
//! Ranks are 1-based and optimistic: a gallery item only pushes the ground
//! truth down if it scores strictly higher, so ties never hurt.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorDistribution;
use crate::error::{CalmError, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Query-by-gallery scores with the gallery index of each query's match.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    scores: Tensor,
    ground_truth: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(scores: Tensor, ground_truth: Vec<usize>) -> Result<Self> {
        let (q, g) = scores.dims2()?;
        if ground_truth.len() != q {
            return Err(CalmError::Contract(format!(
                "{} ground-truth indices for {q} queries",
                ground_truth.len()
            )));
        }
        if let Some((qi, &gt)) = ground_truth.iter().enumerate().find(|(_, &gt)| gt >= g) {
            return Err(CalmError::Contract(format!(
                "query {qi} has ground truth {gt} outside gallery of {g}"
            )));
        }
        if !scores.all_finite() {
            return Err(CalmError::NumericDomain("similarity scores must be finite".into()));
        }
        Ok(Self { scores, ground_truth })
    }

    /// Square matrix whose query `i` matches gallery item `i`.
    pub fn diagonal(scores: Tensor) -> Result<Self> {
        let q = scores.dims2()?.0;
        Self::new(scores, (0..q).collect())
    }

    /// Cosine similarity of every query row against every gallery row;
    /// query `i` is paired with gallery item `i`.
    pub fn cosine(queries: &Tensor, gallery: &Tensor) -> Result<Self> {
        let tape = Tape::new();
        let s = tape.constant(queries.clone()).cosine_rows(&tape.constant(gallery.clone()))?;
        Self::diagonal(s.value())
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn ground_truth(&self) -> &[usize] {
        &self.ground_truth
    }

    pub fn num_queries(&self) -> usize {
        self.ground_truth.len()
    }
}

pub fn rank_of_truth(sim: &SimilarityMatrix) -> Vec<usize> {
    sim.ground_truth
        .iter()
        .enumerate()
        .map(|(q, &gt)| {
            let row = sim.scores.row(q);
            let truth = row[gt];
            1 + row.iter().filter(|&&s| s > truth).count()
        })
        .collect()
}

/// Percentage of ranks at or below `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(CalmError::EmptyInput("recall over no queries"));
    }
    if k == 0 {
        return Err(CalmError::Contract("recall cutoff k must be >= 1".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

pub fn mean_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(CalmError::EmptyInput("mean rank over no queries"));
    }
    Ok(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mnr: f64,
    pub n_queries: usize,
}

impl RetrievalMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            r1: recall_at_k(ranks, 1)?,
            r5: recall_at_k(ranks, 5)?,
            r10: recall_at_k(ranks, 10)?,
            mnr: mean_rank(ranks)?,
            n_queries: ranks.len(),
        })
    }

    pub fn evaluate(sim: &SimilarityMatrix) -> Result<Self> {
        Self::from_ranks(&rank_of_truth(sim))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// The `k` most probable anchors, highest first; equal probabilities keep
/// label order. `k` larger than the number of anchors returns them all.
pub fn top_anchor_report(dist: &AnchorDistribution, labels: &[String], k: usize) -> Result<Vec<(String, f64)>> {
    top_k(dist.probs(), labels, k)
}

pub fn top_k(probs: &[f64], labels: &[String], k: usize) -> Result<Vec<(String, f64)>> {
    if labels.len() != probs.len() {
        return Err(CalmError::Contract(format!(
            "{} labels for {} probabilities",
            labels.len(),
            probs.len()
        )));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| (labels[i].clone(), probs[i]))
        .collect())
}
