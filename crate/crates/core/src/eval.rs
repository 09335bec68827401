//! Retrieval metrics over unit-norm embeddings with self-exclusion.

use serde::Serialize;

use crate::error::{Error, Result};

/// Embeddings (one unit-norm row per item) and their class labels.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RetrievalMetrics {
    pub recall_at_1: f64,
    pub recall_at_2: f64,
    pub recall_at_4: f64,
    pub map_at_r: f64,
}

const NORM_TOLERANCE: f64 = 1e-4;

impl RetrievalIndex {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} embeddings for {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if rows.len() < 2 {
            return Err(Error::Data("retrieval needs at least two items".into()));
        }
        let dim = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r.len() != dim || (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Data(format!(
                    "embedding {i} is not a unit vector of dim {dim}"
                )));
            }
        }
        Ok(RetrievalIndex { rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Other items by decreasing similarity; ties go to the lower index.
    pub fn ranking(&self, query: usize) -> Vec<usize> {
        let q = &self.rows[query];
        let mut scored: Vec<(f64, usize)> = (0..self.rows.len())
            .filter(|&j| j != query)
            .map(|j| (dot(q, &self.rows[j]), j))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().map(|(_, j)| j).collect()
    }

    fn relevant_count(&self, query: usize) -> usize {
        let l = self.labels[query];
        self.labels.iter().filter(|&&x| x == l).count() - 1
    }

    fn valid_queries(&self) -> Vec<usize> {
        let valid: Vec<usize> = (0..self.len())
            .filter(|&q| self.relevant_count(q) > 0)
            .collect();
        let skipped = self.len() - valid.len();
        if skipped > 0 {
            log::warn!("{skipped} queries have no same-class item and are excluded");
        }
        valid
    }

    pub fn recall_at_k(&self, k: usize) -> Result<f64> {
        if k == 0 || k >= self.len() {
            return Err(Error::Data(format!("K = {k} outside [1, {})", self.len())));
        }
        Ok(self.recalls(&[k])[0])
    }

    fn recalls(&self, ks: &[usize]) -> Vec<f64> {
        let valid = self.valid_queries();
        if valid.is_empty() {
            return vec![0.0; ks.len()];
        }
        let mut hits = vec![0usize; ks.len()];
        for &q in &valid {
            let rank = self.ranking(q);
            let first = rank
                .iter()
                .position(|&j| self.labels[j] == self.labels[q])
                .expect("valid query has a relevant item");
            for (h, &k) in hits.iter_mut().zip(ks) {
                if first < k {
                    *h += 1;
                }
            }
        }
        hits.iter()
            .map(|&h| h as f64 / valid.len() as f64)
            .collect()
    }

    /// `(1/R)·Σ_{i≤R} P(i)·rel(i)` for one query; `None` when it has no
    /// same-class item.
    pub fn average_precision_at_r(&self, query: usize) -> Option<f64> {
        let r = self.relevant_count(query);
        if r == 0 {
            return None;
        }
        let mut found = 0usize;
        let mut ap = 0.0;
        for (i, &j) in self.ranking(query).iter().take(r).enumerate() {
            if self.labels[j] == self.labels[query] {
                found += 1;
                ap += found as f64 / (i + 1) as f64;
            }
        }
        Some(ap / r as f64)
    }

    /// Mean of the per-query MAP@R over valid queries.
    pub fn map_at_r(&self) -> f64 {
        let valid = self.valid_queries();
        if valid.is_empty() {
            return 0.0;
        }
        let total: f64 = valid
            .iter()
            .filter_map(|&q| self.average_precision_at_r(q))
            .sum();
        total / valid.len() as f64
    }

    /// R@1, R@2, R@4 (each K capped at `M − 1`) and MAP@R.
    pub fn report(&self) -> RetrievalMetrics {
        let cap = self.len() - 1;
        let r = self.recalls(&[1, 2.min(cap), 4.min(cap)]);
        RetrievalMetrics {
            recall_at_1: r[0],
            recall_at_2: r[1],
            recall_at_4: r[2],
            map_at_r: self.map_at_r(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
