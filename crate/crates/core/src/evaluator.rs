//! Metric computation over evaluation runs.
//!
//! Rating prediction scores with RMSE and MAE after parsing the numeric
//! value out of each generation; sequential recommendation scores with
//! HR@k and NDCG@k over grounded, deduplicated rankings. NDCG uses the
//! single-relevant-item convention: the ideal DCG is 1, so a truth item at
//! 1-based rank r contributes 1/log2(r+1).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sft::Task;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no pairs to evaluate")]
    EmptyInput,
    #[error("all {0} generations failed to parse")]
    AllFailed(usize),
}

/// One grounded candidate: the raw generation, its ranking score and the
/// catalog item it matched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub score: f64,
    pub item_id: String,
}

/// One evaluation query for sequential recommendation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub query_id: String,
    pub candidates: Vec<Candidate>,
    pub truth_item_id: String,
}

/// One evaluation query for rating prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingPrediction {
    pub query_id: String,
    pub generation: String,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hr_at: BTreeMap<u32, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ndcg_at: BTreeMap<u32, f64>,
    pub n_evaluated: usize,
    pub n_parse_failures: usize,
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "task: {}", self.task)?;
        if let (Some(rmse), Some(mae)) = (self.rmse, self.mae) {
            writeln!(f, "  RMSE: {rmse:.4}")?;
            writeln!(f, "  MAE:  {mae:.4}")?;
        }
        for (k, v) in &self.hr_at {
            writeln!(f, "  HR@{k}:   {v:.4}")?;
        }
        for (k, v) in &self.ndcg_at {
            writeln!(f, "  NDCG@{k}: {v:.4}")?;
        }
        writeln!(f, "  evaluated: {}", self.n_evaluated)?;
        write!(f, "  parse failures: {}", self.n_parse_failures)
    }
}

/// Extracts the predicted rating from a generation.
///
/// First match of a `{number}/{scale}` pattern whose denominator equals the
/// task scale wins; failing that, a generation that opens with a bare
/// number inside [0, scale] yields that number; anything else is a parse
/// failure (recorded, never fatal).
pub fn parse_rating(generation: &str, scale: f64) -> Option<f64> {
    let bytes = generation.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let (value, end) = scan_number(generation, i);
            let mut j = end;
            while j < bytes.len() && bytes[j] == b' ' {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'/' {
                let mut k = j + 1;
                while k < bytes.len() && bytes[k] == b' ' {
                    k += 1;
                }
                if k < bytes.len() && bytes[k].is_ascii_digit() {
                    let (denom, denom_end) = scan_number(generation, k);
                    if (denom - scale).abs() < 1e-9 {
                        return Some(value);
                    }
                    i = denom_end;
                    continue;
                }
            }
            i = end;
        } else {
            i += 1;
        }
    }
    // No fraction anywhere; accept a bare leading number within the scale.
    let trimmed = generation.trim_start();
    if trimmed.as_bytes().first().is_some_and(u8::is_ascii_digit) {
        let (value, _) = scan_number(trimmed, 0);
        if (0.0..=scale).contains(&value) {
            return Some(value);
        }
    }
    None
}

/// Parses `[0-9]+(\.[0-9]+)?` starting at byte `start`; returns the value
/// and the byte offset just past it.
fn scan_number(text: &str, start: usize) -> (f64, usize) {
    let bytes = text.as_bytes();
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end < bytes.len()
        && bytes[end] == b'.'
        && end + 1 < bytes.len()
        && bytes[end + 1].is_ascii_digit()
    {
        end += 1;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
    }
    (text[start..end].parse().unwrap_or(f64::NAN), end)
}

pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mean_sq = pairs.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pairs.len() as f64;
    Ok(mean_sq.sqrt())
}

pub fn mae(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / pairs.len() as f64)
}

/// 1 if the truth item appears in the first k ranked ids, else 0.
pub fn hit_rate_at_k(ranked_item_ids: &[String], truth: &str, k: usize) -> f64 {
    assert!(k >= 1, "cutoff must be at least 1");
    if ranked_item_ids.iter().take(k).any(|id| id == truth) {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant-item NDCG: 1/log2(rank + 1) when the truth sits at
/// 1-based rank <= k, else 0.
pub fn ndcg_at_k(ranked_item_ids: &[String], truth: &str, k: usize) -> f64 {
    assert!(k >= 1, "cutoff must be at least 1");
    match ranked_item_ids.iter().take(k).position(|id| id == truth) {
        Some(zero_based) => 1.0 / ((zero_based as f64 + 2.0).log2()),
        None => 0.0,
    }
}

/// Candidates sorted by score descending (stable), then deduplicated by
/// matched item keeping the best-scored occurrence.
pub fn dedup_ranking(candidates: &[Candidate]) -> Vec<String> {
    let mut ordered: Vec<&Candidate> = candidates.iter().collect();
    ordered.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut seen = BTreeSet::new();
    let mut ranking = Vec::new();
    for c in ordered {
        if seen.insert(c.item_id.as_str()) {
            ranking.push(c.item_id.clone());
        }
    }
    ranking
}

/// HR@k and NDCG@k at each cutoff, averaged over queries.
pub fn evaluate_seqrec_run(predictions: &[RankedPrediction], cutoffs: &[u32]) -> MetricReport {
    let mut hr_sums: BTreeMap<u32, f64> = cutoffs.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg_sums: BTreeMap<u32, f64> = cutoffs.iter().map(|&k| (k, 0.0)).collect();
    for prediction in predictions {
        let ranking = dedup_ranking(&prediction.candidates);
        for &k in cutoffs {
            *hr_sums.get_mut(&k).unwrap() +=
                hit_rate_at_k(&ranking, &prediction.truth_item_id, k as usize);
            *ndcg_sums.get_mut(&k).unwrap() +=
                ndcg_at_k(&ranking, &prediction.truth_item_id, k as usize);
        }
    }
    let n = predictions.len();
    let average = |sums: BTreeMap<u32, f64>| -> BTreeMap<u32, f64> {
        sums.into_iter()
            .map(|(k, s)| (k, if n == 0 { 0.0 } else { s / n as f64 }))
            .collect()
    };
    MetricReport {
        task: Task::Seqrec,
        rmse: None,
        mae: None,
        hr_at: average(hr_sums),
        ndcg_at: average(ndcg_sums),
        n_evaluated: n,
        n_parse_failures: 0,
    }
}

/// Parses every generation and scores RMSE/MAE over the successes.
///
/// Failures are excluded and counted; `impute_midpoint` substitutes
/// scale/2 for failures instead, for strict-comparability studies where
/// silently shrinking the denominator would skew comparisons.
pub fn evaluate_rating_run(
    predictions: &[RatingPrediction],
    scale: f64,
    impute_midpoint: bool,
) -> Result<MetricReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut pairs = Vec::with_capacity(predictions.len());
    let mut failures = 0usize;
    for p in predictions {
        match parse_rating(&p.generation, scale) {
            Some(value) => pairs.push((value, p.truth)),
            None => {
                failures += 1;
                if impute_midpoint {
                    pairs.push((scale / 2.0, p.truth));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::AllFailed(failures));
    }
    Ok(MetricReport {
        task: Task::Rating,
        rmse: Some(rmse(&pairs)?),
        mae: Some(mae(&pairs)?),
        hr_at: BTreeMap::new(),
        ndcg_at: BTreeMap::new(),
        n_evaluated: pairs.len(),
        n_parse_failures: failures,
    })
}
