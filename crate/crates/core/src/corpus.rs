//! Pre-training corpus construction: token-budget chunking and the
//! user-level pretrain/finetune split.
//!
//! Chunking splits an over-budget history into the minimum number of
//! near-equal contiguous chunks whose rendered documents each fit strictly
//! under the token budget. "Near-equal" means chunk item counts differ by
//! at most one, with the larger chunks first. The invariants hold for any
//! monotone token counter, so the reference byte-based counter can be
//! swapped for a real tokenizer without touching this module.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::unit_interval;
use crate::model::UserHistory;
use crate::template::{FieldSet, TemplateError, TemplateSet, TemplateSpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("history entry {index} renders over the token budget on its own")]
    EntryExceedsBudget { index: usize },
    #[error("split ratio {0} must be in (0, 1)")]
    BadSplitRatio(f64),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Counts tokens in rendered text. Implementations must be deterministic,
/// return 0 for the empty string, and be monotone under concatenation.
pub trait TokenCounter: Send + Sync {
    fn counter_id(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// Reference counter: `ceil(byte_length / 4)`.
///
/// A stand-in for a subword tokenizer at roughly four bytes per token; it
/// keeps the pipeline testable without model assets. Real tokenizers plug
/// in through the [`TokenCounter`] trait.
#[derive(Clone, Copy, Debug, Default)]
pub struct ApproxByteCounter;

impl TokenCounter for ApproxByteCounter {
    fn counter_id(&self) -> &str {
        "approx-bytes/4"
    }

    fn count(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

/// Default token budget: the target model's context length.
pub const DEFAULT_TOKEN_BUDGET: usize = 2048;

/// The user-level pretrain fraction.
pub const DEFAULT_SPLIT_RATIO: f64 = 0.995;

/// One rendered pre-training document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub text: String,
    pub user_id: String,
    pub dataset_id: String,
    pub chunk_index: usize,
}

/// Near-equal contiguous partition of `n` entries into `c` chunks: the
/// first `n % c` chunks take `ceil(n/c)` entries, the rest `floor(n/c)`.
fn partition_sizes(n: usize, c: usize) -> Vec<usize> {
    let base = n / c;
    let extra = n % c;
    (0..c).map(|i| if i < extra { base + 1 } else { base }).collect()
}

/// Splits a history into the minimum number of near-equal chunks whose
/// rendered documents each count strictly under `budget`.
///
/// Concatenating the chunks' entries reproduces the original entry list.
/// Errors if any single entry renders at or over budget by itself.
pub fn chunk_history(
    history: &UserHistory,
    template: &TemplateSpec,
    field_set: FieldSet,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<Vec<UserHistory>, CorpusError> {
    let n = history.len();
    if n == 0 {
        return Ok(vec![history.clone()]);
    }

    let render_fits = |chunk: &UserHistory| -> Result<bool, CorpusError> {
        let text = template.render_history(chunk, field_set)?;
        Ok(counter.count(&text) < budget)
    };

    'next_count: for c in 1..=n {
        let mut start = 0;
        let mut chunks = Vec::with_capacity(c);
        for size in partition_sizes(n, c) {
            let chunk = history.slice(start..start + size);
            if !render_fits(&chunk)? {
                continue 'next_count;
            }
            chunks.push(chunk);
            start += size;
        }
        return Ok(chunks);
    }

    // Even one-entry chunks overflow; report the first offending entry.
    for index in 0..n {
        if !render_fits(&history.slice(index..index + 1))? {
            return Err(CorpusError::EntryExceedsBudget { index });
        }
    }
    unreachable!("some single entry must exceed the budget when c = n fails");
}

/// Which side of the pretrain/finetune split a user falls on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSide {
    Pretrain,
    Finetune,
}

/// Deterministic side assignment: a stable hash of (user_id, seed) mapped
/// to [0, 1) and compared against the ratio. Shard-parallel runs agree
/// without coordination because membership depends on nothing else.
pub fn assign_split(user_id: &str, ratio: f64, seed: u64) -> SplitSide {
    if unit_interval(user_id.as_bytes(), seed) < ratio {
        SplitSide::Pretrain
    } else {
        SplitSide::Finetune
    }
}

/// Partitions user ids into (pretrain, finetune) sets.
pub fn split_users<'a, I>(
    user_ids: I,
    ratio: f64,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>), CorpusError>
where
    I: IntoIterator<Item = &'a str>,
{
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::BadSplitRatio(ratio));
    }
    let mut pretrain = BTreeSet::new();
    let mut finetune = BTreeSet::new();
    for user in user_ids {
        match assign_split(user, ratio, seed) {
            SplitSide::Pretrain => pretrain.insert(user.to_string()),
            SplitSide::Finetune => finetune.insert(user.to_string()),
        };
    }
    Ok((pretrain, finetune))
}

/// Renders pre-training documents for every pretrain-side history.
///
/// Each history is chunked under the budget and rendered with the pretrain
/// field set; every chunk becomes one document keyed by (user_id,
/// chunk_index). Output order is canonical: (user_id, dataset_id,
/// chunk_index).
pub fn build_corpus(
    histories: &[UserHistory],
    templates: &TemplateSet,
    template_for: &dyn Fn(&str) -> String,
    budget: usize,
    counter: &dyn TokenCounter,
    ratio: f64,
    seed: u64,
) -> Result<Vec<CorpusDocument>, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::BadSplitRatio(ratio));
    }
    let mut ordered: Vec<&UserHistory> = histories.iter().collect();
    ordered.sort_by(|a, b| (&a.user_id, &a.dataset_id).cmp(&(&b.user_id, &b.dataset_id)));

    let mut documents = Vec::new();
    for history in ordered {
        if assign_split(&history.user_id, ratio, seed) != SplitSide::Pretrain {
            continue;
        }
        let template = templates.get(&template_for(&history.dataset_id))?;
        let chunks = chunk_history(history, template, FieldSet::Pretrain, budget, counter)?;
        for (chunk_index, chunk) in chunks.iter().enumerate() {
            documents.push(CorpusDocument {
                text: template.render_history(chunk, FieldSet::Pretrain)?,
                user_id: history.user_id.clone(),
                dataset_id: history.dataset_id.clone(),
                chunk_index,
            });
        }
    }
    Ok(documents)
}
