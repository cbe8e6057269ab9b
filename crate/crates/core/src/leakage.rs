//! Benchmark split strategies and cross-task leakage detection/repair.
//!
//! The two benchmark splits (random 80-10-10 over interactions, per-user
//! leave-one-out) assign the same underlying records to different sides
//! per task, so merging training sets across tasks can put test records
//! into training data. Detection is exact key intersection; repair removes
//! the offenders from the training side only, keeping test sets intact.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::SplitMix64;
use crate::model::{Interaction, UserHistory};

#[derive(Debug, Error)]
pub enum LeakageError {
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("history for user `{user_id}` too short for leave-one-out: need >= 3, have {have}")]
    HistoryTooShort { user_id: String, have: usize },
}

/// Identity of one interaction for leakage purposes. Two records with equal
/// keys are the same interaction. A missing timestamp is part of the
/// identity (None == None), and [`KeyMode::UserItem`] drops timestamps from
/// the key entirely for timestamp-free sources.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InteractionKey {
    pub user_id: String,
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

/// Which components form the interaction identity.
///
/// (user, item) alone would merge legitimate repeat purchases, so the
/// timestamped key is the default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyMode {
    #[default]
    UserItemTime,
    UserItem,
}

impl InteractionKey {
    pub fn of(interaction: &Interaction, mode: KeyMode) -> Self {
        InteractionKey {
            user_id: interaction.user_id.clone(),
            item_id: interaction.item_id.clone(),
            timestamp: match mode {
                KeyMode::UserItemTime => interaction.timestamp,
                KeyMode::UserItem => None,
            },
        }
    }
}

pub fn key_set(interactions: &[Interaction], mode: KeyMode) -> BTreeSet<InteractionKey> {
    interactions.iter().map(|i| InteractionKey::of(i, mode)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitStrategy {
    Random801010,
    LeaveOneOut,
}

/// Train/validation/test assignment over interaction keys. The three sets
/// are pairwise disjoint and their union is the input key set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub strategy: SplitStrategy,
    pub train: BTreeSet<InteractionKey>,
    pub validation: BTreeSet<InteractionKey>,
    pub test: BTreeSet<InteractionKey>,
}

pub const RANDOM_SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Seeded random split over interactions.
///
/// Keys are sorted, shuffled with a seeded Fisher-Yates permutation, then
/// sliced: train and validation take `round(n * ratio)` each off the front
/// and test takes the remainder, so 10 records split (8, 1, 1) and 7 split
/// (6, 1, 0). Deterministic in (key set, seed); input order is irrelevant.
pub fn random_interaction_split(
    interactions: &[Interaction],
    ratios: [f64; 3],
    seed: u64,
    mode: KeyMode,
) -> Result<SplitAssignment, LeakageError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(LeakageError::BadRatios(ratios));
    }

    let mut keys: Vec<InteractionKey> = key_set(interactions, mode).into_iter().collect();
    let n = keys.len();
    SplitMix64::new(seed).shuffle(&mut keys);

    let quota = |ratio: f64| ((n as f64 * ratio) + 0.5).floor() as usize;
    let n_train = quota(ratios[0]).min(n);
    let n_validation = quota(ratios[1]).min(n - n_train);

    let test = keys.split_off(n_train + n_validation);
    let validation = keys.split_off(n_train);
    Ok(SplitAssignment {
        strategy: SplitStrategy::Random801010,
        train: keys.into_iter().collect(),
        validation: validation.into_iter().collect(),
        test: test.into_iter().collect(),
    })
}

/// Per-user leave-one-out split, in history order.
#[derive(Clone, Debug, PartialEq)]
pub struct LeaveOneOut {
    pub train: Vec<Interaction>,
    pub validation: Interaction,
    pub test: Interaction,
}

/// Reserves the last history item for test and the second-last for
/// validation; everything earlier is training data.
pub fn leave_one_out_split(history: &UserHistory) -> Result<LeaveOneOut, LeakageError> {
    let n = history.len();
    if n < 3 {
        return Err(LeakageError::HistoryTooShort {
            user_id: history.user_id.clone(),
            have: n,
        });
    }
    let interactions: Vec<Interaction> =
        history.entries.iter().map(|e| e.interaction.clone()).collect();
    Ok(LeaveOneOut {
        train: interactions[..n - 2].to_vec(),
        validation: interactions[n - 2].clone(),
        test: interactions[n - 1].clone(),
    })
}

/// Aggregates per-user leave-one-out splits into one key assignment.
/// Histories too short for the split are skipped.
pub fn leave_one_out_assignment(histories: &[UserHistory], mode: KeyMode) -> SplitAssignment {
    let mut assignment = SplitAssignment {
        strategy: SplitStrategy::LeaveOneOut,
        train: BTreeSet::new(),
        validation: BTreeSet::new(),
        test: BTreeSet::new(),
    };
    for history in histories {
        if let Ok(split) = leave_one_out_split(history) {
            assignment
                .train
                .extend(split.train.iter().map(|i| InteractionKey::of(i, mode)));
            assignment.validation.insert(InteractionKey::of(&split.validation, mode));
            assignment.test.insert(InteractionKey::of(&split.test, mode));
        }
    }
    assignment
}

/// Exact intersection of training and test keys.
pub fn find_leaks(
    train_keys: &BTreeSet<InteractionKey>,
    test_keys: &BTreeSet<InteractionKey>,
) -> BTreeSet<InteractionKey> {
    train_keys.intersection(test_keys).cloned().collect()
}

/// Removes from `train` every interaction whose key appears in `test_keys`,
/// returning the filtered set and the number removed. The test side is
/// never modified.
pub fn filter_train(
    train: &[Interaction],
    test_keys: &BTreeSet<InteractionKey>,
    mode: KeyMode,
) -> (Vec<Interaction>, usize) {
    let kept: Vec<Interaction> = train
        .iter()
        .filter(|i| !test_keys.contains(&InteractionKey::of(i, mode)))
        .cloned()
        .collect();
    let removed = train.len() - kept.len();
    (kept, removed)
}
