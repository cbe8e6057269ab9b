//! Streaming ingestion, cleaning and version dedup.
//!
//! Raw source files (JSONL or CSV) stream through the descriptor's field
//! mapping into the unified schema. Malformed rows are counted and skipped
//! rather than aborting the run; at source scale (hundreds of millions of
//! rows) a single bad line must not kill a multi-hour job.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    extract_item, validate_interaction, DatasetDescriptor, Interaction, Item, SourceFormat,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unreadable source: {0}")]
    UnreadableSource(String),
    #[error("source does not match declared format {expected:?}: {reason}")]
    FormatMismatch {
        expected: SourceFormat,
        reason: String,
    },
}

/// An in-memory dataset snapshot: the item catalog plus the interaction log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub dataset_id: String,
    pub items: BTreeMap<String, Item>,
    pub interactions: Vec<Interaction>,
}

impl Dataset {
    pub fn new(dataset_id: impl Into<String>) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            items: BTreeMap::new(),
            interactions: Vec::new(),
        }
    }

    pub fn user_ids(&self) -> BTreeSet<&str> {
        self.interactions.iter().map(|i| i.user_id.as_str()).collect()
    }
}

/// Per-file read outcome: parsed records plus the skip count.
#[derive(Debug, Default)]
pub struct ReadReport {
    pub records_read: usize,
    pub records_skipped: usize,
}

/// Streams one source file into `dataset`, validating every row.
///
/// Rows that fail field validation (missing ids, bad rating, bad timestamp)
/// are skipped and counted. A source whose shape contradicts the declared
/// format fails fast with `FormatMismatch`. Item metadata repeated across
/// rows keeps the first occurrence.
pub fn read_dataset<R: BufRead>(
    descriptor: &DatasetDescriptor,
    reader: R,
    rating_scale: f64,
    dataset: &mut Dataset,
) -> Result<ReadReport, IngestError> {
    descriptor
        .validate()
        .map_err(|e| IngestError::UnreadableSource(e.to_string()))?;
    match descriptor.source_format {
        SourceFormat::Jsonl => read_jsonl_source(descriptor, reader, rating_scale, dataset),
        SourceFormat::Csv => read_csv_source(descriptor, reader, rating_scale, dataset),
    }
}

fn ingest_row(
    raw: &BTreeMap<String, String>,
    descriptor: &DatasetDescriptor,
    rating_scale: f64,
    dataset: &mut Dataset,
    report: &mut ReadReport,
) {
    match (
        validate_interaction(raw, descriptor, rating_scale),
        extract_item(raw, descriptor),
    ) {
        (Ok(interaction), Ok(item)) => {
            dataset.items.entry(item.item_id.clone()).or_insert(item);
            dataset.interactions.push(interaction);
            report.records_read += 1;
        }
        _ => report.records_skipped += 1,
    }
}

fn read_jsonl_source<R: BufRead>(
    descriptor: &DatasetDescriptor,
    reader: R,
    rating_scale: f64,
    dataset: &mut Dataset,
) -> Result<ReadReport, IngestError> {
    let mut report = ReadReport::default();
    let mut first_content_line = true;
    for line in reader.lines() {
        let line = line.map_err(|e| IngestError::UnreadableSource(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<serde_json::Map<String, serde_json::Value>, _> =
            serde_json::from_str(&line);
        let object = match parsed {
            Ok(object) => object,
            Err(e) if first_content_line => {
                // A file whose very first line is not a JSON object was
                // almost certainly declared with the wrong format.
                return Err(IngestError::FormatMismatch {
                    expected: SourceFormat::Jsonl,
                    reason: e.to_string(),
                });
            }
            Err(_) => {
                report.records_skipped += 1;
                continue;
            }
        };
        first_content_line = false;
        let raw: BTreeMap<String, String> = object
            .into_iter()
            .map(|(k, v)| {
                let text = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Null => String::new(),
                    other => other.to_string(),
                };
                (k, text)
            })
            .collect();
        ingest_row(&raw, descriptor, rating_scale, dataset, &mut report);
    }
    Ok(report)
}

fn read_csv_source<R: BufRead>(
    descriptor: &DatasetDescriptor,
    reader: R,
    rating_scale: f64,
    dataset: &mut Dataset,
) -> Result<ReadReport, IngestError> {
    let mut csv_reader = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = csv_reader
        .headers()
        .map_err(|e| IngestError::UnreadableSource(e.to_string()))?
        .clone();

    // Every mapped source column must appear in the header row; a JSONL file
    // fed through the CSV reader shows up here as a single bogus column.
    for source in descriptor.field_map.keys() {
        if !headers.iter().any(|h| h == source) {
            return Err(IngestError::FormatMismatch {
                expected: SourceFormat::Csv,
                reason: format!("header row has no column `{source}`"),
            });
        }
    }

    let mut report = ReadReport::default();
    for record in csv_reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                report.records_skipped += 1;
                continue;
            }
        };
        if record.len() != headers.len() {
            report.records_skipped += 1;
            continue;
        }
        let raw: BTreeMap<String, String> = headers
            .iter()
            .zip(record.iter())
            .map(|(h, v)| (h.to_string(), v.to_string()))
            .collect();
        ingest_row(&raw, descriptor, rating_scale, dataset, &mut report);
    }
    Ok(report)
}

/// Counts removed by each cleaning rule, for auditing either reading of the
/// rule order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanLog {
    pub titleless_items_removed: usize,
    pub interactions_removed_titleless: usize,
    pub users_removed_min_interactions: usize,
    pub interactions_removed_min_interactions: usize,
}

/// Applies the cleaning rules, in order:
/// 1. drop items with empty titles, along with their interactions;
/// 2. drop users left with fewer than 5 interactions, along with theirs.
///
/// One pass, not a fixpoint: a user pushed below 5 by rule 1 is caught by
/// rule 2, but items orphaned by rule 2 stay in the catalog. The schema has
/// no demographic fields, so there is nothing to strip for that rule.
pub fn clean(dataset: &Dataset) -> (Dataset, CleanLog) {
    let mut log = CleanLog::default();

    let titled: BTreeMap<String, Item> = dataset
        .items
        .iter()
        .filter(|(_, item)| item.has_title())
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    log.titleless_items_removed = dataset.items.len() - titled.len();

    let after_title: Vec<&Interaction> = dataset
        .interactions
        .iter()
        .filter(|i| titled.contains_key(&i.item_id))
        .collect();
    log.interactions_removed_titleless = dataset.interactions.len() - after_title.len();

    let mut per_user: BTreeMap<&str, usize> = BTreeMap::new();
    for i in &after_title {
        *per_user.entry(i.user_id.as_str()).or_default() += 1;
    }
    let keep_users: BTreeSet<&str> = per_user
        .iter()
        .filter(|(_, &n)| n >= MIN_INTERACTIONS_PER_USER)
        .map(|(&u, _)| u)
        .collect();
    log.users_removed_min_interactions = per_user.len() - keep_users.len();

    let surviving: Vec<Interaction> = after_title
        .iter()
        .filter(|i| keep_users.contains(i.user_id.as_str()))
        .map(|i| (*i).clone())
        .collect();
    log.interactions_removed_min_interactions = after_title.len() - surviving.len();

    (
        Dataset {
            dataset_id: dataset.dataset_id.clone(),
            items: titled,
            interactions: surviving,
        },
        log,
    )
}

pub const MIN_INTERACTIONS_PER_USER: usize = 5;

/// Removes from `newer` every user present in `older`, along with their
/// interactions. `older` is left untouched; dataset versions overlap in
/// users and this keeps the older (benchmark) version authoritative.
pub fn dedup_versions(older: &Dataset, newer: &Dataset) -> Dataset {
    let older_users: BTreeSet<&str> = older.user_ids();
    Dataset {
        dataset_id: newer.dataset_id.clone(),
        items: newer.items.clone(),
        interactions: newer
            .interactions
            .iter()
            .filter(|i| !older_users.contains(i.user_id.as_str()))
            .cloned()
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub dataset_id: String,
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
}

/// Exact distinct counts over the interaction log.
pub fn dataset_stats(dataset: &Dataset) -> StatsReport {
    let users: BTreeSet<&str> = dataset.interactions.iter().map(|i| i.user_id.as_str()).collect();
    let items: BTreeSet<&str> = dataset.interactions.iter().map(|i| i.item_id.as_str()).collect();
    StatsReport {
        dataset_id: dataset.dataset_id.clone(),
        n_users: users.len(),
        n_items: items.len(),
        n_interactions: dataset.interactions.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SourceFormat;

    fn descriptor(format: SourceFormat) -> DatasetDescriptor {
        DatasetDescriptor {
            dataset_id: "test".into(),
            source_format: format,
            field_map: [
                ("user", "user_id"),
                ("item", "item_id"),
                ("name", "title"),
                ("rating", "rating"),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
            template: "amazon".into(),
            version_tag: None,
        }
    }

    #[test]
    fn jsonl_reads_valid_records() {
        let src = concat!(
            r#"{"user":"u1","item":"a","name":"A","rating":"5.0"}"#, "\n",
            r#"{"user":"u1","item":"b","name":"B","rating":"4.0"}"#, "\n",
            r#"{"user":"u2","item":"a","name":"A","rating":"3.0"}"#, "\n",
        );
        let mut ds = Dataset::new("test");
        let report =
            read_dataset(&descriptor(SourceFormat::Jsonl), src.as_bytes(), 5.0, &mut ds).unwrap();
        assert_eq!(report.records_read, 3);
        assert_eq!(report.records_skipped, 0);
        assert_eq!(ds.items.len(), 2);
        assert_eq!(ds.interactions.len(), 3);
    }

    #[test]
    fn csv_skips_malformed_rows() {
        let mut src = String::from("user,item,name,rating\n");
        for i in 0..9 {
            src.push_str(&format!("u{i},i{i},Item {i},4.0\n"));
        }
        src.push_str("u9,i9\n"); // short row
        let mut ds = Dataset::new("test");
        let report =
            read_dataset(&descriptor(SourceFormat::Csv), src.as_bytes(), 5.0, &mut ds).unwrap();
        assert_eq!(report.records_read, 9);
        assert_eq!(report.records_skipped, 1);
    }

    #[test]
    fn jsonl_declared_as_csv_is_format_mismatch() {
        let src = r#"{"user":"u1","item":"a","name":"A"}"#;
        let mut ds = Dataset::new("test");
        let err = read_dataset(&descriptor(SourceFormat::Csv), src.as_bytes(), 5.0, &mut ds)
            .unwrap_err();
        assert!(matches!(err, IngestError::FormatMismatch { .. }));
    }

    #[test]
    fn csv_declared_as_jsonl_is_format_mismatch() {
        let src = "user,item,name\nu1,a,A\n";
        let mut ds = Dataset::new("test");
        let err = read_dataset(&descriptor(SourceFormat::Jsonl), src.as_bytes(), 5.0, &mut ds)
            .unwrap_err();
        assert!(matches!(err, IngestError::FormatMismatch { .. }));
    }

    fn fixture_dataset(entries: &[(&str, &str, &str)]) -> Dataset {
        // (user, item, title)
        let mut ds = Dataset::new("test");
        for (n, (user, item, title)) in entries.iter().enumerate() {
            ds.items
                .entry(item.to_string())
                .or_insert_with(|| Item::new(*item, *title));
            ds.interactions.push(Interaction {
                user_id: user.to_string(),
                item_id: item.to_string(),
                rating: Some(4.0),
                review: None,
                timestamp: Some(n as i64),
                dataset_id: "test".into(),
            });
        }
        ds
    }

    #[test]
    fn user_with_four_interactions_removed() {
        let ds = fixture_dataset(&[
            ("u1", "a", "A"),
            ("u1", "b", "B"),
            ("u1", "c", "C"),
            ("u1", "d", "D"),
        ]);
        let (cleaned, log) = clean(&ds);
        assert!(cleaned.interactions.is_empty());
        assert_eq!(log.users_removed_min_interactions, 1);
        assert_eq!(log.interactions_removed_min_interactions, 4);
    }

    #[test]
    fn titleless_item_and_its_interactions_removed() {
        let mut ds = fixture_dataset(&[("u1", "a", "A")]);
        ds.items.insert("bad".into(), Item::new("bad", "  "));
        ds.interactions.push(Interaction {
            user_id: "u2".into(),
            item_id: "bad".into(),
            rating: None,
            review: None,
            timestamp: None,
            dataset_id: "test".into(),
        });
        let (cleaned, log) = clean(&ds);
        assert_eq!(log.titleless_items_removed, 1);
        assert_eq!(log.interactions_removed_titleless, 1);
        assert!(!cleaned.items.contains_key("bad"));
    }

    #[test]
    fn title_filter_cascades_into_user_filter() {
        // u1 has 5 interactions but one is on a titleless item: the title
        // rule drops it to 4, then the user rule removes u1 entirely.
        // u2 keeps 5 titled interactions and survives.
        let mut ds = fixture_dataset(&[
            ("u1", "a", "A"),
            ("u1", "b", "B"),
            ("u1", "c", "C"),
            ("u1", "d", "D"),
            ("u2", "a", "A"),
            ("u2", "b", "B"),
            ("u2", "c", "C"),
            ("u2", "d", "D"),
            ("u2", "e", "E"),
        ]);
        ds.items.insert("untitled".into(), Item::new("untitled", ""));
        ds.interactions.push(Interaction {
            user_id: "u1".into(),
            item_id: "untitled".into(),
            rating: None,
            review: None,
            timestamp: Some(99),
            dataset_id: "test".into(),
        });
        let (cleaned, log) = clean(&ds);
        assert_eq!(log.interactions_removed_titleless, 1);
        assert_eq!(log.users_removed_min_interactions, 1);
        let users = cleaned.user_ids();
        assert!(!users.contains("u1"));
        assert!(users.contains("u2"));
    }

    #[test]
    fn clean_is_idempotent() {
        let ds = fixture_dataset(&[
            ("u1", "a", "A"),
            ("u1", "b", "B"),
            ("u1", "c", "C"),
            ("u1", "d", "D"),
            ("u1", "e", "E"),
            ("u2", "a", "A"),
        ]);
        let (once, _) = clean(&ds);
        let (twice, log) = clean(&once);
        assert_eq!(once, twice);
        assert_eq!(log, CleanLog::default());
    }

    #[test]
    fn dedup_removes_overlapping_users() {
        let older = fixture_dataset(&[("a", "x", "X"), ("b", "x", "X")]);
        let newer = fixture_dataset(&[("b", "y", "Y"), ("c", "y", "Y")]);
        let deduped = dedup_versions(&older, &newer);
        let users = deduped.user_ids();
        assert_eq!(users.into_iter().collect::<Vec<_>>(), vec!["c"]);
    }

    #[test]
    fn dedup_disjoint_is_identity() {
        let older = fixture_dataset(&[("a", "x", "X")]);
        let newer = fixture_dataset(&[("c", "y", "Y")]);
        let deduped = dedup_versions(&older, &newer);
        assert_eq!(deduped.interactions, newer.interactions);
    }

    #[test]
    fn dedup_subset_empties_newer() {
        let older = fixture_dataset(&[("a", "x", "X"), ("b", "x", "X")]);
        let newer = fixture_dataset(&[("a", "y", "Y"), ("b", "y", "Y")]);
        let deduped = dedup_versions(&older, &newer);
        assert!(deduped.interactions.is_empty());
    }

    #[test]
    fn stats_counts_distinct() {
        let ds = fixture_dataset(&[
            ("u1", "a", "A"),
            ("u1", "b", "B"),
            ("u1", "c", "C"),
            ("u2", "b", "B"),
            ("u2", "c", "C"),
            ("u2", "d", "D"),
        ]);
        let stats = dataset_stats(&ds);
        assert_eq!((stats.n_users, stats.n_items, stats.n_interactions), (2, 4, 6));
    }

    #[test]
    fn stats_empty_dataset() {
        let stats = dataset_stats(&Dataset::new("empty"));
        assert_eq!((stats.n_users, stats.n_items, stats.n_interactions), (0, 0, 0));
    }
}
