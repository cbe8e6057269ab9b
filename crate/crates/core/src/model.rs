//! Unified schema shared by every pipeline stage.
//!
//! The canonical on-disk form is JSONL: one [`Item`] per line in the item
//! catalog, one [`Interaction`] per line in the interaction log. Everything
//! downstream (cleaning, corpus and SFT construction, splitting, evaluation)
//! consumes these two record types, so no per-source quirk survives past
//! ingestion.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error("rating {value} outside [0, {scale}]")]
    RatingOutOfRange { value: f64, scale: f64 },
    #[error("malformed timestamp `{0}`")]
    MalformedTimestamp(String),
    #[error("malformed rating `{0}`")]
    MalformedRating(String),
    #[error("interaction references unknown item `{0}`")]
    UnresolvedItem(String),
    #[error("item `{0}` has an empty title")]
    EmptyTitle(String),
}

/// One catalog entry. `attributes` holds the template-declared metadata
/// fields (brand, author, genres, city, description, ...); the title is
/// mandatory and lives outside the map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

impl Item {
    pub fn new(item_id: impl Into<String>, title: impl Into<String>) -> Self {
        Self {
            item_id: item_id.into(),
            title: title.into(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }

    /// Cleaned catalogs never contain titleless items.
    pub fn has_title(&self) -> bool {
        !self.title.trim().is_empty()
    }
}

/// One user-item event. Rating, review and timestamp are all optional:
/// several sources (Netflix, Steam) lack one or more of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
    pub dataset_id: String,
}

/// Chronologically ordered interaction history of one user, with each
/// interaction joined to its catalog item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub dataset_id: String,
    pub entries: Vec<HistoryEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub item: Item,
    pub interaction: Interaction,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same user and dataset, restricted to a contiguous entry range.
    pub fn slice(&self, range: std::ops::Range<usize>) -> UserHistory {
        UserHistory {
            user_id: self.user_id.clone(),
            dataset_id: self.dataset_id.clone(),
            entries: self.entries[range].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Jsonl,
    Csv,
}

/// Describes how one raw source file maps onto the unified schema.
///
/// `field_map` maps source column/field names to schema field names. Schema
/// names `user_id`, `item_id`, `title`, `rating`, `review` and `timestamp`
/// are reserved; any other target name becomes an item attribute key (e.g.
/// `"brand" -> "brand"`, `"genre" -> "genres"`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub source_format: SourceFormat,
    pub field_map: BTreeMap<String, String>,
    /// Template domain id, e.g. `amazon`, `anime`, `yelp`.
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version_tag: Option<String>,
}

impl DatasetDescriptor {
    /// The mapping must cover at least user_id, item_id and title.
    pub fn validate(&self) -> Result<(), ModelError> {
        for required in ["user_id", "item_id", "title"] {
            if !self.field_map.values().any(|v| v == required) {
                return Err(ModelError::MissingField(required.to_string()));
            }
        }
        Ok(())
    }

    /// Source field name mapped to the given schema field, if any.
    pub fn source_for(&self, schema_field: &str) -> Option<&str> {
        self.field_map
            .iter()
            .find(|(_, v)| v.as_str() == schema_field)
            .map(|(k, _)| k.as_str())
    }
}

fn lookup<'a>(
    raw: &'a BTreeMap<String, String>,
    descriptor: &DatasetDescriptor,
    schema_field: &str,
) -> Option<&'a str> {
    let source = descriptor.source_for(schema_field)?;
    raw.get(source).map(String::as_str).filter(|v| !v.is_empty())
}

/// Validates one raw record into an [`Interaction`].
///
/// Out-of-range ratings are rejected, not clamped; a missing user or item id
/// is an error, while rating/review/timestamp are optional.
pub fn validate_interaction(
    raw: &BTreeMap<String, String>,
    descriptor: &DatasetDescriptor,
    rating_scale: f64,
) -> Result<Interaction, ModelError> {
    let user_id = lookup(raw, descriptor, "user_id")
        .ok_or_else(|| ModelError::MissingField("user_id".into()))?;
    let item_id = lookup(raw, descriptor, "item_id")
        .ok_or_else(|| ModelError::MissingField("item_id".into()))?;

    let rating = match lookup(raw, descriptor, "rating") {
        Some(text) => {
            let value: f64 = text
                .trim()
                .parse()
                .map_err(|_| ModelError::MalformedRating(text.to_string()))?;
            if !(0.0..=rating_scale).contains(&value) {
                return Err(ModelError::RatingOutOfRange {
                    value,
                    scale: rating_scale,
                });
            }
            Some(value)
        }
        None => None,
    };

    let review = lookup(raw, descriptor, "review").map(str::to_string);

    let timestamp = match lookup(raw, descriptor, "timestamp") {
        Some(text) => Some(
            text.trim()
                .parse::<i64>()
                .map_err(|_| ModelError::MalformedTimestamp(text.to_string()))?,
        ),
        None => None,
    };

    Ok(Interaction {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        rating,
        review,
        timestamp,
        dataset_id: descriptor.dataset_id.clone(),
    })
}

/// Extracts the item carried on a raw record: title plus any mapped
/// attribute fields.
pub fn extract_item(
    raw: &BTreeMap<String, String>,
    descriptor: &DatasetDescriptor,
) -> Result<Item, ModelError> {
    let item_id = lookup(raw, descriptor, "item_id")
        .ok_or_else(|| ModelError::MissingField("item_id".into()))?;
    let title = lookup(raw, descriptor, "title").unwrap_or("");
    let mut item = Item::new(item_id, title);
    for (source, schema) in &descriptor.field_map {
        match schema.as_str() {
            "user_id" | "item_id" | "title" | "rating" | "review" | "timestamp" => {}
            attr => {
                if let Some(value) = raw.get(source).filter(|v| !v.trim().is_empty()) {
                    item.attributes.insert(attr.to_string(), value.clone());
                }
            }
        }
    }
    Ok(item)
}

/// Groups interactions into per-user histories, stably sorted by timestamp.
///
/// Entries without a timestamp sort after all timestamped entries; ties and
/// missing timestamps preserve source order. Output is sorted by
/// (user_id, dataset_id) so repeated runs emit histories in the same order.
pub fn build_histories<'a, I>(
    interactions: I,
    items: &BTreeMap<String, Item>,
) -> Result<Vec<UserHistory>, ModelError>
where
    I: IntoIterator<Item = &'a Interaction>,
{
    let mut by_user: BTreeMap<(String, String), Vec<(usize, Interaction)>> = BTreeMap::new();
    for (pos, interaction) in interactions.into_iter().enumerate() {
        if !items.contains_key(&interaction.item_id) {
            return Err(ModelError::UnresolvedItem(interaction.item_id.clone()));
        }
        by_user
            .entry((interaction.user_id.clone(), interaction.dataset_id.clone()))
            .or_default()
            .push((pos, interaction.clone()));
    }

    let mut histories = Vec::with_capacity(by_user.len());
    for ((user_id, dataset_id), mut events) in by_user {
        // Missing timestamps become i64::MAX so they land after every real
        // timestamp; the source position breaks ties stably.
        events.sort_by_key(|(pos, i)| (i.timestamp.unwrap_or(i64::MAX), *pos));
        let entries = events
            .into_iter()
            .map(|(_, interaction)| HistoryEntry {
                item: items[&interaction.item_id].clone(),
                interaction,
            })
            .collect();
        histories.push(UserHistory {
            user_id,
            dataset_id,
            entries,
        });
    }
    Ok(histories)
}

/// Writes records as one JSON object per line.
pub fn write_jsonl<T: Serialize, W: Write>(
    mut writer: W,
    records: impl IntoIterator<Item = T>,
) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads one record per line, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(
    reader: R,
) -> std::io::Result<Vec<T>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
