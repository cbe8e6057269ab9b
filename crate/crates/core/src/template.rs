//! Per-domain rendering templates.
//!
//! A [`TemplateSpec`] describes how one domain's histories turn into text:
//! the header line, the ordered field list for each task, the rating scale
//! and the instruction sentences. The built-in set covers twelve domains
//! (Amazon, Amazon Books, Anime, BookCrossing, Food, Goodreads, HotelRec,
//! MovieLens, Netflix, Steam, WikiRec, Yelp); custom sets load from the same
//! JSON shape via [`TemplateSet::from_json`].
//!
//! Rendering rules, uniform across domains:
//! - one line per history entry, fields joined by `"; "` in template order;
//! - a field whose value is missing is omitted entirely (no empty segment);
//! - ratings render as `{value}/{scale}` with exactly one decimal each,
//!   e.g. `4.0/5.0` or `7.0/10.0`;
//! - lines are newline-separated with no trailing newline.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{HistoryEntry, Item, UserHistory};

pub const BUILTIN_TEMPLATES_JSON: &str = include_str!("../assets/templates.json");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown template domain `{0}`")]
    UnknownDomain(String),
    #[error("unknown template field `{0}`")]
    UnknownTemplateField(String),
    #[error("domain `{0}` has no rating-prediction template")]
    RatingUnsupported(String),
    #[error("rating scale {0} is not one of 5.0, 10.0")]
    InvalidScale(f64),
    #[error("invalid template for domain `{domain}`: {reason}")]
    InvalidTemplate { domain: String, reason: String },
    #[error("failed to parse template config: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Where a rendered field's value comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FieldSource {
    /// The item title (mandatory on every item).
    Title,
    /// The interaction's rating, rendered as `{value}/{scale}`.
    Rating,
    /// The interaction's review text.
    Review,
    /// A named item attribute (brand, author, genres, city, ...).
    Attribute(String),
}

/// One template field: a display label plus a value source.
///
/// The config form is `"Label"` (source defaults to the lowercased label)
/// or `"Label:source"` when they differ, e.g. `"Author:brand"` for sources
/// that store the author under a brand attribute.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldSpec {
    pub label: String,
    pub source: FieldSource,
}

impl FieldSpec {
    fn parse(text: &str) -> Result<Self, TemplateError> {
        let (label, source_name) = match text.split_once(':') {
            Some((l, s)) => (l.trim(), s.trim().to_string()),
            None => (text.trim(), text.trim().to_lowercase()),
        };
        if label.is_empty() || source_name.is_empty() {
            return Err(TemplateError::UnknownTemplateField(text.to_string()));
        }
        let source = match source_name.as_str() {
            "title" => FieldSource::Title,
            "rating" => FieldSource::Rating,
            "review" => FieldSource::Review,
            other => FieldSource::Attribute(other.to_string()),
        };
        Ok(FieldSpec {
            label: label.to_string(),
            source,
        })
    }

    fn config_form(&self) -> String {
        let default_source = self.label.to_lowercase();
        let source_name = match &self.source {
            FieldSource::Title => "title".to_string(),
            FieldSource::Rating => "rating".to_string(),
            FieldSource::Review => "review".to_string(),
            FieldSource::Attribute(a) => a.clone(),
        };
        if source_name == default_source {
            self.label.clone()
        } else {
            format!("{}:{}", self.label, source_name)
        }
    }
}

impl Serialize for FieldSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.config_form())
    }
}

impl<'de> Deserialize<'de> for FieldSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        FieldSpec::parse(&text).map_err(D::Error::custom)
    }
}

/// Which task's field list to render with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldSet {
    Pretrain,
    Rating,
    Seqrec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub domain_id: String,
    pub header: String,
    pub rating_scale: f64,
    pub item_fields_pretrain: Vec<FieldSpec>,
    /// Absent for sources without ratings (Steam, WikiRec).
    pub item_fields_rating: Option<Vec<FieldSpec>>,
    pub item_fields_seqrec: Vec<FieldSpec>,
    pub response_fields_seqrec: Vec<FieldSpec>,
    pub instruction_rating: Option<String>,
    pub instruction_seqrec: String,
}

impl TemplateSpec {
    pub fn supports_rating(&self) -> bool {
        self.item_fields_rating.is_some() && self.instruction_rating.is_some()
    }

    pub fn fields(&self, set: FieldSet) -> Result<&[FieldSpec], TemplateError> {
        match set {
            FieldSet::Pretrain => Ok(&self.item_fields_pretrain),
            FieldSet::Seqrec => Ok(&self.item_fields_seqrec),
            FieldSet::Rating => self
                .item_fields_rating
                .as_deref()
                .ok_or_else(|| TemplateError::RatingUnsupported(self.domain_id.clone())),
        }
    }

    fn validate(&self) -> Result<(), TemplateError> {
        if self.rating_scale != 5.0 && self.rating_scale != 10.0 {
            return Err(TemplateError::InvalidScale(self.rating_scale));
        }
        let fail = |reason: &str| {
            Err(TemplateError::InvalidTemplate {
                domain: self.domain_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.header.trim().is_empty() {
            return fail("empty header");
        }
        if self.item_fields_rating.is_some() != self.instruction_rating.is_some() {
            return fail("rating fields and rating instruction must be present together");
        }
        if let Some(fields) = &self.item_fields_rating {
            match fields.last() {
                Some(f) if f.source == FieldSource::Rating => {}
                _ => return fail("rating field list must end with the rating field"),
            }
        }
        for f in self.item_fields_seqrec.iter().chain(&self.response_fields_seqrec) {
            if matches!(f.source, FieldSource::Rating | FieldSource::Review) {
                return fail("seqrec fields must not include rating or review");
            }
        }
        Ok(())
    }

    fn field_value(&self, entry: &HistoryEntry, field: &FieldSpec) -> Option<String> {
        match &field.source {
            FieldSource::Title => Some(entry.item.title.clone()),
            FieldSource::Rating => entry
                .interaction
                .rating
                .map(|r| format!("{:.1}/{:.1}", r, self.rating_scale)),
            FieldSource::Review => entry
                .interaction
                .review
                .clone()
                .filter(|r| !r.trim().is_empty()),
            FieldSource::Attribute(key) => entry
                .item
                .attributes
                .get(key)
                .filter(|v| !v.trim().is_empty())
                .cloned(),
        }
    }

    /// One history entry as a single `Label: value; ...` line.
    pub fn render_entry(&self, entry: &HistoryEntry, set: FieldSet) -> Result<String, TemplateError> {
        let fields = self.fields(set)?;
        let segments: Vec<String> = fields
            .iter()
            .filter_map(|f| self.field_value(entry, f).map(|v| format!("{}: {}", f.label, v)))
            .collect();
        Ok(segments.join("; "))
    }

    /// The rating-task line for the label item: every rating field except the
    /// rating value, terminated by the bare rating label (`...; Rating:`).
    pub fn render_rating_label_entry(&self, entry: &HistoryEntry) -> Result<String, TemplateError> {
        let fields = self
            .item_fields_rating
            .as_deref()
            .ok_or_else(|| TemplateError::RatingUnsupported(self.domain_id.clone()))?;
        let (rating_field, rest) = fields.split_last().expect("validated non-empty");
        let segments: Vec<String> = rest
            .iter()
            .filter_map(|f| self.field_value(entry, f).map(|v| format!("{}: {}", f.label, v)))
            .collect();
        if segments.is_empty() {
            Ok(format!("{}:", rating_field.label))
        } else {
            Ok(format!("{}; {}:", segments.join("; "), rating_field.label))
        }
    }

    /// An item rendered with the seqrec response field list; also the text
    /// the matcher embeds for catalog grounding.
    pub fn render_response(&self, item: &Item) -> String {
        let entry = HistoryEntry {
            item: item.clone(),
            interaction: crate::model::Interaction {
                user_id: String::new(),
                item_id: item.item_id.clone(),
                rating: None,
                review: None,
                timestamp: None,
                dataset_id: String::new(),
            },
        };
        self.response_fields_seqrec
            .iter()
            .filter_map(|f| self.field_value(&entry, f).map(|v| format!("{}: {}", f.label, v)))
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Full document: header line, then one line per entry in order.
    /// An empty history renders as the header alone.
    pub fn render_history(&self, history: &UserHistory, set: FieldSet) -> Result<String, TemplateError> {
        let mut out = self.header.clone();
        for entry in &history.entries {
            out.push('\n');
            out.push_str(&self.render_entry(entry, set)?);
        }
        Ok(out)
    }
}

/// A loaded collection of domain templates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateSet {
    pub domains: Vec<TemplateSpec>,
}

impl TemplateSet {
    /// The twelve built-in domain templates compiled into the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_TEMPLATES_JSON).expect("built-in template config is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, TemplateError> {
        let set: TemplateSet = serde_json::from_str(json)?;
        let mut seen = std::collections::BTreeSet::new();
        for spec in &set.domains {
            spec.validate()?;
            if !seen.insert(spec.domain_id.as_str()) {
                return Err(TemplateError::InvalidTemplate {
                    domain: spec.domain_id.clone(),
                    reason: "duplicate domain_id".to_string(),
                });
            }
        }
        Ok(set)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::InvalidTemplate {
            domain: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn get(&self, domain_id: &str) -> Result<&TemplateSpec, TemplateError> {
        self.domains
            .iter()
            .find(|d| d.domain_id == domain_id)
            .ok_or_else(|| TemplateError::UnknownDomain(domain_id.to_string()))
    }
}
