//! Instruction-pair construction for the two fine-tuning tasks.
//!
//! From a history i_1..i_n:
//! - the rating task predicts the rating of i_{n-1} from i_1..i_{n-1}
//!   rendered without that final rating value;
//! - the seqrec task predicts i_n from i_1..i_{n-1} rendered with the
//!   seqrec field list (no ratings or reviews).
//!
//! Prompts are framed as
//! `### Instruction:\n{instruction}\n{header}\n{context lines}\n### Response:`
//! and a training pair serializes as `prompt + "\n" + response`, which puts
//! the full `### Response:` marker line inside the prompt and leaves a
//! unique split point for parsing pairs back out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{chunk_history, CorpusError, TokenCounter};
use crate::model::UserHistory;
use crate::template::{FieldSet, TemplateError, TemplateSet, TemplateSpec};

#[derive(Debug, Error)]
pub enum SftError {
    #[error("history for user `{user_id}` too short: need at least {needed} entries, have {have}")]
    HistoryTooShort {
        user_id: String,
        needed: usize,
        have: usize,
    },
    #[error("label item for user `{0}` has no rating")]
    MissingLabelRating(String),
    #[error("prompt for user `{0}` cannot fit the token budget")]
    PromptExceedsBudget(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rating,
    Seqrec,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Rating => write!(f, "rating"),
            Task::Seqrec => write!(f, "seqrec"),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "rating" => Ok(Task::Rating),
            "seqrec" => Ok(Task::Seqrec),
            other => Err(format!("unknown task `{other}` (expected rating or seqrec)")),
        }
    }
}

/// Which history position supplies the rating label. The second-last item
/// is the default; `Last` is the conventional alternative, exposed for
/// comparison studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatingLabelPosition {
    #[default]
    SecondLast,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSample {
    pub prompt: String,
    pub response: String,
    pub task: Task,
    pub user_id: String,
    pub dataset_id: String,
}

impl PromptSample {
    /// Training serialization: prompt, newline, response.
    pub fn serialize_pair(&self) -> String {
        format!("{}\n{}", self.prompt, self.response)
    }

    /// Splits a serialized pair at the final `### Response:` marker line.
    pub fn split_pair(text: &str) -> Option<(&str, &str)> {
        let marker = "\n### Response:\n";
        let at = text.rfind(marker)?;
        Some((&text[..at + marker.len() - 1], &text[at + marker.len()..]))
    }
}

const INSTRUCTION_PREFIX: &str = "### Instruction:";
const RESPONSE_MARKER: &str = "### Response:";

fn frame_prompt(instruction: &str, header: &str, context_lines: &[String]) -> String {
    let mut prompt = format!("{INSTRUCTION_PREFIX}\n{instruction}\n{header}");
    for line in context_lines {
        prompt.push('\n');
        prompt.push_str(line);
    }
    prompt.push('\n');
    prompt.push_str(RESPONSE_MARKER);
    prompt
}

fn too_short(history: &UserHistory, needed: usize) -> SftError {
    SftError::HistoryTooShort {
        user_id: history.user_id.clone(),
        needed,
        have: history.len(),
    }
}

/// Builds the rating-prediction sample for one history.
///
/// The context is i_1..i_{label-1} with full rating-task fields followed by
/// the label item rendered without its rating value, ending exactly at
/// `Rating:`; the response is `{rating}/{scale}`. With the default label
/// position the last history item does not appear in the prompt at all.
pub fn make_rating_sample(
    history: &UserHistory,
    template: &TemplateSpec,
    label_position: RatingLabelPosition,
) -> Result<PromptSample, SftError> {
    let instruction = template
        .instruction_rating
        .as_deref()
        .ok_or_else(|| TemplateError::RatingUnsupported(template.domain_id.clone()))?;
    if history.len() < 2 {
        return Err(too_short(history, 2));
    }
    let label_index = match label_position {
        RatingLabelPosition::SecondLast => history.len() - 2,
        RatingLabelPosition::Last => history.len() - 1,
    };
    let label = &history.entries[label_index];
    let rating = label
        .interaction
        .rating
        .ok_or_else(|| SftError::MissingLabelRating(history.user_id.clone()))?;

    let mut context_lines = Vec::with_capacity(label_index + 1);
    for entry in &history.entries[..label_index] {
        context_lines.push(template.render_entry(entry, FieldSet::Rating)?);
    }
    context_lines.push(template.render_rating_label_entry(label)?);

    Ok(PromptSample {
        prompt: frame_prompt(instruction, &template.header, &context_lines),
        response: format!("{:.1}/{:.1}", rating, template.rating_scale),
        task: Task::Rating,
        user_id: history.user_id.clone(),
        dataset_id: history.dataset_id.clone(),
    })
}

/// Builds the next-item sample for one history: context i_1..i_{n-1} with
/// seqrec fields, response i_n with the seqrec response field list.
pub fn make_seqrec_sample(
    history: &UserHistory,
    template: &TemplateSpec,
) -> Result<PromptSample, SftError> {
    if history.len() < 2 {
        return Err(too_short(history, 2));
    }
    let (label, context) = history.entries.split_last().expect("len >= 2");
    let mut context_lines = Vec::with_capacity(context.len());
    for entry in context {
        context_lines.push(template.render_entry(entry, FieldSet::Seqrec)?);
    }
    Ok(PromptSample {
        prompt: frame_prompt(&template.instruction_seqrec, &template.header, &context_lines),
        response: template.render_response(&label.item),
        task: Task::Seqrec,
        user_id: history.user_id.clone(),
        dataset_id: history.dataset_id.clone(),
    })
}

/// Settings for batch SFT construction.
pub struct SftOptions<'a> {
    pub tasks: &'a [Task],
    pub budget: usize,
    pub counter: &'a dyn TokenCounter,
    pub rating_label: RatingLabelPosition,
}

/// Emits one sample per (history, requested task) whose preconditions hold.
///
/// Histories too short for a task, or without a rated label item, are
/// silently skipped — at corpus scale those are data facts, not errors.
/// Prompts over the token budget are rebuilt on a suffix of the context:
/// the context is chunked like a pre-training history and the most recent
/// chunk (the one adjacent to the label) is kept, then shrunk further if
/// the instruction overhead still pushes the prompt over budget.
pub fn build_sft_dataset(
    histories: &[UserHistory],
    templates: &TemplateSet,
    template_for: &dyn Fn(&str) -> String,
    options: &SftOptions,
) -> Result<Vec<PromptSample>, SftError> {
    let mut ordered: Vec<&UserHistory> = histories.iter().collect();
    ordered.sort_by(|a, b| (&a.user_id, &a.dataset_id).cmp(&(&b.user_id, &b.dataset_id)));

    let mut samples = Vec::new();
    for history in ordered {
        let template = templates.get(&template_for(&history.dataset_id))?;
        let mut tasks = options.tasks.to_vec();
        tasks.sort_unstable();
        tasks.dedup();
        for task in tasks {
            match build_sample(history, template, task, options) {
                Ok(sample) => samples.push(sample),
                Err(
                    SftError::HistoryTooShort { .. }
                    | SftError::MissingLabelRating(..)
                    | SftError::Template(TemplateError::RatingUnsupported(..)),
                ) => {}
                Err(other) => return Err(other),
            }
        }
    }
    Ok(samples)
}

/// Builds one budget-respecting sample for (history, task), or an error
/// describing why the history is ineligible.
pub fn build_sample(
    history: &UserHistory,
    template: &TemplateSpec,
    task: Task,
    options: &SftOptions,
) -> Result<PromptSample, SftError> {
    let make = |h: &UserHistory| -> Result<PromptSample, SftError> {
        match task {
            Task::Rating => make_rating_sample(h, template, options.rating_label),
            Task::Seqrec => make_seqrec_sample(h, template),
        }
    };

    let sample = make(history)?;
    if options.counter.count(&sample.prompt) < options.budget {
        return Ok(sample);
    }

    // Over budget: chunk the context portion (everything that feeds the
    // prompt) and keep the most recent chunk so the label stays adjacent
    // to its context. The label entry itself must survive, so shrinking
    // stops when only the minimal 2-entry history is left.
    let field_set = match task {
        Task::Rating => FieldSet::Rating,
        Task::Seqrec => FieldSet::Seqrec,
    };
    let context = history.slice(0..history.len() - 1);
    let chunks = chunk_history(&context, template, field_set, options.budget, options.counter)?;
    let last_chunk = chunks.last().expect("chunking yields at least one chunk");

    let mut keep = last_chunk.len();
    loop {
        let mut entries = context.entries[context.len() - keep..].to_vec();
        entries.push(history.entries[history.len() - 1].clone());
        let trimmed = UserHistory {
            user_id: history.user_id.clone(),
            dataset_id: history.dataset_id.clone(),
            entries,
        };
        let sample = make(&trimmed)?;
        if options.counter.count(&sample.prompt) < options.budget {
            return Ok(sample);
        }
        if keep <= 1 {
            return Err(SftError::PromptExceedsBudget(history.user_id.clone()));
        }
        keep -= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ApproxByteCounter;
    use crate::model::{HistoryEntry, Interaction, Item};

    fn amazon_entry(user: &str, n: usize, title: &str, brand: &str, review: &str, rating: f64) -> HistoryEntry {
        HistoryEntry {
            item: Item::new(format!("i{n}"), title).with_attr("brand", brand),
            interaction: Interaction {
                user_id: user.into(),
                item_id: format!("i{n}"),
                rating: Some(rating),
                review: Some(review.into()),
                timestamp: Some(n as i64),
                dataset_id: "amazon".into(),
            },
        }
    }

    fn amazon_history(user: &str, n: usize) -> UserHistory {
        UserHistory {
            user_id: user.into(),
            dataset_id: "amazon".into(),
            entries: (0..n)
                .map(|k| amazon_entry(user, k, &format!("Item {k}"), "Acme", &format!("review {k}"), 4.0))
                .collect(),
        }
    }

    #[test]
    fn rating_sample_shape() {
        let set = TemplateSet::builtin();
        let t = set.get("amazon").unwrap();
        let h = amazon_history("u1", 4);
        let s = make_rating_sample(&h, t, RatingLabelPosition::SecondLast).unwrap();
        assert!(s.prompt.starts_with("### Instruction:\n"));
        assert!(s.prompt.ends_with("; Rating:\n### Response:"));
        assert_eq!(s.response, "4.0/5.0");
        // Label is i_3 of 4; i_4 must not appear anywhere in the prompt.
        assert!(!s.prompt.contains("Item 3"));
        assert!(s.prompt.contains("Item 2"));
    }

    #[test]
    fn rating_sample_needs_two_entries() {
        let set = TemplateSet::builtin();
        let t = set.get("amazon").unwrap();
        let h = amazon_history("u1", 1);
        assert!(matches!(
            make_rating_sample(&h, t, RatingLabelPosition::SecondLast),
            Err(SftError::HistoryTooShort { .. })
        ));
    }

    #[test]
    fn rating_sample_uses_domain_scale() {
        let set = TemplateSet::builtin();
        let t = set.get("anime").unwrap();
        let mut h = amazon_history("u1", 3);
        h.dataset_id = "anime".into();
        for e in &mut h.entries {
            e.interaction.rating = Some(7.0);
            e.item.attributes.insert("genres".into(), "Action".into());
        }
        let s = make_rating_sample(&h, t, RatingLabelPosition::SecondLast).unwrap();
        assert_eq!(s.response, "7.0/10.0");
    }

    #[test]
    fn rating_label_flag_switches_to_last_item() {
        let set = TemplateSet::builtin();
        let t = set.get("amazon").unwrap();
        let mut h = amazon_history("u1", 4);
        h.entries[3].interaction.rating = Some(2.0);
        let s = make_rating_sample(&h, t, RatingLabelPosition::Last).unwrap();
        assert_eq!(s.response, "2.0/5.0");
        assert!(s.prompt.contains("Item 3"));
    }

    #[test]
    fn unrated_label_is_an_error() {
        let set = TemplateSet::builtin();
        let t = set.get("amazon").unwrap();
        let mut h = amazon_history("u1", 4);
        h.entries[2].interaction.rating = None;
        assert!(matches!(
            make_rating_sample(&h, t, RatingLabelPosition::SecondLast),
            Err(SftError::MissingLabelRating(_))
        ));
    }

    #[test]
    fn seqrec_sample_shape() {
        let set = TemplateSet::builtin();
        let t = set.get("amazon").unwrap();
        let h = amazon_history("u1", 4);
        let s = make_seqrec_sample(&h, t).unwrap();
        assert_eq!(s.response, "Title: Item 3; Brand: Acme");
        // Seqrec context must not leak ratings or reviews.
        assert!(!s.prompt.contains("Rating"));
        assert!(!s.prompt.contains("Review"));
        assert!(!s.prompt.contains("Title: Item 3"));
        assert!(s.prompt.ends_with("\n### Response:"));
    }

    #[test]
    fn seqrec_minimal_history_has_one_context_line() {
        let set = TemplateSet::builtin();
        let t = set.get("amazon").unwrap();
        let h = amazon_history("u1", 2);
        let s = make_seqrec_sample(&h, t).unwrap();
        let context_lines = s
            .prompt
            .lines()
            .filter(|l| l.starts_with("Title: "))
            .count();
        assert_eq!(context_lines, 1);
    }

    #[test]
    fn pair_serialization_round_trips() {
        let set = TemplateSet::builtin();
        let t = set.get("amazon").unwrap();
        let h = amazon_history("u1", 3);
        let s = make_seqrec_sample(&h, t).unwrap();
        let text = s.serialize_pair();
        let (prompt, response) = PromptSample::split_pair(&text).unwrap();
        assert_eq!(prompt, s.prompt);
        assert_eq!(response, s.response);
    }

    #[test]
    fn batch_emits_per_task_and_filters_preconditions() {
        let set = TemplateSet::builtin();
        let mut histories: Vec<UserHistory> =
            (0..10).map(|i| amazon_history(&format!("u{i}"), 5)).collect();
        let options = SftOptions {
            tasks: &[Task::Rating, Task::Seqrec],
            budget: 2048,
            counter: &ApproxByteCounter,
            rating_label: RatingLabelPosition::SecondLast,
        };
        let samples =
            build_sft_dataset(&histories, &set, &|_| "amazon".into(), &options).unwrap();
        assert_eq!(samples.len(), 20);

        // Unrating the label item drops the rating sample but keeps seqrec.
        let n = histories[0].len();
        histories[0].entries[n - 2].interaction.rating = None;
        let samples =
            build_sft_dataset(&histories, &set, &|_| "amazon".into(), &options).unwrap();
        assert_eq!(samples.len(), 19);
        let u0: Vec<_> = samples.iter().filter(|s| s.user_id == "u0").collect();
        assert_eq!(u0.len(), 1);
        assert_eq!(u0[0].task, Task::Seqrec);
    }

    #[test]
    fn over_budget_prompt_keeps_suffix_and_fits() {
        let set = TemplateSet::builtin();
        let h = UserHistory {
            user_id: "u1".into(),
            dataset_id: "amazon".into(),
            entries: (0..40)
                .map(|k| {
                    amazon_entry(
                        "u1",
                        k,
                        &format!("Item {k}"),
                        "Acme",
                        &"long review text ".repeat(20),
                        4.0,
                    )
                })
                .collect(),
        };
        let counter = ApproxByteCounter;
        let options = SftOptions {
            tasks: &[Task::Rating],
            budget: 512,
            counter: &counter,
            rating_label: RatingLabelPosition::SecondLast,
        };
        let samples = build_sft_dataset(&[h], &set, &|_| "amazon".into(), &options).unwrap();
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        assert!(counter.count(&s.prompt) < 512);
        // The label line (item 38 of 40, rendered without its rating) must
        // still terminate the context.
        assert!(s.prompt.contains("Title: Item 38"));
        assert!(s.prompt.ends_with("; Rating:\n### Response:"));
        assert_eq!(s.response, "4.0/5.0");
    }
}
