//! Pipeline orchestration behind the `recpipe` CLI.
//!
//! Every subcommand is a library function here so integration tests can
//! drive runs without spawning processes. Each stage writes its declared
//! artifacts plus a run manifest; files are written to a temp path and
//! promoted with an atomic rename so an interrupted run never leaves a
//! half-written artifact in place.
//!
//! On-disk layout for a data directory: one subdirectory per dataset id
//! containing `items.jsonl`, `interactions.jsonl`, `descriptor.json` and
//! the ingest reports.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    assign_split, build_corpus, split_users, ApproxByteCounter, SplitSide, DEFAULT_SPLIT_RATIO,
    DEFAULT_TOKEN_BUDGET,
};
use crate::evaluator::{
    evaluate_rating_run, evaluate_seqrec_run, Candidate, MetricReport, RankedPrediction,
    RatingPrediction,
};
use crate::generation::{
    run_batch, Backend, DecodingParams, GeneratedOutput, HttpBackend, MockBackend, TruthMode,
};
use crate::hash::fnv1a64;
use crate::ingest::{
    clean, dataset_stats, dedup_versions, read_dataset, CleanLog, Dataset, ReadReport, StatsReport,
};
use crate::leakage::{
    filter_train, find_leaks, key_set, leave_one_out_assignment, random_interaction_split,
    InteractionKey, KeyMode, SplitAssignment, RANDOM_SPLIT_RATIOS,
};
use crate::matcher::{build_index, match_top, ItemIndex, NgramHashEmbedder};
use crate::model::{
    build_histories, read_jsonl, write_jsonl, DatasetDescriptor, Interaction, Item, UserHistory,
};
use crate::sft::{build_sample, PromptSample, RatingLabelPosition, SftError, SftOptions, Task};
use crate::template::{TemplateError, TemplateSet};

pub const CRATE_VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub descriptor: PathBuf,
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Mock {
        #[serde(default)]
        mock_seed: u64,
        #[serde(default)]
        truth_mode: TruthMode,
    },
    Http {
        url: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default = "default_retries")]
        retries: u32,
        #[serde(default)]
        auth_env: Option<String>,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock { mock_seed: 0, truth_mode: TruthMode::FromHash }
    }
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_retries() -> u32 {
    3
}

fn default_seed() -> u64 {
    42
}

fn default_budget() -> usize {
    DEFAULT_TOKEN_BUDGET
}

fn default_ratio() -> f64 {
    DEFAULT_SPLIT_RATIO
}

fn default_tasks() -> Vec<Task> {
    vec![Task::Rating, Task::Seqrec]
}

fn default_cutoffs() -> Vec<u32> {
    vec![5, 10]
}

fn default_max_in_flight() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4)
}

/// Full-run configuration; every field is overridable from the command
/// line by the CLI layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub datasets: Vec<DatasetEntry>,
    #[serde(default)]
    pub template_file: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub token_budget: usize,
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<Task>,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<u32>,
    #[serde(default)]
    pub rating_label: RatingLabelPosition,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    pub out_dir: PathBuf,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config file {}", path.display()))?;
        Ok(config)
    }

    /// Referenced paths must exist before a run starts.
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            bail!("config lists no datasets");
        }
        for entry in &self.datasets {
            require_exists(&entry.descriptor, "descriptor")?;
            for input in &entry.inputs {
                require_exists(input, "input")?;
            }
        }
        if let Some(tf) = &self.template_file {
            require_exists(tf, "template file")?;
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            bail!("split_ratio {} must be in (0, 1)", self.split_ratio);
        }
        if self.tasks.is_empty() {
            bail!("config lists no tasks");
        }
        if self.cutoffs.iter().any(|&k| k == 0) {
            bail!("cutoffs must be at least 1");
        }
        if self.max_in_flight == 0 {
            bail!("max_in_flight must be at least 1");
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(canonical.as_bytes()))
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{} not found: {}", what, path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifests and atomic output promotion
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub counts: BTreeMap<String, u64>,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        RunManifest {
            config_hash: config_hash.into(),
            seed,
            version: CRATE_VERSION.to_string(),
            counts: BTreeMap::new(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn count(mut self, key: &str, value: u64) -> Self {
        self.counts.insert(key.to_string(), value);
        self
    }
}

/// Writes to `<path>.tmp` then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| anyhow!("output path {} has no file name", path.display()))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("cannot promote {} to {}", tmp.display(), path.display()))?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_jsonl_atomic<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records)?;
    write_atomic(path, &buf)
}

// ---------------------------------------------------------------------------
// Templates and dataset directories
// ---------------------------------------------------------------------------

pub fn load_templates(path: Option<&Path>) -> Result<TemplateSet> {
    match path {
        Some(p) => {
            require_exists(p, "template file")?;
            Ok(TemplateSet::load(p)?)
        }
        None => Ok(TemplateSet::builtin()),
    }
}

/// One ingested dataset on disk.
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub descriptor: DatasetDescriptor,
}

pub fn dataset_dir(data_dir: &Path, dataset_id: &str) -> PathBuf {
    data_dir.join(dataset_id)
}

/// Persists a dataset into `<data_dir>/<dataset_id>/`.
pub fn save_dataset(data_dir: &Path, loaded: &LoadedDataset) -> Result<PathBuf> {
    let dir = dataset_dir(data_dir, &loaded.dataset.dataset_id);
    fs::create_dir_all(&dir)?;
    write_jsonl_atomic(
        &dir.join("items.jsonl"),
        &loaded.dataset.items.values().cloned().collect::<Vec<Item>>(),
    )?;
    write_jsonl_atomic(&dir.join("interactions.jsonl"), &loaded.dataset.interactions)?;
    write_json_atomic(&dir.join("descriptor.json"), &loaded.descriptor)?;
    Ok(dir)
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let descriptor: DatasetDescriptor = read_json(&dir.join("descriptor.json"))?;
    let items: Vec<Item> = read_jsonl_file(&dir.join("items.jsonl"))?;
    let interactions: Vec<Interaction> = read_jsonl_file(&dir.join("interactions.jsonl"))?;
    Ok(LoadedDataset {
        dataset: Dataset {
            dataset_id: descriptor.dataset_id.clone(),
            items: items.into_iter().map(|i| (i.item_id.clone(), i)).collect(),
            interactions,
        },
        descriptor,
    })
}

/// Scans a data directory for ingested datasets, in name order.
pub fn discover_datasets(data_dir: &Path) -> Result<Vec<LoadedDataset>> {
    require_exists(data_dir, "data directory")?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(data_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("descriptor.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no ingested datasets under {}", data_dir.display());
    }
    dirs.iter().map(|d| load_dataset(d)).collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("cannot parse {}", path.display()))
}

fn read_jsonl_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_jsonl(BufReader::new(file)).with_context(|| format!("cannot parse {}", path.display()))
}

fn histories_for(loaded: &LoadedDataset) -> Result<Vec<UserHistory>> {
    build_histories(&loaded.dataset.interactions, &loaded.dataset.items)
        .map_err(|e| anyhow!("{}: {e}", loaded.dataset.dataset_id))
}

fn template_domains(datasets: &[LoadedDataset]) -> BTreeMap<String, String> {
    datasets
        .iter()
        .map(|d| (d.dataset.dataset_id.clone(), d.descriptor.template.clone()))
        .collect()
}

// ---------------------------------------------------------------------------
// ingest / stats
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct IngestSummary {
    pub dataset_id: String,
    pub records_read: usize,
    pub records_skipped: usize,
    pub clean_log: CleanLog,
    pub deduped_against: Option<String>,
    pub interactions_removed_dedup: usize,
    pub stats: StatsReport,
}

/// Reads raw sources through the descriptor, cleans, optionally dedups
/// against an older ingested dataset, and persists the result.
pub fn run_ingest(
    descriptor_path: &Path,
    inputs: &[PathBuf],
    out_dir: &Path,
    templates: &TemplateSet,
    dedup_against: Option<&Path>,
) -> Result<IngestSummary> {
    let descriptor: DatasetDescriptor = read_json(descriptor_path)?;
    descriptor
        .validate()
        .map_err(|e| anyhow!("descriptor {}: {e}", descriptor_path.display()))?;
    let scale = templates.get(&descriptor.template)?.rating_scale;

    let mut dataset = Dataset::new(descriptor.dataset_id.clone());
    let mut totals = ReadReport::default();
    for input in inputs {
        require_exists(input, "input")?;
        let file = fs::File::open(input)?;
        let report = read_dataset(&descriptor, BufReader::new(file), scale, &mut dataset)
            .map_err(|e| anyhow!("{}: {e}", input.display()))?;
        totals.records_read += report.records_read;
        totals.records_skipped += report.records_skipped;
    }

    let (mut cleaned, clean_log) = clean(&dataset);

    let mut deduped_against = None;
    let mut removed_dedup = 0;
    if let Some(older_dir) = dedup_against {
        let older = load_dataset(older_dir)?;
        let before = cleaned.interactions.len();
        cleaned = dedup_versions(&older.dataset, &cleaned);
        removed_dedup = before - cleaned.interactions.len();
        deduped_against = Some(older.dataset.dataset_id);
    }

    let stats = dataset_stats(&cleaned);
    let loaded = LoadedDataset { dataset: cleaned, descriptor };
    let dir = save_dataset(out_dir, &loaded)?;

    let summary = IngestSummary {
        dataset_id: loaded.dataset.dataset_id.clone(),
        records_read: totals.records_read,
        records_skipped: totals.records_skipped,
        clean_log,
        deduped_against,
        interactions_removed_dedup: removed_dedup,
        stats,
    };
    write_json_atomic(&dir.join("ingest_summary.json"), &summary)?;
    let manifest = RunManifest::new(format!("{:016x}", fnv1a64(&fs::read(descriptor_path)?)), 0)
        .count("records_read", summary.records_read as u64)
        .count("records_skipped", summary.records_skipped as u64)
        .count("interactions", summary.stats.n_interactions as u64);
    write_json_atomic(&dir.join("manifest.json"), &manifest)?;
    Ok(summary)
}

/// Statistics table over every dataset in a data directory, one row per
/// dataset plus a totals row.
pub fn run_stats(data_dir: &Path) -> Result<Vec<StatsReport>> {
    let datasets = discover_datasets(data_dir)?;
    let mut reports: Vec<StatsReport> = datasets.iter().map(|d| dataset_stats(&d.dataset)).collect();
    let total = StatsReport {
        dataset_id: "Total".to_string(),
        n_users: reports.iter().map(|r| r.n_users).sum(),
        n_items: reports.iter().map(|r| r.n_items).sum(),
        n_interactions: reports.iter().map(|r| r.n_interactions).sum(),
    };
    reports.push(total);
    Ok(reports)
}

pub fn format_stats_table(reports: &[StatsReport]) -> String {
    let mut out = format!("{:<28} {:>12} {:>12} {:>15}\n", "Dataset", "# Users", "# Items", "# Interactions");
    for r in reports {
        out.push_str(&format!(
            "{:<28} {:>12} {:>12} {:>15}\n",
            r.dataset_id, r.n_users, r.n_items, r.n_interactions
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// build-corpus / build-sft
// ---------------------------------------------------------------------------

pub struct CorpusRunConfig {
    pub budget: usize,
    pub ratio: f64,
    pub seed: u64,
}

pub fn run_build_corpus(
    data_dir: &Path,
    templates: &TemplateSet,
    run: &CorpusRunConfig,
    out_path: &Path,
) -> Result<usize> {
    let datasets = discover_datasets(data_dir)?;
    let domains = template_domains(&datasets);
    let mut histories = Vec::new();
    for loaded in &datasets {
        histories.extend(histories_for(loaded)?);
    }
    let documents = build_corpus(
        &histories,
        templates,
        &|dataset_id| domains.get(dataset_id).cloned().unwrap_or_default(),
        run.budget,
        &ApproxByteCounter,
        run.ratio,
        run.seed,
    )?;
    write_jsonl_atomic(out_path, &documents)?;
    let manifest = RunManifest::new(format!("corpus-{}-{}", run.budget, run.ratio), run.seed)
        .count("histories", histories.len() as u64)
        .count("documents", documents.len() as u64);
    write_json_atomic(&manifest_path(out_path), &manifest)?;
    Ok(documents.len())
}

fn manifest_path(out_path: &Path) -> PathBuf {
    let name = out_path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".to_string());
    out_path.with_file_name(format!("{name}.manifest.json"))
}

/// Ground-truth sidecar for one emitted sample; lets evaluation recover the
/// label without re-deriving histories.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleLabel {
    pub query_id: String,
    pub task: Task,
    pub dataset_id: String,
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_item_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_scale: Option<f64>,
}

pub fn query_id(dataset_id: &str, user_id: &str, task: Task) -> String {
    format!("{dataset_id}/{user_id}/{task}")
}

pub struct SftRunConfig {
    pub tasks: Vec<Task>,
    pub budget: usize,
    pub ratio: f64,
    pub seed: u64,
    pub rating_label: RatingLabelPosition,
}

/// Builds finetune-side samples plus their label sidecar records.
pub fn build_sft_with_labels(
    datasets: &[LoadedDataset],
    templates: &TemplateSet,
    run: &SftRunConfig,
) -> Result<(Vec<PromptSample>, Vec<SampleLabel>)> {
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut tasks = run.tasks.clone();
    tasks.sort_unstable();
    tasks.dedup();

    for loaded in datasets {
        let template = templates.get(&loaded.descriptor.template)?;
        let options = SftOptions {
            tasks: &tasks,
            budget: run.budget,
            counter: &ApproxByteCounter,
            rating_label: run.rating_label,
        };
        let mut histories = histories_for(loaded)?;
        histories.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        for history in &histories {
            if assign_split(&history.user_id, run.ratio, run.seed) != SplitSide::Finetune {
                continue;
            }
            for &task in &tasks {
                let sample = match build_sample(history, template, task, &options) {
                    Ok(sample) => sample,
                    Err(
                        SftError::HistoryTooShort { .. }
                        | SftError::MissingLabelRating(..)
                        | SftError::Template(TemplateError::RatingUnsupported(..)),
                    ) => continue,
                    Err(other) => return Err(other.into()),
                };
                let id = query_id(&history.dataset_id, &history.user_id, task);
                let label = match task {
                    Task::Seqrec => SampleLabel {
                        query_id: id,
                        task,
                        dataset_id: history.dataset_id.clone(),
                        user_id: history.user_id.clone(),
                        truth_item_id: history.entries.last().map(|e| e.item.item_id.clone()),
                        truth_rating: None,
                        rating_scale: None,
                    },
                    Task::Rating => {
                        let label_index = match run.rating_label {
                            RatingLabelPosition::SecondLast => history.len() - 2,
                            RatingLabelPosition::Last => history.len() - 1,
                        };
                        SampleLabel {
                            query_id: id,
                            task,
                            dataset_id: history.dataset_id.clone(),
                            user_id: history.user_id.clone(),
                            truth_item_id: None,
                            truth_rating: history.entries[label_index].interaction.rating,
                            rating_scale: Some(template.rating_scale),
                        }
                    }
                };
                samples.push(sample);
                labels.push(label);
            }
        }
    }
    Ok((samples, labels))
}

pub fn run_build_sft(
    data_dir: &Path,
    templates: &TemplateSet,
    run: &SftRunConfig,
    out_path: &Path,
    labels_out: Option<&Path>,
) -> Result<usize> {
    let datasets = discover_datasets(data_dir)?;
    let (samples, labels) = build_sft_with_labels(&datasets, templates, run)?;
    write_jsonl_atomic(out_path, &samples)?;
    if let Some(labels_path) = labels_out {
        write_jsonl_atomic(labels_path, &labels)?;
    }
    let manifest = RunManifest::new(format!("sft-{}-{}", run.budget, run.ratio), run.seed)
        .count("samples", samples.len() as u64);
    write_json_atomic(&manifest_path(out_path), &manifest)?;
    Ok(samples.len())
}

// ---------------------------------------------------------------------------
// split / leakage
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// User-level pretrain/finetune partition.
    User,
    /// Random 80-10-10 over interaction keys.
    Interactions,
    /// Per-user leave-one-out.
    LeaveOneOut,
}

#[derive(Serialize)]
#[serde(untagged)]
pub enum SplitOutput {
    Users { ratio: f64, seed: u64, pretrain: Vec<String>, finetune: Vec<String> },
    Assignment(SplitAssignment),
}

pub fn run_split(
    data_dir: &Path,
    mode: SplitMode,
    ratio: f64,
    seed: u64,
    key_mode: KeyMode,
    out_path: &Path,
) -> Result<SplitOutput> {
    let datasets = discover_datasets(data_dir)?;
    let output = match mode {
        SplitMode::User => {
            let mut users: Vec<String> = datasets
                .iter()
                .flat_map(|d| d.dataset.user_ids().into_iter().map(str::to_string).collect::<Vec<_>>())
                .collect();
            users.sort();
            users.dedup();
            let (pretrain, finetune) = split_users(users.iter().map(String::as_str), ratio, seed)?;
            SplitOutput::Users {
                ratio,
                seed,
                pretrain: pretrain.into_iter().collect(),
                finetune: finetune.into_iter().collect(),
            }
        }
        SplitMode::Interactions => {
            let interactions: Vec<Interaction> = datasets
                .iter()
                .flat_map(|d| d.dataset.interactions.iter().cloned())
                .collect();
            SplitOutput::Assignment(random_interaction_split(
                &interactions,
                RANDOM_SPLIT_RATIOS,
                seed,
                key_mode,
            )?)
        }
        SplitMode::LeaveOneOut => {
            let mut histories = Vec::new();
            for loaded in &datasets {
                histories.extend(histories_for(loaded)?);
            }
            SplitOutput::Assignment(leave_one_out_assignment(&histories, key_mode))
        }
    };
    write_json_atomic(out_path, &output)?;
    Ok(output)
}

#[derive(Debug, Serialize)]
pub struct LeakReport {
    pub n_train: usize,
    pub n_test: usize,
    pub n_leaked: usize,
    pub sample: Vec<InteractionKey>,
}

pub fn run_check_leakage(train_path: &Path, test_path: &Path, mode: KeyMode) -> Result<LeakReport> {
    let train: Vec<Interaction> = read_jsonl_file(train_path)?;
    let test: Vec<Interaction> = read_jsonl_file(test_path)?;
    let train_keys = key_set(&train, mode);
    let test_keys = key_set(&test, mode);
    let leaks = find_leaks(&train_keys, &test_keys);
    Ok(LeakReport {
        n_train: train_keys.len(),
        n_test: test_keys.len(),
        n_leaked: leaks.len(),
        sample: leaks.into_iter().take(10).collect(),
    })
}

pub fn run_fix_leakage(
    train_path: &Path,
    test_path: &Path,
    validation_path: Option<&Path>,
    mode: KeyMode,
    out_path: &Path,
) -> Result<usize> {
    let train: Vec<Interaction> = read_jsonl_file(train_path)?;
    let test: Vec<Interaction> = read_jsonl_file(test_path)?;
    let mut forbidden = key_set(&test, mode);
    if let Some(validation) = validation_path {
        let val: Vec<Interaction> = read_jsonl_file(validation)?;
        forbidden.extend(key_set(&val, mode));
    }
    let (kept, removed) = filter_train(&train, &forbidden, mode);
    write_jsonl_atomic(out_path, &kept)?;
    Ok(removed)
}

// ---------------------------------------------------------------------------
// generate / match / evaluate
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub query_id: String,
    pub prompt: String,
    pub outputs: Vec<GeneratedOutput>,
}

fn make_backend(
    config: &BackendConfig,
    mock_catalog: Vec<String>,
    truths: HashMap<String, String>,
) -> Box<dyn Backend> {
    match config {
        BackendConfig::Mock { mock_seed, truth_mode } => Box::new(
            MockBackend::new(mock_catalog, *mock_seed).with_truths(truths, *truth_mode),
        ),
        BackendConfig::Http { url, timeout_secs, retries, auth_env } => Box::new(HttpBackend::new(
            url,
            Duration::from_secs(*timeout_secs),
            *retries,
            auth_env.as_deref(),
        )),
    }
}

/// Candidate catalog the mock draws responses from for one task.
fn mock_catalog_for(task: Task, datasets: &[LoadedDataset], templates: &TemplateSet) -> Result<Vec<String>> {
    let mut catalog = Vec::new();
    match task {
        Task::Seqrec => {
            for loaded in datasets {
                let template = templates.get(&loaded.descriptor.template)?;
                for item in loaded.dataset.items.values() {
                    catalog.push(template.render_response(item));
                }
            }
        }
        Task::Rating => {
            for loaded in datasets {
                let template = templates.get(&loaded.descriptor.template)?;
                let scale = template.rating_scale;
                let mut r = 1.0;
                while r <= scale {
                    catalog.push(format!("{r:.1}/{scale:.1}"));
                    r += 1.0;
                }
            }
        }
    }
    catalog.sort();
    catalog.dedup();
    Ok(catalog)
}

pub fn decoding_params_for(task: Task) -> DecodingParams {
    match task {
        Task::Rating => DecodingParams::sampling_default(),
        Task::Seqrec => DecodingParams::beam_default(),
    }
}

/// Runs one task's prompts through a backend, in order, with bounded
/// concurrency. Failed prompts are dropped with a note on stderr.
pub fn generate_records(
    samples: &[PromptSample],
    task: Task,
    params: &DecodingParams,
    backend: &dyn Backend,
    max_in_flight: usize,
) -> Vec<GenerationRecord> {
    let prompts: Vec<(String, String)> = samples
        .iter()
        .filter(|s| s.task == task)
        .map(|s| (query_id(&s.dataset_id, &s.user_id, task), s.prompt.clone()))
        .collect();
    let prompt_by_id: HashMap<&str, &str> =
        prompts.iter().map(|(id, p)| (id.as_str(), p.as_str())).collect();
    run_batch(&prompts, params, backend, max_in_flight)
        .into_iter()
        .filter_map(|(id, outcome)| match outcome {
            Ok(result) => Some(GenerationRecord {
                prompt: prompt_by_id[id.as_str()].to_string(),
                query_id: id,
                outputs: result.outputs,
            }),
            Err(e) => {
                eprintln!("generation failed for {id}: {e}");
                None
            }
        })
        .collect()
}

pub struct GenerateRunConfig {
    pub task: Task,
    pub params: DecodingParams,
    pub backend: BackendConfig,
    pub max_in_flight: usize,
}

pub fn run_generate(
    sft_path: &Path,
    data_dir: Option<&Path>,
    templates: &TemplateSet,
    run: &GenerateRunConfig,
    out_path: &Path,
) -> Result<usize> {
    let samples: Vec<PromptSample> = read_jsonl_file(sft_path)?;
    let mock_catalog = match (&run.backend, data_dir) {
        (BackendConfig::Mock { .. }, Some(dir)) => {
            let datasets = discover_datasets(dir)?;
            mock_catalog_for(run.task, &datasets, templates)?
        }
        (BackendConfig::Mock { .. }, None) => {
            bail!("mock backend needs --data to derive its candidate catalog")
        }
        _ => Vec::new(),
    };
    let backend = make_backend(&run.backend, mock_catalog, HashMap::new());
    let records =
        generate_records(&samples, run.task, &run.params, backend.as_ref(), run.max_in_flight);
    write_jsonl_atomic(out_path, &records)?;
    Ok(records.len())
}

/// Per-dataset grounding indexes, built lazily from catalogs.
pub struct GroundingIndexes {
    embedder: NgramHashEmbedder,
    indexes: BTreeMap<String, ItemIndex>,
}

impl GroundingIndexes {
    pub fn build(datasets: &[LoadedDataset], templates: &TemplateSet) -> Result<Self> {
        let embedder = NgramHashEmbedder::default();
        let mut indexes = BTreeMap::new();
        for loaded in datasets {
            let template = templates.get(&loaded.descriptor.template)?;
            let entries: Vec<(String, String)> = loaded
                .dataset
                .items
                .values()
                .map(|item| (item.item_id.clone(), template.render_response(item)))
                .collect();
            let index = build_index(
                entries.iter().map(|(id, text)| (id.as_str(), text.as_str())),
                &embedder,
            )?;
            indexes.insert(loaded.dataset.dataset_id.clone(), index);
        }
        Ok(Self { embedder, indexes })
    }

    pub fn index_for(&self, dataset_id: &str) -> Option<&ItemIndex> {
        self.indexes.get(dataset_id)
    }

    /// Grounds one generated text onto the dataset's catalog.
    pub fn ground(&self, dataset_id: &str, text: &str) -> Option<(String, f32)> {
        let index = self.indexes.get(dataset_id)?;
        match_top(index, &self.embedder, text, 1).ok()?.into_iter().next()
    }
}

/// Grounds seqrec generation records into ranked predictions.
pub fn ground_seqrec(
    records: &[GenerationRecord],
    labels: &HashMap<String, SampleLabel>,
    indexes: &GroundingIndexes,
) -> Vec<RankedPrediction> {
    let mut predictions = Vec::new();
    for record in records {
        let Some(label) = labels.get(&record.query_id) else { continue };
        let Some(truth_item_id) = label.truth_item_id.clone() else { continue };
        let candidates: Vec<Candidate> = record
            .outputs
            .iter()
            .filter_map(|o| {
                indexes.ground(&label.dataset_id, &o.text).map(|(item_id, _)| Candidate {
                    text: o.text.clone(),
                    score: o.score,
                    item_id,
                })
            })
            .collect();
        predictions.push(RankedPrediction {
            query_id: record.query_id.clone(),
            candidates,
            truth_item_id,
        });
    }
    predictions
}

/// Pairs rating generations with their truth labels.
pub fn pair_rating(
    records: &[GenerationRecord],
    labels: &HashMap<String, SampleLabel>,
) -> Vec<RatingPrediction> {
    records
        .iter()
        .filter_map(|record| {
            let label = labels.get(&record.query_id)?;
            let truth = label.truth_rating?;
            let generation = record.outputs.first()?.text.clone();
            Some(RatingPrediction { query_id: record.query_id.clone(), generation, truth })
        })
        .collect()
}

pub fn load_labels(path: &Path) -> Result<HashMap<String, SampleLabel>> {
    let labels: Vec<SampleLabel> = read_jsonl_file(path)?;
    Ok(labels.into_iter().map(|l| (l.query_id.clone(), l)).collect())
}

// ---------------------------------------------------------------------------
// e2e
// ---------------------------------------------------------------------------

/// Metric reports per dataset, shaped like the benchmark tables: one row
/// per dataset, rating and seqrec columns.
#[derive(Debug, Serialize, Deserialize)]
pub struct E2eMetrics {
    pub per_dataset: BTreeMap<String, BTreeMap<String, MetricReport>>,
}

/// The full offline pipeline: ingest, clean, split, build corpus and SFT
/// sets, generate with the configured backend, ground, evaluate.
pub fn run_e2e(config: &PipelineConfig) -> Result<E2eMetrics> {
    config.validate()?;
    let templates = load_templates(config.template_file.as_deref())?;
    let out_dir = &config.out_dir;
    let data_dir = out_dir.join("data");
    fs::create_dir_all(&data_dir)?;

    // Ingest + clean every dataset.
    let mut datasets = Vec::new();
    for entry in &config.datasets {
        let summary = run_ingest(&entry.descriptor, &entry.inputs, &data_dir, &templates, None)?;
        eprintln!(
            "[e2e] ingested {}: {} records ({} skipped), {} interactions after cleaning",
            summary.dataset_id,
            summary.records_read,
            summary.records_skipped,
            summary.stats.n_interactions
        );
    }
    for loaded in discover_datasets(&data_dir)? {
        datasets.push(loaded);
    }

    // Corpus from the pretrain side.
    let corpus_count = run_build_corpus(
        &data_dir,
        &templates,
        &CorpusRunConfig {
            budget: config.token_budget,
            ratio: config.split_ratio,
            seed: config.seed,
        },
        &out_dir.join("corpus.jsonl"),
    )?;

    // SFT pairs from the finetune side.
    let sft_run = SftRunConfig {
        tasks: config.tasks.clone(),
        budget: config.token_budget,
        ratio: config.split_ratio,
        seed: config.seed,
        rating_label: config.rating_label,
    };
    let (samples, labels) = build_sft_with_labels(&datasets, &templates, &sft_run)?;
    eprintln!("[e2e] corpus: {corpus_count} documents; sft: {} samples", samples.len());
    write_jsonl_atomic(&out_dir.join("sft.jsonl"), &samples)?;
    write_jsonl_atomic(&out_dir.join("labels.jsonl"), &labels)?;
    let label_map: HashMap<String, SampleLabel> =
        labels.iter().map(|l| (l.query_id.clone(), l.clone())).collect();

    // Truth responses keyed by prompt, for the mock's truth modes.
    let truths: HashMap<String, String> =
        samples.iter().map(|s| (s.prompt.clone(), s.response.clone())).collect();

    let indexes = GroundingIndexes::build(&datasets, &templates)?;
    let mut per_dataset: BTreeMap<String, BTreeMap<String, MetricReport>> = BTreeMap::new();

    for &task in &{
        let mut t = config.tasks.clone();
        t.sort_unstable();
        t.dedup();
        t
    } {
        let catalog = mock_catalog_for(task, &datasets, &templates)?;
        let backend = make_backend(&config.backend, catalog, truths.clone());
        let params = decoding_params_for(task);
        let records =
            generate_records(&samples, task, &params, backend.as_ref(), config.max_in_flight);
        eprintln!("[e2e] {task}: {} generations", records.len());
        write_jsonl_atomic(&out_dir.join(format!("gens-{task}.jsonl")), &records)?;

        // Evaluate per dataset, Table-style.
        for loaded in &datasets {
            let id = &loaded.dataset.dataset_id;
            let dataset_records: Vec<GenerationRecord> = records
                .iter()
                .filter(|r| {
                    label_map.get(&r.query_id).is_some_and(|l| &l.dataset_id == id)
                })
                .cloned()
                .collect();
            let report = match task {
                Task::Seqrec => {
                    let predictions = ground_seqrec(&dataset_records, &label_map, &indexes);
                    write_jsonl_atomic(
                        &out_dir.join(format!("preds-seqrec-{id}.jsonl")),
                        &predictions,
                    )?;
                    if predictions.is_empty() {
                        continue;
                    }
                    evaluate_seqrec_run(&predictions, &config.cutoffs)
                }
                Task::Rating => {
                    let predictions = pair_rating(&dataset_records, &label_map);
                    write_jsonl_atomic(
                        &out_dir.join(format!("preds-rating-{id}.jsonl")),
                        &predictions,
                    )?;
                    if predictions.is_empty() {
                        continue;
                    }
                    let scale = templates.get(&loaded.descriptor.template)?.rating_scale;
                    evaluate_rating_run(&predictions, scale, false)?
                }
            };
            per_dataset.entry(id.clone()).or_default().insert(task.to_string(), report);
        }
    }

    let metrics = E2eMetrics { per_dataset };
    write_json_atomic(&out_dir.join("metrics.json"), &metrics)?;
    let manifest = RunManifest::new(config.config_hash(), config.seed)
        .count("datasets", datasets.len() as u64)
        .count("corpus_documents", corpus_count as u64)
        .count("sft_samples", samples.len() as u64);
    write_json_atomic(&out_dir.join("manifest.json"), &manifest)?;
    Ok(metrics)
}
