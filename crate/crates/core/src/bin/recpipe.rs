//! `recpipe` — reproducible data-and-evaluation pipeline runs.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use recpipe_core::evaluator::{evaluate_rating_run, evaluate_seqrec_run, RankedPrediction, RatingPrediction};
use recpipe_core::generation::{DecodingParams, TruthMode, MAX_NEW_TOKENS_RATING, MAX_NEW_TOKENS_SEQREC};
use recpipe_core::leakage::KeyMode;
use recpipe_core::matcher::{build_index, match_top, NgramHashEmbedder};
use recpipe_core::model::{read_jsonl, Item};
use recpipe_core::pipeline::{
    self, format_stats_table, load_templates, BackendConfig, CorpusRunConfig, GenerateRunConfig,
    GenerationRecord, PipelineConfig, SftRunConfig, SplitMode,
};
use recpipe_core::sft::{RatingLabelPosition, Task};
use recpipe_core::template::TemplateSet;

#[derive(Parser)]
#[command(name = "recpipe", version, about = "Recommendation-LLM data construction and evaluation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw dataset files into the unified schema and clean them.
    Ingest {
        #[arg(long)]
        descriptor: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Ingested directory of an older dataset version; overlapping
        /// users are dropped from this (newer) dataset.
        #[arg(long)]
        dedup_against: Option<PathBuf>,
    },
    /// Print dataset statistics (# Users, # Items, # Interactions).
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Render the pre-training corpus from pretrain-side users.
    BuildCorpus {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = 2048)]
        budget: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.995)]
        split: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build instruction (prompt, response) pairs from finetune-side users.
    BuildSft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "rating,seqrec")]
        tasks: Vec<Task>,
        #[arg(long, default_value_t = 2048)]
        budget: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.995)]
        split: f64,
        /// Which item supplies the rating label: second-last or last.
        #[arg(long, default_value = "second-last")]
        rating_label: String,
        #[arg(long)]
        out: PathBuf,
        /// Sidecar file of ground-truth labels per emitted sample.
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Compute a split (user-level, random interactions, or leave-one-out).
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "user")]
        mode: String,
        #[arg(long, default_value_t = 0.995)]
        ratio: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "user,item,time")]
        key: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report train/test key overlap.
    CheckLeakage {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "user,item,time")]
        key: String,
    },
    /// Remove test-set (and optionally validation-set) keys from training data.
    FixLeakage {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long, default_value = "user,item,time")]
        key: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive a generation backend over SFT prompts.
    Generate {
        #[arg(long)]
        sft: PathBuf,
        #[arg(long)]
        task: Task,
        /// `mock` or a completion endpoint URL.
        #[arg(long, default_value = "mock")]
        backend: String,
        /// `beam:10`, `sampling:1.0,0.9,50`, or bare `beam`/`sampling`.
        #[arg(long)]
        params: Option<String>,
        #[arg(long)]
        max_new_tokens: Option<u32>,
        /// Data directory; required with the mock backend to derive its
        /// candidate catalog.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        mock_seed: u64,
        #[arg(long, default_value_t = 8)]
        max_in_flight: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ground text onto the item catalog (single query or batch).
    Match {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Template domain used to render item match-texts.
        #[arg(long)]
        domain: String,
        #[arg(long)]
        query: Option<String>,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Batch mode: generations to ground.
        #[arg(long)]
        generations: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute metrics over predictions.
    Evaluate {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Rating-task alternative to --predictions: raw generations plus
        /// the labels sidecar.
        #[arg(long)]
        generations: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "5,10")]
        cutoffs: Vec<u32>,
        #[arg(long, default_value_t = 5.0)]
        scale: f64,
        #[arg(long)]
        impute_midpoint: bool,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Full offline pipeline: ingest through metrics.
    E2e(E2eArgs),
}

#[derive(Args)]
struct E2eArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured backend: `mock` or an endpoint URL.
    #[arg(long)]
    backend: Option<String>,
    /// Mock truth handling: hash, always, or never.
    #[arg(long)]
    mock_truth: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split: Option<f64>,
}

fn parse_key_mode(text: &str) -> Result<KeyMode> {
    let mut parts: Vec<&str> = text.split(',').map(str::trim).collect();
    parts.sort_unstable();
    match parts.as_slice() {
        ["item", "time", "user"] => Ok(KeyMode::UserItemTime),
        ["item", "user"] => Ok(KeyMode::UserItem),
        _ => bail!("unknown key mode `{text}` (expected user,item or user,item,time)"),
    }
}

fn parse_truth_mode(text: &str) -> Result<TruthMode> {
    match text {
        "hash" => Ok(TruthMode::FromHash),
        "always" => Ok(TruthMode::AlwaysInclude),
        "never" => Ok(TruthMode::NeverInclude),
        other => bail!("unknown mock truth mode `{other}` (expected hash, always, never)"),
    }
}

fn parse_rating_label(text: &str) -> Result<RatingLabelPosition> {
    match text {
        "second-last" => Ok(RatingLabelPosition::SecondLast),
        "last" => Ok(RatingLabelPosition::Last),
        other => bail!("unknown rating label position `{other}`"),
    }
}

fn parse_params(text: Option<&str>, task: Task, max_new_tokens: Option<u32>) -> Result<DecodingParams> {
    let default_tokens = match task {
        Task::Rating => MAX_NEW_TOKENS_RATING,
        Task::Seqrec => MAX_NEW_TOKENS_SEQREC,
    };
    let tokens = max_new_tokens.unwrap_or(default_tokens);
    let params = match text {
        None => match task {
            Task::Rating => DecodingParams::Sampling {
                temperature: 1.0,
                top_p: 0.9,
                top_k: 50,
                max_new_tokens: tokens,
            },
            Task::Seqrec => DecodingParams::Beam { beam_size: 10, max_new_tokens: tokens },
        },
        Some(spec) => {
            let (mode, rest) = match spec.split_once(':') {
                Some((m, r)) => (m, Some(r)),
                None => (spec, None),
            };
            match mode {
                "beam" => DecodingParams::Beam {
                    beam_size: rest.map(str::parse).transpose()?.unwrap_or(10),
                    max_new_tokens: tokens,
                },
                "sampling" => {
                    let mut temperature = 1.0;
                    let mut top_p = 0.9;
                    let mut top_k = 50;
                    if let Some(rest) = rest {
                        let parts: Vec<&str> = rest.split(',').collect();
                        if parts.len() != 3 {
                            bail!("sampling params must be temperature,top_p,top_k");
                        }
                        temperature = parts[0].parse()?;
                        top_p = parts[1].parse()?;
                        top_k = parts[2].parse()?;
                    }
                    DecodingParams::Sampling { temperature, top_p, top_k, max_new_tokens: tokens }
                }
                other => bail!("unknown decoding mode `{other}`"),
            }
        }
    };
    Ok(params)
}

fn backend_config(backend: &str, mock_seed: u64, truth: TruthMode) -> BackendConfig {
    if backend == "mock" {
        BackendConfig::Mock { mock_seed, truth_mode: truth }
    } else {
        BackendConfig::Http {
            url: backend.to_string(),
            timeout_secs: 60,
            retries: 3,
            auth_env: Some("RECPIPE_AUTH_TOKEN".to_string()),
        }
    }
}

fn load_catalog_index(
    catalog: &PathBuf,
    templates: &TemplateSet,
    domain: &str,
) -> Result<(recpipe_core::matcher::ItemIndex, NgramHashEmbedder)> {
    let file = std::fs::File::open(catalog)
        .with_context(|| format!("cannot open catalog {}", catalog.display()))?;
    let items: Vec<Item> = read_jsonl(std::io::BufReader::new(file))?;
    let template = templates.get(domain)?;
    let embedder = NgramHashEmbedder::default();
    let entries: Vec<(String, String)> = items
        .iter()
        .map(|item| (item.item_id.clone(), template.render_response(item)))
        .collect();
    let index = build_index(
        entries.iter().map(|(id, text)| (id.as_str(), text.as_str())),
        &embedder,
    )?;
    Ok((index, embedder))
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest { descriptor, input, out, templates, dedup_against } => {
            let templates = load_templates(templates.as_deref())?;
            let summary = pipeline::run_ingest(
                &descriptor,
                &input,
                &out,
                &templates,
                dedup_against.as_deref(),
            )?;
            eprintln!(
                "ingested {}: {} read, {} skipped, {} interactions after cleaning",
                summary.dataset_id,
                summary.records_read,
                summary.records_skipped,
                summary.stats.n_interactions
            );
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Stats { data, json } => {
            let reports = pipeline::run_stats(&data)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                print!("{}", format_stats_table(&reports));
            }
        }
        Command::BuildCorpus { data, templates, budget, seed, split, out } => {
            let templates = load_templates(templates.as_deref())?;
            let run = CorpusRunConfig { budget, ratio: split, seed };
            let n = pipeline::run_build_corpus(&data, &templates, &run, &out)?;
            eprintln!("wrote {n} corpus documents to {}", out.display());
        }
        Command::BuildSft {
            data,
            templates,
            tasks,
            budget,
            seed,
            split,
            rating_label,
            out,
            labels_out,
        } => {
            let templates = load_templates(templates.as_deref())?;
            let run = SftRunConfig {
                tasks,
                budget,
                ratio: split,
                seed,
                rating_label: parse_rating_label(&rating_label)?,
            };
            let n = pipeline::run_build_sft(&data, &templates, &run, &out, labels_out.as_deref())?;
            eprintln!("wrote {n} samples to {}", out.display());
        }
        Command::Split { data, mode, ratio, seed, key, out } => {
            let mode = match mode.as_str() {
                "user" => SplitMode::User,
                "interactions" => SplitMode::Interactions,
                "leave-one-out" => SplitMode::LeaveOneOut,
                other => bail!("unknown split mode `{other}`"),
            };
            pipeline::run_split(&data, mode, ratio, seed, parse_key_mode(&key)?, &out)?;
            eprintln!("wrote split to {}", out.display());
        }
        Command::CheckLeakage { train, test, key } => {
            let report = pipeline::run_check_leakage(&train, &test, parse_key_mode(&key)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::FixLeakage { train, test, validation, key, out } => {
            let removed = pipeline::run_fix_leakage(
                &train,
                &test,
                validation.as_deref(),
                parse_key_mode(&key)?,
                &out,
            )?;
            eprintln!("removed {removed} leaked interactions; clean training set at {}", out.display());
        }
        Command::Generate {
            sft,
            task,
            backend,
            params,
            max_new_tokens,
            data,
            templates,
            mock_seed,
            max_in_flight,
            out,
        } => {
            let templates = load_templates(templates.as_deref())?;
            let run = GenerateRunConfig {
                task,
                params: parse_params(params.as_deref(), task, max_new_tokens)?,
                backend: backend_config(&backend, mock_seed, TruthMode::FromHash),
                max_in_flight,
            };
            let n = pipeline::run_generate(&sft, data.as_deref(), &templates, &run, &out)?;
            eprintln!("wrote {n} generation records to {}", out.display());
        }
        Command::Match { catalog, templates, domain, query, top, generations, labels, out } => {
            let templates = load_templates(templates.as_deref())?;
            let (index, embedder) = load_catalog_index(&catalog, &templates, &domain)?;
            match (query, generations) {
                (Some(query), None) => {
                    let hits = match_top(&index, &embedder, &query, top)?;
                    for (rank, (item_id, score)) in hits.iter().enumerate() {
                        println!("{:>3}  {score:.4}  {item_id}", rank + 1);
                    }
                }
                (None, Some(generations)) => {
                    let labels_path =
                        labels.context("batch matching needs --labels from build-sft")?;
                    let out = out.context("batch matching needs --out")?;
                    let label_map = pipeline::load_labels(&labels_path)?;
                    let file = std::fs::File::open(&generations)?;
                    let records: Vec<GenerationRecord> =
                        read_jsonl(std::io::BufReader::new(file))?;
                    let mut predictions = Vec::new();
                    for record in &records {
                        let Some(label) = label_map.get(&record.query_id) else { continue };
                        let Some(truth_item_id) = label.truth_item_id.clone() else { continue };
                        let candidates: Vec<recpipe_core::evaluator::Candidate> = record
                            .outputs
                            .iter()
                            .filter_map(|o| {
                                match_top(&index, &embedder, &o.text, 1)
                                    .ok()?
                                    .into_iter()
                                    .next()
                                    .map(|(item_id, _)| recpipe_core::evaluator::Candidate {
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
                    pipeline::write_jsonl_atomic(&out, &predictions)?;
                    eprintln!("wrote {} grounded predictions to {}", predictions.len(), out.display());
                }
                _ => bail!("use either --query or --generations"),
            }
        }
        Command::Evaluate {
            task,
            predictions,
            generations,
            labels,
            cutoffs,
            scale,
            impute_midpoint,
            json_out,
        } => {
            if cutoffs.iter().any(|&k| k == 0) {
                bail!("cutoffs must be at least 1");
            }
            let report = match task {
                Task::Seqrec => {
                    let path = predictions.context("seqrec evaluation needs --predictions")?;
                    let file = std::fs::File::open(&path)?;
                    let preds: Vec<RankedPrediction> = read_jsonl(std::io::BufReader::new(file))?;
                    evaluate_seqrec_run(&preds, &cutoffs)
                }
                Task::Rating => {
                    let preds: Vec<RatingPrediction> = match (predictions, generations, labels) {
                        (Some(path), _, _) => {
                            let file = std::fs::File::open(&path)?;
                            read_jsonl(std::io::BufReader::new(file))?
                        }
                        (None, Some(gens), Some(labels)) => {
                            let file = std::fs::File::open(&gens)?;
                            let records: Vec<GenerationRecord> =
                                read_jsonl(std::io::BufReader::new(file))?;
                            let label_map = pipeline::load_labels(&labels)?;
                            pipeline::pair_rating(&records, &label_map)
                        }
                        _ => bail!("rating evaluation needs --predictions or --generations with --labels"),
                    };
                    evaluate_rating_run(&preds, scale, impute_midpoint)?
                }
            };
            println!("{report}");
            if let Some(path) = json_out {
                pipeline::write_json_atomic(&path, &report)?;
            }
        }
        Command::E2e(args) => {
            let mut config = PipelineConfig::load(&args.config)?;
            if let Some(out) = args.out {
                config.out_dir = out;
            }
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            if let Some(split) = args.split {
                config.split_ratio = split;
            }
            if let Some(backend) = args.backend {
                let truth = match (&config.backend, &args.mock_truth) {
                    (_, Some(text)) => parse_truth_mode(text)?,
                    (BackendConfig::Mock { truth_mode, .. }, None) => *truth_mode,
                    _ => TruthMode::FromHash,
                };
                let mock_seed = match &config.backend {
                    BackendConfig::Mock { mock_seed, .. } => *mock_seed,
                    _ => 0,
                };
                config.backend = backend_config(&backend, mock_seed, truth);
            } else if let Some(text) = args.mock_truth {
                if let BackendConfig::Mock { mock_seed, .. } = &config.backend {
                    config.backend = BackendConfig::Mock {
                        mock_seed: *mock_seed,
                        truth_mode: parse_truth_mode(&text)?,
                    };
                }
            }
            let metrics = pipeline::run_e2e(&config)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            eprintln!("metrics written to {}", config.out_dir.join("metrics.json").display());
        }
    }
    Ok(())
}
