//! Data construction and evaluation toolkit for text-based recommendation
//! language models.
//!
//! The pipeline runs end to end from raw interaction dumps to metric
//! reports:
//!
//! 1. [`ingest`] — stream JSONL/CSV sources into the unified schema, apply
//!    the cleaning rules, dedup dataset versions, report statistics;
//! 2. [`corpus`] — render pre-training documents with the per-domain
//!    [`template`]s, chunk long histories under a token budget, and split
//!    users into pretrain/finetune sides;
//! 3. [`sft`] — derive instruction (prompt, response) pairs for rating
//!    prediction and sequential recommendation;
//! 4. [`leakage`] — build benchmark splits and detect/repair cross-task
//!    train/test leakage;
//! 5. [`generation`] — drive a completion backend (or the deterministic
//!    mock) with the evaluation decoding settings;
//! 6. [`matcher`] — ground free-text generations onto the item catalog by
//!    dense-vector similarity;
//! 7. [`evaluator`] — compute RMSE/MAE and HR@k/NDCG@k.
//!
//! [`pipeline`] wires the stages into the `recpipe` CLI's subcommands.

pub mod corpus;
pub mod evaluator;
pub mod generation;
pub mod hash;
pub mod ingest;
pub mod leakage;
pub mod matcher;
pub mod model;
pub mod pipeline;
pub mod sft;
pub mod template;

pub use corpus::{
    build_corpus, chunk_history, split_users, ApproxByteCounter, CorpusDocument, TokenCounter,
    DEFAULT_SPLIT_RATIO, DEFAULT_TOKEN_BUDGET,
};
pub use evaluator::{
    evaluate_rating_run, evaluate_seqrec_run, hit_rate_at_k, mae, ndcg_at_k, parse_rating, rmse,
    Candidate, MetricReport, RankedPrediction, RatingPrediction,
};
pub use generation::{
    generate, run_batch, Backend, DecodingParams, GeneratedOutput, GenerationResult, MockBackend,
    TruthMode,
};
pub use ingest::{clean, dataset_stats, dedup_versions, read_dataset, CleanLog, Dataset, StatsReport};
pub use leakage::{
    filter_train, find_leaks, leave_one_out_split, random_interaction_split, InteractionKey,
    KeyMode, SplitAssignment,
};
pub use matcher::{build_index, match_top, Embedder, ItemIndex, MatchError, NgramHashEmbedder};
pub use model::{
    build_histories, validate_interaction, DatasetDescriptor, HistoryEntry, Interaction, Item,
    SourceFormat, UserHistory,
};
pub use sft::{
    build_sft_dataset, make_rating_sample, make_seqrec_sample, PromptSample, RatingLabelPosition,
    Task,
};
pub use template::{FieldSet, TemplateSet, TemplateSpec};
