//! Pre-training runs, probes, exports, and the strategy ladder.

mod ablate;
mod checkpoint;
mod config;
mod export;
mod probe;
mod train;

pub use ablate::{ablate, mean_accuracy, run_cell, write_ablation_csv, AblationRow, Rung};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ProbeConfig, RunConfig};
pub use export::{
    cluster_stats, embedding_matrix, export_embeddings, export_weights, write_embeddings_csv, write_weights_csv,
    ClusterStats, EmbeddingRow, WeightRow, WEIGHTS_HEADER,
};
pub use probe::{
    finetune_head, linear_probe, stratified_video_folds, write_report_csv, FinetuneOutput, ProbeReport, REPORT_HEADER,
};
pub use train::{
    build_corpus, build_probe_corpus, inject_corrupted, output_dir, pretrain, pretrain_on, save_run, split_videos,
    write_log, EpochLog, PretrainOutput, CHECKPOINT_FILE, LOG_FILE, LOG_HEADER,
};
