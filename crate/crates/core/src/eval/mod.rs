//! Retrieval metrics, bootstrap reports, the RoPE-base sweep and linear probes.

mod harness;
mod metrics;
mod probe;

pub use harness::{
    encode_images, encode_texts, evaluate_retrieval, fixed_length_pairs, presence_labels, rope_base_sweep,
    BootstrapSpec, EvalPair, SweepRow, DEFAULT_BASE_MULTIPLIERS,
};
pub use metrics::{
    bootstrap_eval, cosine_matrix, heatmap_csv, map_score, mean_rank, ndcg_at_10, ranks, recall_at_k,
    retrieval_metrics, MeanStd, ReportMeta, RetrievalReport, RECALL_CUTOFFS, REPORT_CSV_HEADER,
};
pub use probe::{auc, average_precision, linear_probe, ClassMetrics, ProbeConfig, ProbeReport};
