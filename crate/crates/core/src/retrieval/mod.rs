//! Cross-modal retrieval: a contrastively trained dual encoder and the
//! feature-space metrics used to evaluate generated dances.

mod eigen;
mod encoder;
mod metrics;
mod train;

pub use eigen::{jacobi_eigen, SymmetricEigen};
pub use encoder::{clip_loss_graph, pooled_lengths, DualEncoder, Modality, RetrievalConfig, LOG_SCALE};
pub use metrics::{
    clip_loss, diversity, evaluate, fid, fid_from_stats, m_dist, mm_dist, paired_distance, rank_stats, ranks,
    recall_at_k, Features, GaussianStats, MetricReport, RankStats, FEATURES_ENTRY, REPORT_KEYS,
};
pub use train::{
    embed_corpus, lr_sweep, retrieval_report, toy_corpus, train_retrieval, EpochLog, PairedCorpus, RetrievalReport,
    RetrievalTrainOptions, SweepRun, ToyCorpusSpec,
};
