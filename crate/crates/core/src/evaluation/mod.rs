//! Metrics: stroke recall (REC), Frechet distance over pluggable image
//! embeddings, an optional perceptual distance, and the per-level sweep.

mod embed;
mod fid;
mod rec;
mod sweep;

pub use embed::{embed_for_fid, perceptual_distance, Embedder, EmbedderConfig, LinearEmbedder};
pub use fid::{fid_score, FeatureSet, FID_EPS};
pub use rec::{dilate, rec_from_edges, rec_score, DEFAULT_REC_TOLERANCE};
pub use sweep::{eval_sweep, EvalConfig, LevelReport, MetricReport};
