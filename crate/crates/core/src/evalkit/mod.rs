//! Evaluation toolkit: projection-based separation metrics (SDR/SIR/SAR),
//! Fréchet distance over a toy audio–text embedding space, and set-level
//! report generation.

pub mod bss;
pub mod embedder;
pub mod fad;
pub mod report;

pub use bss::{bss_decompose, sdr_sir_sar, separation_metrics, BssDecomposition};
pub use embedder::{cosine_similarity, held_out_clips, EmbedderConfig, ToyEmbedder, EMBED_DIM};
pub use fad::{fad, GaussianStats};
pub use report::{evaluate_set, EvalInputs, MetricsReport, SetSummary};
