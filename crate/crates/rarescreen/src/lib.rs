//! Few-shot rare-condition screening over precomputed feature vectors.
//!
//! The pipeline mirrors how a screening model built for frequent conditions
//! can be extended to rare ones without retraining: feature vectors are
//! reduced by PCA, embedded in a low-dimensional space by perplexity
//! calibrated stochastic neighbor embedding, per-condition Parzen density
//! models turn the embedding into exact presence probabilities on the
//! reference set, and unseen samples are scored by inverse-distance K-NN
//! regression against those references. Evaluation follows a patient-grouped
//! fold protocol with pooled ROC curves per condition.
//!
//! - [`dataset`]: CSV ingestion, balanced subset, grouped splits and folds.
//! - [`pca`]: the linear reduction step and its serialized model.
//! - [`tsne`]: bandwidth calibration, embedding optimization.
//! - [`density`]: Parzen models, Scott bandwidths, presence probabilities.
//! - [`predictor`]: the deployable K-NN regression bundle and its gradient.
//! - [`evaluation`]: ROC/AUC, cross-validation/cross-testing, sweeps.
//! - [`preprocess`]: fundus photograph normalization.
//! - [`synth`]: deterministic synthetic fixtures.
//! - [`pipeline`]: end-to-end orchestration with a manifest.
//!
//! All randomness flows through a seeded ChaCha8 stream ([`rng::SeededRng`]);
//! same-seed runs produce byte-identical artifacts.

pub mod dataset;
pub mod density;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod pca;
pub mod pipeline;
pub mod predictor;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tsne;

pub use error::{Error, Result, Stage};
pub use evaluation::PipelineParams;
pub use linalg::Mat;
