//! Emotion-conditioned dialogue language modeling at desk scale.
//!
//! The crate covers the full pipeline: a byte-level BPE tokenizer, corpus
//! ingestion and sequence formatting for the two conditioning regimes, a
//! decoder-only transformer with hand-written backpropagation, a two-stage
//! (pretrain, fine-tune) training driver, nucleus-sampling decoding, and an
//! automated evaluation suite.
//!
//! With the default `parallel` feature, batch gradients, perplexity and
//! batch generation fan out over rayon. Reductions always run in a fixed
//! order, so results are bit-identical with or without the feature.

pub mod data;
pub mod decode;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use data::{Conversation, CorpusSplit, FormattedExample, Mode};
pub use decode::GenerationSettings;
pub use metrics::EvalReport;
pub use model::{ModelConfig, TransformerModel};
pub use tokenizer::{TokenId, Vocabulary};
pub use train::TrainConfig;
