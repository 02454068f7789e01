//! Decoder-only causal transformer (GPT-2 family layout) in 64-bit floats.
//!
//! All parameters live in one flat buffer described by a [`Layout`]; the
//! gradient of a loss is a buffer of the same shape. This keeps the
//! optimizer, gradient checking and checkpointing independent of the
//! architecture details.

mod checkpoint;
mod transformer;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, NamedTensor};
pub use transformer::{gelu, gelu_grad, LAYER_NORM_EPS};

use crate::data::FormattedExample;
use crate::parallel;
use crate::rng::rng_from_seed;
use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence too long: {len} tokens, context is {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },
    #[error("token id out of range: {id} (vocab size {vocab_size})")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("no supervised positions")]
    NoSupervisedPositions,
    #[error("loss mask length {mask} differs from sequence length {ids}")]
    MaskLength { ids: usize, mask: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Default desk-scale shape: 2 layers, 4 heads, width 64.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig { n_layers: 2, n_heads: 4, d_model: 64, d_ff: 256, context_len: 64, vocab_size }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return bad("all dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.context_len < 2 {
            return bad("context_len must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn num_params(&self) -> usize {
        let (c, f) = (self.d_model, self.d_ff);
        let per_layer = 4 * c + 4 * c * c + 2 * c * f + f + c;
        self.vocab_size * c + self.context_len * c + self.n_layers * per_layer + 2 * c
    }

    fn meta(&self) -> [(&'static str, usize); 6] {
        [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("context_len", self.context_len),
            ("vocab_size", self.vocab_size),
        ]
    }
}

/// Role of a tensor, used for initialisation and weight-decay masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Projection,
    Bias,
    NormScale,
    NormShift,
}

impl TensorKind {
    /// Whether decoupled weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, TensorKind::Embedding | TensorKind::Projection)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one block's tensors inside the flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    pub(crate) wte: usize,
    pub(crate) wpe: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (c, f, v, t) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.context_len);
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>, kind: TensorKind| -> usize {
            let spec = TensorSpec { name, shape, offset, kind };
            let start = offset;
            offset += spec.len();
            tensors.push(spec);
            start
        };
        use TensorKind::*;
        let wte = add("wte".into(), vec![v, c], Embedding);
        let wpe = add("wpe".into(), vec![t, c], Embedding);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            blocks.push(BlockOffsets {
                ln1_g: add(p("ln1.g"), vec![c], NormScale),
                ln1_b: add(p("ln1.b"), vec![c], NormShift),
                wq: add(p("attn.wq"), vec![c, c], Projection),
                wk: add(p("attn.wk"), vec![c, c], Projection),
                wv: add(p("attn.wv"), vec![c, c], Projection),
                wo: add(p("attn.wo"), vec![c, c], Projection),
                ln2_g: add(p("ln2.g"), vec![c], NormScale),
                ln2_b: add(p("ln2.b"), vec![c], NormShift),
                w1: add(p("mlp.w1"), vec![c, f], Projection),
                b1: add(p("mlp.b1"), vec![f], Bias),
                w2: add(p("mlp.w2"), vec![f, c], Projection),
                b2: add(p("mlp.b2"), vec![c], Bias),
            });
        }
        let lnf_g = add("lnf.g".into(), vec![c], NormScale);
        let lnf_b = add("lnf.b".into(), vec![c], NormShift);
        Layout { tensors, total: offset, wte, wpe, blocks, lnf_g, lnf_b }
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Per-coordinate weight-decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for t in &self.tensors {
            mask[t.range()].fill(t.kind.decays());
        }
        mask
    }
}

/// Standard deviation of the initial normal draw for embeddings and projections.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for TransformerModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Loss value and the matching gradient buffer.
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub tokens: usize,
}

impl TransformerModel {
    /// Initialises weights: N(0, 0.02) for embeddings and projections, zero
    /// biases, unit norm scales and zero norm shifts. Tensors are filled in
    /// layout order from a single seeded stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = rng_from_seed(seed.wrapping_add(crate::rng::INIT_OFFSET));
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for t in &layout.tensors {
            let slot = &mut params[t.range()];
            match t.kind {
                TensorKind::Embedding | TensorKind::Projection => {
                    for p in slot.iter_mut() {
                        *p = normal.sample(&mut rng);
                    }
                }
                TensorKind::NormScale => slot.fill(1.0),
                TensorKind::Bias | TensorKind::NormShift => slot.fill(0.0),
            }
        }
        Ok(TransformerModel { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(TransformerModel { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.spec(name).map(|s| &self.params[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.spec(name)?.range();
        Some(&mut self.params[range])
    }

    /// Token-embedding matrix, `vocab_size x d_model` row-major. Also the
    /// output projection (tied weights).
    pub fn token_embedding(&self) -> &[f64] {
        let n = self.config.vocab_size * self.config.d_model;
        &self.params[self.layout.wte..self.layout.wte + n]
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.context_len {
            return Err(ModelError::SequenceTooLong { len: ids.len(), context_len: self.config.context_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }

    /// Logits for every position, `T x vocab_size` row-major.
    pub fn forward(&self, ids: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        self.check_ids(ids)?;
        let acts = transformer::forward(self, ids);
        let rows: Vec<usize> = (0..ids.len()).collect();
        Ok(transformer::logits_rows(self, &acts, &rows))
    }

    /// Logits of the final position only.
    pub fn next_token_logits(&self, ids: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        self.check_ids(ids)?;
        let acts = transformer::forward(self, ids);
        Ok(transformer::logits_rows(self, &acts, &[ids.len() - 1]))
    }

    /// Summed masked negative log-likelihood and the number of masked tokens,
    /// without gradients.
    pub fn masked_nll(&self, example: &FormattedExample) -> Result<(f64, usize), ModelError> {
        let targets = self.targets(example)?;
        let acts = transformer::forward(self, &example.input_ids);
        let rows: Vec<usize> = targets.iter().map(|&(row, _)| row).collect();
        let logits = transformer::logits_rows(self, &acts, &rows);
        let v = self.config.vocab_size;
        let nll = targets
            .iter()
            .enumerate()
            .map(|(i, &(_, tgt))| transformer::nll_row(&logits[i * v..(i + 1) * v], tgt as usize))
            .sum();
        Ok((nll, targets.len()))
    }

    /// (row, target) pairs: row `t-1` predicts `ids[t]` wherever `mask[t]`.
    fn targets(&self, example: &FormattedExample) -> Result<Vec<(usize, TokenId)>, ModelError> {
        self.check_ids(&example.input_ids)?;
        if example.loss_mask.len() != example.input_ids.len() {
            return Err(ModelError::MaskLength { ids: example.input_ids.len(), mask: example.loss_mask.len() });
        }
        let targets: Vec<(usize, TokenId)> = (1..example.input_ids.len())
            .filter(|&t| example.loss_mask[t])
            .map(|t| (t - 1, example.input_ids[t]))
            .collect();
        if targets.is_empty() {
            return Err(ModelError::NoSupervisedPositions);
        }
        Ok(targets)
    }

    /// Summed NLL over masked positions, accumulating `scale * d(sum)/dθ` into `grads`.
    pub fn accumulate_grads(
        &self,
        example: &FormattedExample,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<(f64, usize), ModelError> {
        let targets = self.targets(example)?;
        let acts = transformer::forward(self, &example.input_ids);
        let nll = transformer::backward(self, &acts, &example.input_ids, &targets, scale, grads);
        Ok((nll, targets.len()))
    }

    /// Mean masked cross-entropy of one example and its exact gradient.
    pub fn loss_and_grads(&self, example: &FormattedExample) -> Result<LossAndGrads, ModelError> {
        let n = self.targets(example)?.len();
        let mut grads = vec![0.0; self.layout.total];
        let (nll, tokens) = self.accumulate_grads(example, 1.0 / n as f64, &mut grads)?;
        Ok(LossAndGrads { loss: nll / tokens as f64, grads, tokens })
    }

    /// Token-weighted mean loss over a batch and its gradient.
    ///
    /// Per-example gradients run through [`parallel::map_indexed`] and are
    /// summed in batch order, so the result does not depend on thread count.
    pub fn batch_loss_and_grads(&self, batch: &[&FormattedExample]) -> Result<LossAndGrads, ModelError> {
        self.batch_impl(batch, |items, f| parallel::map_indexed(items, f))
    }

    /// [`Self::batch_loss_and_grads`] on the calling thread only.
    pub fn batch_loss_and_grads_seq(&self, batch: &[&FormattedExample]) -> Result<LossAndGrads, ModelError> {
        self.batch_impl(batch, |items, f| parallel::map_indexed_seq(items, f))
    }

    fn batch_impl<M>(&self, batch: &[&FormattedExample], map: M) -> Result<LossAndGrads, ModelError>
    where
        M: Fn(
            &[&FormattedExample],
            &(dyn Fn(usize, &&FormattedExample) -> Result<(f64, usize, Vec<f64>), ModelError> + Sync + Send),
        ) -> Vec<Result<(f64, usize, Vec<f64>), ModelError>>,
    {
        let per_example = map(batch, &|_, ex: &&FormattedExample| {
            let mut g = vec![0.0; self.layout.total];
            let (nll, n) = self.accumulate_grads(ex, 1.0, &mut g)?;
            Ok((nll, n, g))
        });
        let mut grads = vec![0.0; self.layout.total];
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for r in per_example {
            let (l, n, g) = r?;
            nll += l;
            tokens += n;
            for (acc, x) in grads.iter_mut().zip(&g) {
                *acc += x;
            }
        }
        if tokens == 0 {
            return Err(ModelError::NoSupervisedPositions);
        }
        let inv = 1.0 / tokens as f64;
        grads.iter_mut().for_each(|g| *g *= inv);
        Ok(LossAndGrads { loss: nll * inv, grads, tokens })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for (k, v) in self.config.meta() {
            ckpt.set(k, v);
        }
        for t in &self.layout.tensors {
            ckpt.push_tensor(&t.name, &t.shape, &self.params[t.range()]);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let config = ModelConfig {
            n_layers: ckpt.require("n_layers")?,
            n_heads: ckpt.require("n_heads")?,
            d_model: ckpt.require("d_model")?,
            d_ff: ckpt.require("d_ff")?,
            context_len: ckpt.require("context_len")?,
            vocab_size: ckpt.require("vocab_size")?,
        };
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        for t in &layout.tensors {
            let stored = ckpt.expect_tensor(&t.name, &t.shape)?;
            params[t.range()].copy_from_slice(&stored.data);
        }
        Ok(TransformerModel { config, layout, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path).map_err(CheckpointError::from)?);
        self.to_checkpoint().write_to(file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(CheckpointError::from)?;
        Self::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
    }
}

/// Row-wise softmax in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
