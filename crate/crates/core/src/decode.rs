//! Nucleus (top-p) sampling.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EOS, LST, SPK};
use crate::model::{softmax_in_place, ModelError, TransformerModel};
use crate::rng::{rng_from_seed, uniform01, Rng};
use crate::tokenizer::{TokenId, TokenizerError, Vocabulary};

/// Nucleus mass used unless overridden.
pub const DEFAULT_TOP_P: f64 = 0.9;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("prefix too long: {len} tokens, context is {context_len}")]
    PrefixTooLong { len: usize, context_len: usize },
    #[error("empty prefix")]
    EmptyPrefix,
    #[error("invalid generation settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub stop_ids: BTreeSet<TokenId>,
    pub seed: u64,
}

impl GenerationSettings {
    /// Defaults: top-p 0.9, temperature 1, 64 new tokens, stopping at
    /// `<|eos|>`, `<|spk|>` or `<|lst|>` (whichever the vocabulary has).
    pub fn for_vocab(vocab: &Vocabulary, seed: u64) -> Self {
        let stop_ids = [EOS, SPK, LST].iter().filter_map(|s| vocab.special_id(s)).collect();
        GenerationSettings { top_p: DEFAULT_TOP_P, temperature: 1.0, max_new_tokens: 64, stop_ids, seed }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DecodeError::InvalidSettings(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DecodeError::InvalidSettings(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(DecodeError::InvalidSettings("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Token ids ordered by descending probability, lower id first on ties.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Smallest highest-probability prefix of `ranked` whose mass reaches `top_p`.
fn nucleus_len(probs: &[f64], order: &[usize], top_p: f64) -> usize {
    let mut mass = 0.0;
    for (n, &i) in order.iter().enumerate() {
        mass += probs[i];
        if mass >= top_p {
            return n + 1;
        }
    }
    // Rounding left the total just below top_p: keep all non-zero mass.
    order.iter().take_while(|&&i| probs[i] > 0.0).count().max(1)
}

/// Zeroes everything outside the nucleus and renormalizes.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return probs.to_vec();
    }
    let order = ranked(probs);
    let keep = nucleus_len(probs, &order, top_p);
    let mass: f64 = order[..keep].iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &order[..keep] {
        out[i] = probs[i] / mass;
    }
    out
}

/// Indices kept by [`nucleus_filter`], in ranked order.
pub fn nucleus_support(probs: &[f64], top_p: f64) -> Vec<usize> {
    let order = ranked(probs);
    let keep = if top_p >= 1.0 {
        order.iter().take_while(|&&i| probs[i] > 0.0).count()
    } else {
        nucleus_len(probs, &order, top_p)
    };
    order[..keep].to_vec()
}

/// Draws from a probability vector: walks the nucleus in ranked order until
/// the cumulative mass exceeds one uniform draw.
pub fn sample_from_probs(probs: &[f64], top_p: f64, rng: &mut Rng) -> TokenId {
    let support = nucleus_support(probs, top_p);
    let mass: f64 = support.iter().map(|&i| probs[i]).sum();
    let u = uniform01(rng) * mass;
    let mut acc = 0.0;
    for &i in &support {
        acc += probs[i];
        if u < acc {
            return i as TokenId;
        }
    }
    *support.last().expect("non-empty nucleus") as TokenId
}

/// softmax(logits / temperature), then a nucleus draw.
pub fn sample_token(logits: &[f64], settings: &GenerationSettings, rng: &mut Rng) -> TokenId {
    let mut probs: Vec<f64> = logits.iter().map(|z| z / settings.temperature).collect();
    softmax_in_place(&mut probs);
    sample_from_probs(&probs, settings.top_p, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Text of the sampled tokens, stop token excluded.
    pub text: String,
    /// Every sampled id, including a final stop id if one was drawn.
    pub ids: Vec<TokenId>,
}

impl Generation {
    /// Sampled ids without the trailing stop id.
    pub fn content_ids<'a>(&'a self, settings: &GenerationSettings) -> &'a [TokenId] {
        match self.ids.last() {
            Some(id) if settings.stop_ids.contains(id) => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

/// Autoregressive sampling from `prefix` with a fresh generator seeded by
/// `settings.seed`.
pub fn generate_response(
    model: &TransformerModel,
    prefix: &[TokenId],
    settings: &GenerationSettings,
    vocab: &Vocabulary,
) -> Result<Generation, DecodeError> {
    let mut rng = rng_from_seed(settings.seed);
    generate_with_rng(model, prefix, settings, vocab, &mut rng)
}

/// Like [`generate_response`] with a caller-owned generator. When the
/// running sequence outgrows the context, the oldest tokens slide out.
pub fn generate_with_rng(
    model: &TransformerModel,
    prefix: &[TokenId],
    settings: &GenerationSettings,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Result<Generation, DecodeError> {
    settings.validate()?;
    let ctx = model.config().context_len;
    if prefix.is_empty() {
        return Err(DecodeError::EmptyPrefix);
    }
    if prefix.len() >= ctx {
        return Err(DecodeError::PrefixTooLong { len: prefix.len(), context_len: ctx });
    }
    let mut seq = prefix.to_vec();
    let mut ids = Vec::new();
    for _ in 0..settings.max_new_tokens {
        let window = &seq[seq.len().saturating_sub(ctx)..];
        let logits = model.next_token_logits(window)?;
        let id = sample_token(&logits, settings, rng);
        ids.push(id);
        if settings.stop_ids.contains(&id) {
            break;
        }
        seq.push(id);
    }
    let content: Vec<TokenId> = match ids.last() {
        Some(id) if settings.stop_ids.contains(id) => ids[..ids.len() - 1].to_vec(),
        _ => ids.clone(),
    };
    // Specials other than the stop set may be sampled; they render as their surface form.
    let text = vocab.decode(&content)?;
    Ok(Generation { text, ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::{train_bpe_with, AlphabetChoice};
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn nucleus_examples() {
        let p = [0.5, 0.3, 0.2];
        assert!(close(&nucleus_filter(&p, 0.7), &[0.625, 0.375, 0.0]));
        assert!(close(&nucleus_filter(&p, 0.1), &[1.0, 0.0, 0.0]));
        assert_eq!(nucleus_filter(&p, 1.0), p.to_vec());
    }

    #[test]
    fn ties_prefer_lower_id() {
        let p = [0.25, 0.25, 0.25, 0.25];
        assert_eq!(nucleus_support(&p, 0.5), vec![0, 1]);
        assert!(close(&nucleus_filter(&p, 0.3), &[0.5, 0.5, 0.0, 0.0]));
    }

    #[test]
    fn cold_temperature_is_argmax() {
        let settings = GenerationSettings {
            top_p: 0.9,
            temperature: 1e-6,
            max_new_tokens: 1,
            stop_ids: BTreeSet::new(),
            seed: 0,
        };
        let logits = [0.1, 2.0, 1.99, -1.0];
        let mut rng = rng_from_seed(3);
        for _ in 0..1000 {
            assert_eq!(sample_token(&logits, &settings, &mut rng), 1);
        }
    }

    #[test]
    fn settings_validation() {
        let mut s = GenerationSettings { top_p: 0.0, temperature: 1.0, max_new_tokens: 4, stop_ids: BTreeSet::new(), seed: 0 };
        assert!(s.validate().is_err());
        s.top_p = 1.2;
        assert!(s.validate().is_err());
        s.top_p = 1.0;
        s.temperature = 0.0;
        assert!(s.validate().is_err());
        s.temperature = 0.5;
        assert!(s.validate().is_ok());
    }

    fn tiny_setup() -> (TransformerModel, Vocabulary) {
        let vocab = train_bpe_with(&["ab ba"], 260, &[EOS, SPK, LST], AlphabetChoice::AllBytes).unwrap();
        let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, context_len: 8, vocab_size: vocab.vocab_size() };
        (TransformerModel::init(cfg, 1).unwrap(), vocab)
    }

    #[test]
    fn budget_and_stop() {
        let (model, vocab) = tiny_setup();
        let mut s = GenerationSettings::for_vocab(&vocab, 5);
        assert_eq!(s.top_p, 0.9);
        s.max_new_tokens = 1;
        s.stop_ids.clear();
        let g = generate_response(&model, &[97, 98], &s, &vocab).unwrap();
        assert_eq!(g.ids.len(), 1);

        // Stop on whatever comes first.
        let first = g.ids[0];
        s.stop_ids.insert(first);
        s.max_new_tokens = 10;
        let g = generate_response(&model, &[97, 98], &s, &vocab).unwrap();
        assert_eq!(g.ids, vec![first]);
        assert_eq!(g.text, "");
    }

    #[test]
    fn generation_is_deterministic_and_slides() {
        let (model, vocab) = tiny_setup();
        let mut s = GenerationSettings::for_vocab(&vocab, 9);
        s.stop_ids.clear();
        s.max_new_tokens = 20; // overflows the 8-token context
        let a = generate_response(&model, &[97, 98, 32], &s, &vocab).unwrap();
        let b = generate_response(&model, &[97, 98, 32], &s, &vocab).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ids.len(), 20);
        assert!(matches!(
            generate_response(&model, &[1; 8], &s, &vocab),
            Err(DecodeError::PrefixTooLong { len: 8, context_len: 8 })
        ));
    }

    fn prob_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 1..12).prop_filter_map("non-zero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn filter_is_normalized_restriction(p in prob_vec(), top_p in 0.01f64..1.0) {
            let out = nucleus_filter(&p, top_p);
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let kept: Vec<usize> = (0..p.len()).filter(|&i| out[i] > 0.0).collect();
            prop_assert!(kept.iter().map(|&i| p[i]).sum::<f64>() >= top_p - 1e-12);
            for &i in &kept {
                for &j in &kept {
                    if p[i] > p[j] {
                        prop_assert!(out[i] > out[j]);
                    }
                }
            }
        }

        #[test]
        fn nucleus_grows_with_top_p(p in prob_vec(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = nucleus_support(&p, lo);
            let large = nucleus_support(&p, hi);
            prop_assert!(small.iter().all(|i| large.contains(i)));
        }

        #[test]
        fn samples_stay_in_nucleus(p in prob_vec(), top_p in 0.01f64..1.0, seed in any::<u64>()) {
            let support = nucleus_support(&p, top_p);
            let mut rng = rng_from_seed(seed);
            for _ in 0..50 {
                let id = sample_from_probs(&p, top_p, &mut rng) as usize;
                prop_assert!(support.contains(&id));
            }
        }
    }
}
