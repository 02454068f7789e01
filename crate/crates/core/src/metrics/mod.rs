//! Automated evaluation metrics: perplexity, BLEU, distinct-unigram
//! diversity, response length, Flesch Reading Ease and embedding coherence.
//!
//! BLEU, diversity and length work on lowercased whitespace-separated
//! surface words, not BPE ids.

mod suite;

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use thiserror::Error;

pub use suite::{evaluate_suite, generate_split, EvalError, EvalReport, ExampleEval, REFERENCE_TABLE};

use crate::data::FormattedExample;
use crate::model::{ModelError, TransformerModel};
use crate::parallel;
use crate::tokenizer::{TokenId, TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no examples")]
    NoExamples,
    #[error("zero masked tokens")]
    NoMaskedTokens,
    #[error("candidate and reference counts differ ({candidates} vs {references})")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("empty reference at index {0}")]
    EmptyReference(usize),
    #[error("all generations are empty")]
    EmptyGenerations,
    #[error("text has no words")]
    NoWords,
    #[error("text encodes to zero tokens")]
    NoTokens,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Σ masked NLL and masked-token count over `examples`.
pub fn masked_nll_total(model: &TransformerModel, examples: &[FormattedExample]) -> Result<(f64, usize), MetricsError> {
    if examples.is_empty() {
        return Err(MetricsError::NoExamples);
    }
    let parts = parallel::map_indexed(examples, |_, ex| match model.masked_nll(ex) {
        Ok(r) => Ok(r),
        Err(ModelError::NoSupervisedPositions) => Ok((0.0, 0)),
        Err(e) => Err(e),
    });
    let mut nll = 0.0;
    let mut n = 0;
    for p in parts {
        let (l, c) = p?;
        nll += l;
        n += c;
    }
    if n == 0 {
        return Err(MetricsError::NoMaskedTokens);
    }
    Ok((nll, n))
}

/// Token-weighted perplexity over the masked positions:
/// exp(Σ NLL / Σ masked tokens), natural log.
pub fn perplexity(model: &TransformerModel, examples: &[FormattedExample]) -> Result<f64, MetricsError> {
    let (nll, n) = masked_nll_total(model, examples)?;
    Ok((nll / n as f64).exp())
}

/// Perplexity over every position after the first, ignoring the loss mask.
pub fn perplexity_all_tokens(model: &TransformerModel, examples: &[FormattedExample]) -> Result<f64, MetricsError> {
    let full: Vec<FormattedExample> = examples
        .iter()
        .map(|ex| FormattedExample { mode: ex.mode, ..FormattedExample::plain(ex.input_ids.clone()) })
        .collect();
    perplexity(model, &full)
}

/// Lowercased whitespace-separated words.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<T: Hash + Eq + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Count used in place of zero matched n-grams.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Corpus-level BLEU with uniform 4-gram weights.
pub fn bleu<T: Hash + Eq + Clone>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64, MetricsError> {
    bleu_weighted(candidates, references, &[0.25; 4])
}

/// Corpus-level BLEU with n-gram weights `weights[n-1]`.
///
/// Clipped matches and candidate n-gram totals are summed over the corpus
/// before dividing. A zero match count is replaced by [`BLEU_EPSILON`].
/// Brevity penalty: 1 if c > r, else exp(1 - r/c), with c and r the summed
/// candidate and reference lengths.
pub fn bleu_weighted<T: Hash + Eq + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    weights: &[f64],
) -> Result<f64, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::NoExamples);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch { candidates: candidates.len(), references: references.len() });
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(MetricsError::EmptyReference(i));
    }
    let max_n = weights.len();
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        c += cand.len();
        r += reference.len();
        for n in 1..=max_n {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in &cand_counts {
                matched[n - 1] += (*count).min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let m = if matched[i] == 0 { BLEU_EPSILON } else { matched[i] as f64 };
            let p = if total[i] == 0 { BLEU_EPSILON } else { m / total[i] as f64 };
            w * p.ln()
        })
        .sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((bp * log_precision.exp()).clamp(0.0, 1.0))
}

/// Distinct unigrams across all generations divided by the total token count.
pub fn diversity<T: Hash + Eq>(generations: &[Vec<T>]) -> Result<f64, MetricsError> {
    let total: usize = generations.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(MetricsError::EmptyGenerations);
    }
    let distinct: HashSet<&T> = generations.iter().flatten().collect();
    Ok(distinct.len() as f64 / total as f64)
}

pub fn avg_length<T>(generations: &[Vec<T>]) -> Result<f64, MetricsError> {
    if generations.is_empty() {
        return Err(MetricsError::NoExamples);
    }
    Ok(generations.iter().map(Vec::len).sum::<usize>() as f64 / generations.len() as f64)
}

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u' | b'y')
}

/// Heuristic syllable count of a word of ASCII letters: vowel groups
/// (a e i o u y), minus one for a silent final "e" unless the word ends in
/// consonant + "le"; at least 1.
pub fn count_syllables(word: &str) -> usize {
    let w: Vec<u8> = word.bytes().filter(u8::is_ascii_alphabetic).map(|b| b.to_ascii_lowercase()).collect();
    let mut groups = 0usize;
    let mut prev_vowel = false;
    for &c in &w {
        let v = is_vowel(c);
        if v && !prev_vowel {
            groups += 1;
        }
        prev_vowel = v;
    }
    if w.last() == Some(&b'e') {
        let consonant_le = w.len() >= 3 && w[w.len() - 2] == b'l' && !is_vowel(w[w.len() - 3]);
        if !consonant_le {
            groups = groups.saturating_sub(1);
        }
    }
    groups.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextStatistics {
    pub words: usize,
    pub sentences: usize,
    pub syllables: usize,
}

/// Words are whitespace-separated pieces containing at least one ASCII
/// letter (syllables are counted on the letters). Sentences are runs of
/// text closed by `.`, `!` or `?`, plus unterminated trailing text; at least 1.
pub fn text_statistics(text: &str) -> TextStatistics {
    let mut words = 0;
    let mut syllables = 0;
    for piece in text.split_whitespace() {
        if piece.bytes().any(|b| b.is_ascii_alphabetic()) {
            words += 1;
            syllables += count_syllables(piece);
        }
    }
    let mut sentences = 0;
    let mut in_terminator = false;
    let mut pending_text = false;
    for c in text.chars() {
        if matches!(c, '.' | '!' | '?') {
            if !in_terminator {
                sentences += 1;
            }
            in_terminator = true;
            pending_text = false;
        } else {
            in_terminator = false;
            if c.is_alphanumeric() {
                pending_text = true;
            }
        }
    }
    if pending_text {
        sentences += 1;
    }
    TextStatistics { words, sentences: sentences.max(1), syllables }
}

/// 206.835 - 1.015 (words / sentences) - 84.6 (syllables / words).
pub fn flesch_reading_ease(text: &str) -> Result<f64, MetricsError> {
    let s = text_statistics(text);
    if s.words == 0 {
        return Err(MetricsError::NoWords);
    }
    let (w, st, sy) = (s.words as f64, s.sentences as f64, s.syllables as f64);
    Ok(206.835 - 1.015 * (w / st) - 84.6 * (sy / w))
}

/// FRE mapped to [0, 1] as raw / 100, clamped.
pub fn normalize_readability(raw: f64) -> f64 {
    (raw / 100.0).clamp(0.0, 1.0)
}

fn mean_embedding(embeddings: &[f64], dim: usize, ids: &[TokenId]) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for &id in ids {
        let row = &embeddings[id as usize * dim..(id as usize + 1) * dim];
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= ids.len() as f64);
    mean
}

/// Cosine similarity of the mean embedding rows of two id sequences.
/// A zero-norm mean yields 0.
pub fn coherence_from_embeddings(
    embeddings: &[f64],
    dim: usize,
    context: &[TokenId],
    response: &[TokenId],
) -> Result<f64, MetricsError> {
    if context.is_empty() || response.is_empty() {
        return Err(MetricsError::NoTokens);
    }
    let a = mean_embedding(embeddings, dim, context);
    let b = mean_embedding(embeddings, dim, response);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Embedding-cosine coherence between a context and a response, using the
/// model's own token embeddings.
pub fn coherence(
    context_text: &str,
    response_text: &str,
    model: &TransformerModel,
    vocab: &Vocabulary,
) -> Result<f64, MetricsError> {
    let c = vocab.encode(context_text)?;
    let r = vocab.encode(response_text)?;
    coherence_from_embeddings(model.token_embedding(), model.config().d_model, &c, &r)
}

#[cfg(test)]
mod tests;
