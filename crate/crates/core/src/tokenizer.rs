//! Byte-level byte-pair-encoding tokenizer.
//!
//! Text is first split into chunks: each chunk is a run of non-whitespace
//! bytes with at most one preceding whitespace byte folded in. Merges never
//! cross chunk boundaries. Special tokens live in their own id range at the
//! top of the vocabulary and are only ever inserted by the formatter; raw
//! text can never encode to a special id, even if it spells one out.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use thiserror::Error;

pub type TokenId = u32;

const FILE_MAGIC: &str = "bpe-v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab too small: need at least {needed} ids (alphabet + specials), got {requested}")]
    VocabTooSmall { needed: usize, requested: usize },
    #[error("unknown token id {0}")]
    UnknownTokenId(TokenId),
    #[error("byte 0x{0:02x} is not in the vocabulary alphabet")]
    UnencodableByte(u8),
    #[error("invalid special token {0:?}")]
    InvalidSpecial(String),
    #[error("duplicate special token {0:?}")]
    DuplicateSpecial(String),
    #[error("vocabulary file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Which byte values form the base symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Alphabet {
    /// All 256 byte values; every input is encodable.
    Full,
    /// Only the distinct bytes seen in the training corpus, ascending.
    Corpus(Vec<u8>),
}

impl Alphabet {
    fn bytes(&self) -> Vec<u8> {
        match self {
            Alphabet::Full => (0..=255u8).collect(),
            Alphabet::Corpus(b) => b.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Bytes(Vec<u8>),
    Special(String),
    /// Placeholder filling ids the corpus had no merges for. Never produced
    /// by `encode`; decodes to nothing.
    Reserved,
}

#[derive(Debug, Clone, Copy)]
struct MergeRule {
    rank: usize,
    result: TokenId,
}

/// A trained BPE vocabulary. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    alphabet: Alphabet,
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    id_to_token: Vec<Token>,
    token_to_id: HashMap<Vec<u8>, TokenId>,
    specials: HashMap<String, TokenId>,
    special_order: Vec<String>,
    byte_ids: [Option<TokenId>; 256],
    merge_rules: HashMap<(TokenId, TokenId), MergeRule>,
}

/// Options for [`train_bpe_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphabetChoice {
    /// Base symbols are the bytes that occur in the corpus.
    #[default]
    CorpusBytes,
    /// Base symbols are all 256 byte values.
    AllBytes,
}

fn is_ws(b: u8) -> bool {
    b.is_ascii_whitespace()
}

/// Splits text into merge-isolated chunks. Concatenating the chunks gives
/// back the input.
pub fn pre_tokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let n = text.len();
    let mut i = 0;
    while i < n {
        let ws_start = i;
        while i < n && is_ws(text[i]) {
            i += 1;
        }
        if i == n {
            chunks.push(&text[ws_start..n]);
            break;
        }
        let word_start = if i > ws_start {
            if i - 1 > ws_start {
                chunks.push(&text[ws_start..i - 1]);
            }
            i - 1
        } else {
            i
        };
        while i < n && !is_ws(text[i]) {
            i += 1;
        }
        chunks.push(&text[word_start..i]);
    }
    chunks
}

fn validate_special(name: &str) -> Result<(), TokenizerError> {
    if name.is_empty() || name.starts_with('#') || name.bytes().any(|b| is_ws(b) || b.is_ascii_control()) {
        return Err(TokenizerError::InvalidSpecial(name.to_string()));
    }
    Ok(())
}

/// Trains a vocabulary over the distinct bytes of `corpus`.
pub fn train_bpe<S: AsRef<str>>(
    corpus: &[S],
    target_vocab_size: usize,
    specials: &[S],
) -> Result<Vocabulary, TokenizerError> {
    train_bpe_with(corpus, target_vocab_size, specials, AlphabetChoice::CorpusBytes)
}

/// Trains a vocabulary of exactly `target_vocab_size` ids.
///
/// Repeatedly merges the most frequent adjacent symbol pair, counting
/// overlapping occurrences and weighting by chunk frequency. Ties go to the
/// lexicographically smallest `(left, right)` byte pair. When a merge
/// produces a byte string that is already a token, the merge is recorded
/// but no new id is allocated. If the corpus runs out of pairs first, the
/// remaining regular ids are [`Token::Reserved`].
pub fn train_bpe_with<S: AsRef<str>>(
    corpus: &[S],
    target_vocab_size: usize,
    specials: &[S],
    alphabet: AlphabetChoice,
) -> Result<Vocabulary, TokenizerError> {
    if corpus.iter().all(|t| t.as_ref().is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }
    let specials: Vec<String> = specials.iter().map(|s| s.as_ref().to_string()).collect();
    for s in &specials {
        validate_special(s)?;
    }

    let mut chunk_counts: BTreeMap<&[u8], u64> = BTreeMap::new();
    let mut seen = [false; 256];
    for text in corpus {
        for chunk in pre_tokenize(text.as_ref().as_bytes()) {
            *chunk_counts.entry(chunk).or_insert(0) += 1;
            for &b in chunk {
                seen[b as usize] = true;
            }
        }
    }
    let alphabet = match alphabet {
        AlphabetChoice::AllBytes => Alphabet::Full,
        AlphabetChoice::CorpusBytes => {
            Alphabet::Corpus((0..=255u8).filter(|&b| seen[b as usize]).collect())
        }
    };
    let base = alphabet.bytes().len();
    let needed = base + specials.len();
    if target_vocab_size < needed {
        return Err(TokenizerError::VocabTooSmall { needed, requested: target_vocab_size });
    }
    let regular_target = target_vocab_size - specials.len();

    let mut builder = Builder::new(alphabet);
    let mut words: Vec<(Vec<TokenId>, u64)> = chunk_counts
        .into_iter()
        .map(|(chunk, count)| {
            let ids = chunk.iter().map(|&b| builder.byte_ids[b as usize].expect("seen byte")).collect();
            (ids, count)
        })
        .collect();

    while builder.id_to_bytes.len() < regular_target {
        let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (ids, count) in &words {
            for w in ids.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += count;
            }
        }
        let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                // Reverse so the lexicographically smallest pair is the max.
                let ka = (&builder.id_to_bytes[pa.0 as usize], &builder.id_to_bytes[pa.1 as usize]);
                let kb = (&builder.id_to_bytes[pb.0 as usize], &builder.id_to_bytes[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((left, right), _)) = best else {
            break;
        };
        let result = builder.push_merge(left, right);
        for (ids, _) in &mut words {
            apply_merge(ids, left, right, result);
        }
    }

    builder.finish(specials, target_vocab_size)
}

/// Replaces non-overlapping occurrences of `(left, right)`, scanning left to right.
fn apply_merge(ids: &mut Vec<TokenId>, left: TokenId, right: TokenId, result: TokenId) {
    if ids.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

struct Builder {
    alphabet: Alphabet,
    id_to_bytes: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, TokenId>,
    byte_ids: [Option<TokenId>; 256],
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    merge_rules: HashMap<(TokenId, TokenId), MergeRule>,
}

impl Builder {
    fn new(alphabet: Alphabet) -> Self {
        let mut b = Builder {
            alphabet: alphabet.clone(),
            id_to_bytes: Vec::new(),
            token_to_id: HashMap::new(),
            byte_ids: [None; 256],
            merges: Vec::new(),
            merge_rules: HashMap::new(),
        };
        for byte in alphabet.bytes() {
            let id = b.id_to_bytes.len() as TokenId;
            b.id_to_bytes.push(vec![byte]);
            b.token_to_id.insert(vec![byte], id);
            b.byte_ids[byte as usize] = Some(id);
        }
        b
    }

    fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let lb = self.id_to_bytes[left as usize].clone();
        let rb = self.id_to_bytes[right as usize].clone();
        let mut joined = lb.clone();
        joined.extend_from_slice(&rb);
        let result = match self.token_to_id.get(&joined) {
            Some(&id) => id,
            None => {
                let id = self.id_to_bytes.len() as TokenId;
                self.id_to_bytes.push(joined.clone());
                self.token_to_id.insert(joined, id);
                id
            }
        };
        let rank = self.merges.len();
        self.merges.push((lb, rb));
        self.merge_rules.entry((left, right)).or_insert(MergeRule { rank, result });
        result
    }

    fn push_merge_bytes(&mut self, left: &[u8], right: &[u8], line: usize) -> Result<(), TokenizerError> {
        let l = self.token_to_id.get(left).copied();
        let r = self.token_to_id.get(right).copied();
        match (l, r) {
            (Some(l), Some(r)) => {
                self.push_merge(l, r);
                Ok(())
            }
            _ => Err(TokenizerError::Format { line, msg: "merge refers to an unknown symbol".into() }),
        }
    }

    /// Pads with [`Token::Reserved`] so that the specials end exactly at `vocab_size`.
    fn finish(self, specials: Vec<String>, vocab_size: usize) -> Result<Vocabulary, TokenizerError> {
        let mut id_to_token: Vec<Token> = self.id_to_bytes.into_iter().map(Token::Bytes).collect();
        let needed = id_to_token.len() + specials.len();
        if vocab_size < needed {
            return Err(TokenizerError::VocabTooSmall { needed, requested: vocab_size });
        }
        id_to_token.resize(vocab_size - specials.len(), Token::Reserved);
        let mut special_ids = HashMap::new();
        for name in &specials {
            validate_special(name)?;
            let id = id_to_token.len() as TokenId;
            if special_ids.insert(name.clone(), id).is_some() {
                return Err(TokenizerError::DuplicateSpecial(name.clone()));
            }
            id_to_token.push(Token::Special(name.clone()));
        }
        Ok(Vocabulary {
            alphabet: self.alphabet,
            merges: self.merges,
            id_to_token,
            token_to_id: self.token_to_id,
            specials: special_ids,
            special_order: specials,
            byte_ids: self.byte_ids,
            merge_rules: self.merge_rules,
        })
    }
}

impl Vocabulary {
    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn merges(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn token(&self, id: TokenId) -> Option<&Token> {
        self.id_to_token.get(id as usize)
    }

    /// Id of a regular (non-special) token by its bytes.
    pub fn id_of_bytes(&self, bytes: &[u8]) -> Option<TokenId> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn special_id(&self, name: &str) -> Option<TokenId> {
        self.specials.get(name).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        matches!(self.token(id), Some(Token::Special(_)))
    }

    /// Special-token surface forms in id order.
    pub fn specials(&self) -> &[String] {
        &self.special_order
    }

    /// Encodes raw text. Fails only for corpus-alphabet vocabularies given a
    /// byte outside their alphabet.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenizerError> {
        let mut out = Vec::new();
        for chunk in pre_tokenize(text.as_bytes()) {
            let mut ids = Vec::with_capacity(chunk.len());
            for &b in chunk {
                ids.push(self.byte_ids[b as usize].ok_or(TokenizerError::UnencodableByte(b))?);
            }
            self.merge_chunk(&mut ids);
            out.extend_from_slice(&ids);
        }
        Ok(out)
    }

    fn merge_chunk(&self, ids: &mut Vec<TokenId>) {
        while ids.len() >= 2 {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rules.get(&(w[0], w[1])).map(|r| ((w[0], w[1]), *r)))
                .min_by_key(|(_, r)| r.rank);
            match best {
                Some(((l, r), rule)) => apply_merge(ids, l, r, rule.result),
                None => break,
            }
        }
    }

    /// Raw bytes of a token sequence; specials render as their surface form.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            match self.token(id) {
                Some(Token::Bytes(b)) => out.extend_from_slice(b),
                Some(Token::Special(s)) => out.extend_from_slice(s.as_bytes()),
                Some(Token::Reserved) => {}
                None => return Err(TokenizerError::UnknownTokenId(id)),
            }
        }
        Ok(out)
    }

    /// Decodes to text. Byte sequences that are not valid UTF-8 (possible
    /// when sampling splits a multi-byte character) are replaced lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Serializes to the `bpe-v1` text format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FILE_MAGIC} {}", self.vocab_size());
        match &self.alphabet {
            Alphabet::Full => s.push_str("#alphabet full\n"),
            Alphabet::Corpus(bytes) => {
                s.push_str("#alphabet");
                for b in bytes {
                    let _ = write!(s, " {b:02x}");
                }
                s.push('\n');
            }
        }
        for (l, r) in &self.merges {
            s.push_str(&escape_symbol(l));
            s.push(' ');
            s.push_str(&escape_symbol(r));
            s.push('\n');
        }
        s.push_str("#specials\n");
        for name in &self.special_order {
            s.push_str(name);
            s.push('\n');
        }
        s
    }

    pub fn from_file_str(text: &str) -> Result<Self, TokenizerError> {
        let fmt_err = |line: usize, msg: &str| TokenizerError::Format { line, msg: msg.to_string() };
        let mut lines = text.split_terminator('\n').enumerate().map(|(i, l)| (i + 1, l));

        let (_, header) = lines.next().ok_or_else(|| fmt_err(1, "missing header"))?;
        let declared: usize = header
            .strip_prefix(FILE_MAGIC)
            .and_then(|rest| rest.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| fmt_err(1, "expected `bpe-v1 <vocab_size>`"))?;

        let (ln, alpha_line) = lines.next().ok_or_else(|| fmt_err(2, "missing alphabet line"))?;
        let alpha_spec = alpha_line
            .strip_prefix("#alphabet")
            .ok_or_else(|| fmt_err(ln, "expected `#alphabet`"))?;
        let alphabet = if alpha_spec == " full" {
            Alphabet::Full
        } else {
            let mut bytes = Vec::new();
            for tok in alpha_spec.split(' ').filter(|t| !t.is_empty()) {
                bytes.push(u8::from_str_radix(tok, 16).map_err(|_| fmt_err(ln, "bad alphabet byte"))?);
            }
            if bytes.windows(2).any(|w| w[0] >= w[1]) {
                return Err(fmt_err(ln, "alphabet must be strictly ascending"));
            }
            Alphabet::Corpus(bytes)
        };

        let mut builder = Builder::new(alphabet);
        let mut specials = Vec::new();
        let mut in_specials = false;
        for (ln, line) in lines {
            if in_specials {
                specials.push(line.to_string());
            } else if line == "#specials" {
                in_specials = true;
            } else {
                let (l, r) = line.split_once(' ').ok_or_else(|| fmt_err(ln, "expected `left right`"))?;
                let l = unescape_symbol(l).ok_or_else(|| fmt_err(ln, "bad escape"))?;
                let r = unescape_symbol(r).ok_or_else(|| fmt_err(ln, "bad escape"))?;
                builder.push_merge_bytes(&l, &r, ln)?;
            }
        }
        if !in_specials {
            return Err(fmt_err(0, "missing #specials section"));
        }
        builder.finish(specials, declared).map_err(|e| match e {
            TokenizerError::VocabTooSmall { needed, .. } => {
                fmt_err(1, &format!("header declares {declared} ids, merges and specials need {needed}"))
            }
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_file_str(&std::fs::read_to_string(path)?)
    }
}

fn escape_symbol(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'\\' && b != b'#' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

fn unescape_symbol(s: &str) -> Option<Vec<u8>> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            let hex = s.get(i + 2..i + 4)?;
            if bytes.get(i + 1) != Some(&b'x') {
                return None;
            }
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}
