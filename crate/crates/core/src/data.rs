//! Corpus ingestion and sequence formatting.
//!
//! Input files follow the public EmpatheticDialogues CSV layout: one row per
//! utterance with columns `conv_id,utterance_idx,context,prompt,speaker_idx,utterance`
//! (extra columns are ignored). Literal commas are stored as `_comma_`.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{TokenId, TokenizerError, Vocabulary};

pub const BOS: &str = "<|bos|>";
pub const EOS: &str = "<|eos|>";
pub const SIT: &str = "<|sit|>";
pub const SPK: &str = "<|spk|>";
pub const LST: &str = "<|lst|>";

/// Structural specials, in the id order they are registered.
pub const STRUCTURAL_SPECIALS: [&str; 5] = [BOS, EOS, SIT, SPK, LST];

const REQUIRED_COLUMNS: [&str; 6] = ["conv_id", "utterance_idx", "context", "prompt", "speaker_idx", "utterance"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed header: missing column `{0}`")]
    MalformedHeader(String),
    #[error("label not in registry: {0}")]
    UnknownLabel(String),
    #[error("turn {0} is not a listener turn")]
    NotListenerTurn(usize),
    #[error("turn index {index} out of range for a conversation of {len} turns")]
    TurnOutOfRange { index: usize, len: usize },
    #[error("target of {target} tokens does not fit a context of {max_len}")]
    TargetTooLong { target: usize, max_len: usize },
    #[error("emotion manifest is empty")]
    EmptyManifest,
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speaker,
    Listener,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub conv_id: String,
    pub emotion: String,
    pub situation: String,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Builds a conversation with alternating roles, speaker first.
    pub fn from_utterances(conv_id: &str, emotion: &str, situation: &str, utterances: &[&str]) -> Self {
        Conversation {
            conv_id: conv_id.into(),
            emotion: emotion.into(),
            situation: situation.into(),
            turns: utterances
                .iter()
                .enumerate()
                .map(|(i, u)| Turn { role: role_for_position(i), text: (*u).into() })
                .collect(),
        }
    }

    pub fn listener_turns(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns.iter().enumerate().filter(|(_, t)| t.role == Role::Listener).map(|(i, _)| i)
    }
}

fn role_for_position(i: usize) -> Role {
    if i % 2 == 0 {
        Role::Speaker
    } else {
        Role::Listener
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    /// Guesses the split from a file name such as `train.csv` or `valid.csv`.
    pub fn from_path(path: &Path) -> Option<Self> {
        let stem = path.file_stem()?.to_str()?.to_ascii_lowercase();
        if stem.contains("train") {
            Some(SplitName::Train)
        } else if stem.contains("valid") || stem.contains("dev") {
            Some(SplitName::Valid)
        } else if stem.contains("test") {
            Some(SplitName::Test)
        } else {
            None
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub conversations: Vec<Conversation>,
}

impl CorpusSplit {
    /// Same split with every situation blanked; formatted sequences then
    /// carry `<|sit|>` with no text after it.
    pub fn without_situations(mut self) -> Self {
        for c in &mut self.conversations {
            c.situation.clear();
        }
        self
    }
}

/// Non-fatal problems met while parsing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseReport {
    pub rows_read: usize,
    pub rows_skipped: usize,
    pub warnings: Vec<String>,
}

pub fn unescape_commas(s: &str) -> String {
    s.replace("_comma_", ",")
}

pub fn escape_commas(s: &str) -> String {
    s.replace(',', "_comma_")
}

/// Parses a corpus file. See [`parse_corpus_reader`].
pub fn parse_corpus(path: &Path, name: SplitName) -> Result<(CorpusSplit, ParseReport), DataError> {
    let file = std::fs::File::open(path)?;
    parse_corpus_reader(file, name)
}

/// Parses EmpatheticDialogues-style CSV.
///
/// Rows are grouped by `conv_id` (first-appearance order) and sorted by
/// `utterance_idx`, which must run 1, 2, 3, ... within a conversation. Odd
/// indices are speaker turns and even indices listener turns. At the first
/// gap or duplicate index the offending row and the rest of that
/// conversation are skipped and counted in the report.
pub fn parse_corpus_reader<R: Read>(reader: R, name: SplitName) -> Result<(CorpusSplit, ParseReport), DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| DataError::MalformedHeader(name.into()))
    };
    let idx: Vec<usize> = REQUIRED_COLUMNS.iter().map(|c| col(c)).collect::<Result<_, _>>()?;
    let [c_id, c_idx, c_ctx, c_prompt, _c_spk, c_utt] = idx[..] else { unreachable!() };

    struct Row {
        idx: u64,
        context: String,
        prompt: String,
        utterance: String,
    }

    let mut report = ParseReport::default();
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        report.rows_read += 1;
        let field = |i: usize| record.get(i).unwrap_or("");
        let parsed_idx = field(c_idx).trim().parse::<u64>();
        let Ok(utt_idx) = parsed_idx else {
            report.rows_skipped += 1;
            report.warnings.push(format!("row {}: bad utterance_idx {:?}", line + 2, field(c_idx)));
            continue;
        };
        let conv_id = field(c_id).to_string();
        let row = Row {
            idx: utt_idx,
            context: field(c_ctx).trim().to_string(),
            prompt: unescape_commas(field(c_prompt)),
            utterance: unescape_commas(field(c_utt)),
        };
        groups
            .entry(conv_id.clone())
            .or_insert_with(|| {
                order.push(conv_id);
                Vec::new()
            })
            .push(row);
    }

    let mut conversations = Vec::with_capacity(order.len());
    for conv_id in order {
        let mut rows = groups.remove(&conv_id).expect("grouped id");
        rows.sort_by_key(|r| r.idx);
        let mut turns = Vec::with_capacity(rows.len());
        for (pos, row) in rows.iter().enumerate() {
            if row.idx != pos as u64 + 1 {
                let skipped = rows.len() - pos;
                report.rows_skipped += skipped;
                report.warnings.push(format!(
                    "conversation {conv_id}: gap in conversation at utterance_idx {} ({skipped} rows skipped)",
                    row.idx
                ));
                break;
            }
            turns.push(Turn { role: role_for_position(pos), text: row.utterance.clone() });
        }
        if turns.is_empty() {
            continue;
        }
        conversations.push(Conversation {
            conv_id,
            emotion: rows[0].context.clone(),
            situation: rows[0].prompt.clone(),
            turns,
        });
    }
    Ok((CorpusSplit { name, conversations }, report))
}

/// Writes conversations in the same CSV layout the parser reads.
pub fn write_corpus_csv<W: std::io::Write>(writer: W, conversations: &[Conversation]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REQUIRED_COLUMNS)?;
    for conv in conversations {
        for (i, turn) in conv.turns.iter().enumerate() {
            let speaker_idx = if turn.role == Role::Speaker { "0" } else { "1" };
            w.write_record([
                conv.conv_id.as_str(),
                &(i + 1).to_string(),
                &conv.emotion,
                &escape_commas(&conv.situation),
                speaker_idx,
                &escape_commas(&turn.text),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub num_conversations: usize,
    pub num_utterances: usize,
    pub avg_turns: f64,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {:.2})", self.num_conversations, self.num_utterances, self.avg_turns)
    }
}

pub fn corpus_stats(split: &CorpusSplit) -> CorpusStats {
    let num_conversations = split.conversations.len();
    let num_utterances = split.conversations.iter().map(|c| c.turns.len()).sum();
    let avg_turns = if num_conversations == 0 { 0.0 } else { num_utterances as f64 / num_conversations as f64 };
    CorpusStats { num_conversations, num_utterances, avg_turns }
}

/// The declared emotion label set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionRegistry {
    labels: Vec<String>,
}

impl EmotionRegistry {
    pub fn new<S: AsRef<str>>(labels: &[S]) -> Result<Self, DataError> {
        let mut out: Vec<String> = Vec::new();
        for l in labels {
            let l = l.as_ref().trim();
            if !l.is_empty() && !out.iter().any(|x| x == l) {
                out.push(l.to_string());
            }
        }
        if out.is_empty() {
            return Err(DataError::EmptyManifest);
        }
        Ok(EmotionRegistry { labels: out })
    }

    /// One label per line; blank lines and `#` comments are ignored.
    pub fn parse_manifest(text: &str) -> Result<Self, DataError> {
        let labels: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
        Self::new(&labels)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::parse_manifest(&std::fs::read_to_string(path)?)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// Registry covering every label that appears in the given splits, in
    /// first-appearance order.
    pub fn from_splits<'a>(splits: impl IntoIterator<Item = &'a CorpusSplit>) -> Result<Self, DataError> {
        let labels: Vec<&str> =
            splits.into_iter().flat_map(|s| s.conversations.iter().map(|c| c.emotion.as_str())).collect();
        Self::new(&labels)
    }

    /// Structural specials followed by one `<|emo_{label}|>` per label.
    pub fn special_tokens(&self) -> Vec<String> {
        STRUCTURAL_SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(self.labels.iter().map(|l| emotion_token(l)))
            .collect()
    }

    /// Labels used in `split` that this registry does not declare.
    pub fn unknown_labels(&self, split: &CorpusSplit) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &split.conversations {
            if !self.contains(&c.emotion) && !out.contains(&c.emotion) {
                out.push(c.emotion.clone());
            }
        }
        out
    }
}

pub fn emotion_token(label: &str) -> String {
    format!("<|emo_{label}|>")
}

/// The two conditioning regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FineTuned,
    EmoPrepend,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::FineTuned => "fine_tuned",
            Mode::EmoPrepend => "emo_prepend",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fine_tuned" | "fine-tuned" => Ok(Mode::FineTuned),
            "emo_prepend" | "emo-prepend" => Ok(Mode::EmoPrepend),
            other => Err(format!("unknown mode {other:?} (expected fine_tuned or emo_prepend)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedExample {
    pub input_ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub mode: Mode,
}

impl FormattedExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Positions that contribute to the loss (position 0 has no predecessor).
    pub fn supervised_positions(&self) -> usize {
        self.loss_mask.iter().skip(1).filter(|&&m| m).count()
    }

    /// Plain language-modeling example: every token after the first is supervised.
    pub fn plain(ids: Vec<TokenId>) -> Self {
        let mut loss_mask = vec![true; ids.len()];
        if let Some(first) = loss_mask.first_mut() {
            *first = false;
        }
        FormattedExample { input_ids: ids, loss_mask, mode: Mode::FineTuned }
    }
}

/// JSON-lines record for a formatted example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub ids: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub mode: Mode,
    pub conv_id: String,
    pub turn: usize,
}

impl ExampleRecord {
    pub fn new(example: &FormattedExample, conv_id: &str, turn: usize) -> Self {
        ExampleRecord {
            ids: example.input_ids.clone(),
            mask: example.loss_mask.clone(),
            mode: example.mode,
            conv_id: conv_id.to_string(),
            turn,
        }
    }
}

fn special(vocab: &Vocabulary, name: &str) -> Result<TokenId, DataError> {
    vocab.special_id(name).ok_or_else(|| DataError::UnknownLabel(name.to_string()))
}

/// Number of leading tokens that survive left truncation: `<|bos|>` plus the
/// emotion token when present.
fn header_len(mode: Mode) -> usize {
    match mode {
        Mode::FineTuned => 1,
        Mode::EmoPrepend => 2,
    }
}

/// Prefix for the listener turn at `upto_turn`: everything up to and
/// including the `<|lst|>` that opens the target.
pub fn format_prefix(
    conv: &Conversation,
    upto_turn: usize,
    mode: Mode,
    vocab: &Vocabulary,
) -> Result<Vec<TokenId>, DataError> {
    let target = conv
        .turns
        .get(upto_turn)
        .ok_or(DataError::TurnOutOfRange { index: upto_turn, len: conv.turns.len() })?;
    if target.role != Role::Listener {
        return Err(DataError::NotListenerTurn(upto_turn));
    }
    let mut ids = vec![special(vocab, BOS)?];
    if mode == Mode::EmoPrepend {
        let emo = emotion_token(&conv.emotion);
        ids.push(vocab.special_id(&emo).ok_or_else(|| DataError::UnknownLabel(conv.emotion.clone()))?);
    }
    ids.push(special(vocab, SIT)?);
    ids.extend(vocab.encode(&conv.situation)?);
    let spk = special(vocab, SPK)?;
    let lst = special(vocab, LST)?;
    for turn in &conv.turns[..upto_turn] {
        ids.push(if turn.role == Role::Speaker { spk } else { lst });
        ids.extend(vocab.encode(&turn.text)?);
    }
    ids.push(lst);
    Ok(ids)
}

/// Formats one training example whose target is the listener turn at `upto_turn`.
///
/// The loss mask covers exactly the target utterance and the closing `<|eos|>`.
pub fn format_example(
    conv: &Conversation,
    upto_turn: usize,
    mode: Mode,
    vocab: &Vocabulary,
) -> Result<FormattedExample, DataError> {
    let mut input_ids = format_prefix(conv, upto_turn, mode, vocab)?;
    let mut loss_mask = vec![false; input_ids.len()];
    let target = vocab.encode(&conv.turns[upto_turn].text)?;
    input_ids.extend_from_slice(&target);
    input_ids.push(special(vocab, EOS)?);
    loss_mask.resize(input_ids.len(), true);
    Ok(FormattedExample { input_ids, loss_mask, mode })
}

/// Drops the oldest context tokens so the example fits `max_len`.
///
/// The header (`<|bos|>` and any emotion token) is kept, and the tokens
/// right after it are dropped first. The supervised region is never cut;
/// if it cannot fit, this fails.
pub fn truncate_left(example: &FormattedExample, max_len: usize) -> Result<FormattedExample, DataError> {
    if example.len() <= max_len {
        return Ok(example.clone());
    }
    let header = header_len(example.mode).min(example.len());
    let first_masked = example.loss_mask.iter().position(|&m| m).unwrap_or(example.len());
    // The header plus at least one context token must precede the target.
    let supervised = example.len() - first_masked;
    if header + 1 + supervised > max_len || first_masked < header + 1 {
        return Err(DataError::TargetTooLong { target: supervised, max_len });
    }
    let drop = example.len() - max_len;
    fn keep<T: Copy>(v: &[T], header: usize, drop: usize) -> Vec<T> {
        v[..header].iter().chain(&v[header + drop..]).copied().collect()
    }
    Ok(FormattedExample {
        input_ids: keep(&example.input_ids, header, drop),
        loss_mask: keep(&example.loss_mask, header, drop),
        mode: example.mode,
    })
}

/// Same truncation for a generation prefix.
pub fn truncate_prefix(prefix: &[TokenId], mode: Mode, max_len: usize) -> Vec<TokenId> {
    if prefix.len() <= max_len {
        return prefix.to_vec();
    }
    let header = header_len(mode).min(prefix.len()).min(max_len.saturating_sub(1));
    let tail = max_len - header;
    prefix[..header].iter().chain(&prefix[prefix.len() - tail..]).copied().collect()
}

/// `<|bos|> text <|eos|>` as a plain language-modeling example for the
/// pretraining stage, cut to the first `max_len` tokens.
pub fn format_plain_text(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<FormattedExample, DataError> {
    let mut ids = vec![special(vocab, BOS)?];
    ids.extend(vocab.encode(text)?);
    ids.push(special(vocab, EOS)?);
    ids.truncate(max_len);
    Ok(FormattedExample::plain(ids))
}

/// One example per listener turn of every conversation, truncated to `max_len`.
/// Conversations whose label is missing from the vocabulary are an error;
/// targets too long for the context are skipped and counted.
pub fn expand_split(
    split: &CorpusSplit,
    mode: Mode,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<(String, usize, FormattedExample)>, usize), DataError> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for conv in &split.conversations {
        for turn in conv.listener_turns() {
            let ex = format_example(conv, turn, mode, vocab)?;
            match truncate_left(&ex, max_len) {
                Ok(ex) => out.push((conv.conv_id.clone(), turn, ex)),
                Err(DataError::TargetTooLong { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((out, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{train_bpe_with, AlphabetChoice};

    const WORK_SITUATION: &str = "I just knew I was going to do well at work this morning.";

    fn work_conversation() -> Conversation {
        Conversation::from_utterances(
            "hit:0_conv:0",
            "confident",
            WORK_SITUATION,
            &[
                "I just knew I was going to do well at work this morning. I was prepared",
                "That is the way to go! Keep it up!",
            ],
        )
    }

    fn vocab_for(convs: &[Conversation]) -> Vocabulary {
        let registry = EmotionRegistry::from_splits([&CorpusSplit {
            name: SplitName::Train,
            conversations: convs.to_vec(),
        }])
        .unwrap();
        let texts: Vec<String> =
            convs.iter().flat_map(|c| std::iter::once(c.situation.clone()).chain(c.turns.iter().map(|t| t.text.clone()))).collect();
        let specials = registry.special_tokens();
        train_bpe_with(&texts, 256 + 40 + specials.len(), &specials, AlphabetChoice::AllBytes).unwrap()
    }

    #[test]
    fn without_situations_blanks_every_situation() {
        let conv = Conversation::from_utterances("c", "proud", "won", &["a", "b"]);
        let split = CorpusSplit { name: SplitName::Train, conversations: vec![conv.clone(), conv] };
        let blank = split.without_situations();
        assert!(blank.conversations.iter().all(|c| c.situation.is_empty() && c.turns.len() == 2));
    }

    #[test]
    fn plain_text_example() {
        let v = vocab_for(&[work_conversation()]);
        let ex = format_plain_text("work this morning", &v, 64).unwrap();
        assert_eq!(ex.input_ids[0], v.special_id(BOS).unwrap());
        assert_eq!(*ex.input_ids.last().unwrap(), v.special_id(EOS).unwrap());
        assert_eq!(ex.supervised_positions(), ex.len() - 1);
        assert_eq!(format_plain_text("work this morning", &v, 3).unwrap().len(), 3);
    }

    #[test]
    fn minimal_file() {
        let csv = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance\n\
                   c1,1,confident,I aced it_comma_ truly,0,I was shocked_comma_ honestly\n\
                   c1,2,confident,I aced it_comma_ truly,1,Nice!\n";
        let (split, report) = parse_corpus_reader(csv.as_bytes(), SplitName::Train).unwrap();
        assert_eq!(report.rows_skipped, 0);
        assert_eq!(split.conversations.len(), 1);
        let c = &split.conversations[0];
        assert_eq!(c.emotion, "confident");
        assert_eq!(c.situation, "I aced it, truly");
        assert_eq!(c.turns.len(), 2);
        assert_eq!(c.turns[0].text, "I was shocked, honestly");
        assert_eq!(c.turns[1].role, Role::Listener);
        let stats = corpus_stats(&split);
        assert_eq!((stats.num_conversations, stats.num_utterances), (1, 2));
    }

    #[test]
    fn extra_columns_and_row_order() {
        let csv = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags\n\
                   c1,2,sad,p,1,second,5|5|5,\n\
                   c1,1,sad,p,0,first,5|5|5,\n";
        let (split, _) = parse_corpus_reader(csv.as_bytes(), SplitName::Test).unwrap();
        let texts: Vec<_> = split.conversations[0].turns.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["first", "second"]);
    }

    #[test]
    fn missing_column_is_malformed_header() {
        let csv = "conv_id,utterance_idx,context,prompt,utterance\n";
        let err = parse_corpus_reader(csv.as_bytes(), SplitName::Train).unwrap_err();
        assert!(matches!(err, DataError::MalformedHeader(c) if c == "speaker_idx"));
    }

    #[test]
    fn gap_skips_rest_of_conversation() {
        let csv = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance\n\
                   c1,1,sad,p,0,a\nc1,2,sad,p,1,b\nc1,4,sad,p,1,d\nc1,5,sad,p,0,e\n\
                   c2,2,sad,p,1,orphan\n";
        let (split, report) = parse_corpus_reader(csv.as_bytes(), SplitName::Train).unwrap();
        assert_eq!(split.conversations.len(), 1);
        assert_eq!(split.conversations[0].turns.len(), 2);
        assert_eq!(report.rows_skipped, 3);
        assert!(report.warnings.iter().all(|w| w.contains("gap in conversation")));
    }

    #[test]
    fn empty_split_stats_are_zero() {
        let csv = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance\n";
        let (split, _) = parse_corpus_reader(csv.as_bytes(), SplitName::Valid).unwrap();
        let s = corpus_stats(&split);
        assert_eq!((s.num_conversations, s.num_utterances, s.avg_turns), (0, 0, 0.0));
    }

    #[test]
    fn stats_four_turns() {
        let c = Conversation::from_utterances("x", "sad", "s", &["a", "b", "c", "d"]);
        let s = corpus_stats(&CorpusSplit { name: SplitName::Train, conversations: vec![c] });
        assert_eq!(s.to_string(), "(1, 4, 4.00)");
    }

    #[test]
    fn csv_write_parse_round_trip() {
        let convs = vec![work_conversation(), Conversation::from_utterances("c2", "sad", "a, b", &["x, y", "z", "w"])];
        let mut buf = Vec::new();
        write_corpus_csv(&mut buf, &convs).unwrap();
        let (split, _) = parse_corpus_reader(buf.as_slice(), SplitName::Train).unwrap();
        assert_eq!(split.conversations, convs);
    }

    #[test]
    fn emo_prepend_layout() {
        let conv = work_conversation();
        let vocab = vocab_for(&[conv.clone()]);
        let ex = format_example(&conv, 1, Mode::EmoPrepend, &vocab).unwrap();
        let head = [
            vocab.special_id(BOS).unwrap(),
            vocab.special_id("<|emo_confident|>").unwrap(),
            vocab.special_id(SIT).unwrap(),
        ];
        assert_eq!(&ex.input_ids[..3], &head);
        let sit = vocab.encode(WORK_SITUATION).unwrap();
        assert_eq!(&ex.input_ids[3..3 + sit.len()], &sit[..]);
        assert_eq!(*ex.input_ids.last().unwrap(), vocab.special_id(EOS).unwrap());

        let ft = format_example(&conv, 1, Mode::FineTuned, &vocab).unwrap();
        assert_eq!(ex.len(), ft.len() + 1);
        let mut without_emo = ex.input_ids.clone();
        without_emo.remove(1);
        assert_eq!(without_emo, ft.input_ids);
    }

    #[test]
    fn mask_covers_target_and_eos() {
        let conv = Conversation::from_utterances("c", "sad", "sit", &["hello", "Yes."]);
        let vocab = vocab_for(&[conv.clone()]);
        let ex = format_example(&conv, 1, Mode::FineTuned, &vocab).unwrap();
        let n_true = ex.loss_mask.iter().filter(|&&m| m).count();
        assert_eq!(n_true, vocab.encode("Yes.").unwrap().len() + 1);
        assert_eq!(ex.loss_mask.len(), ex.input_ids.len());
        assert!(ex.loss_mask.ends_with(&vec![true; n_true]));
    }

    #[test]
    fn format_errors() {
        let conv = work_conversation();
        let vocab = vocab_for(&[conv.clone()]);
        assert!(matches!(format_example(&conv, 0, Mode::FineTuned, &vocab), Err(DataError::NotListenerTurn(0))));
        let mut other = conv.clone();
        other.emotion = "bewildered".into();
        assert!(matches!(format_example(&other, 1, Mode::EmoPrepend, &vocab), Err(DataError::UnknownLabel(_))));
        // fine_tuned never looks at the label
        assert!(format_example(&other, 1, Mode::FineTuned, &vocab).is_ok());
    }

    #[test]
    fn decoding_strips_to_original_text() {
        let conv = Conversation::from_utterances("c", "confident", WORK_SITUATION, &["a b", "c d", "e", "f g"]);
        let vocab = vocab_for(&[conv.clone()]);
        let ex = format_example(&conv, 3, Mode::EmoPrepend, &vocab).unwrap();
        let pieces: Vec<String> = split_on_specials(&vocab, &ex.input_ids);
        assert_eq!(pieces, vec![WORK_SITUATION, "a b", "c d", "e", "f g"]);
    }

    fn split_on_specials(vocab: &Vocabulary, ids: &[TokenId]) -> Vec<String> {
        ids.split(|&id| vocab.is_special(id))
            .filter(|s| !s.is_empty())
            .map(|s| vocab.decode(s).unwrap())
            .collect()
    }

    #[test]
    fn truncation_keeps_header_and_target() {
        let conv = Conversation::from_utterances("c", "confident", WORK_SITUATION, &["a b c d e f", "ok"]);
        let vocab = vocab_for(&[conv.clone()]);
        let ex = format_example(&conv, 1, Mode::EmoPrepend, &vocab).unwrap();
        let cut = truncate_left(&ex, 8).unwrap();
        assert_eq!(cut.len(), 8);
        assert_eq!(&cut.input_ids[..2], &ex.input_ids[..2]);
        assert_eq!(&cut.input_ids[2..], &ex.input_ids[ex.len() - 6..]);
        assert_eq!(cut.supervised_positions(), ex.supervised_positions());
        assert!(matches!(truncate_left(&ex, 4), Err(DataError::TargetTooLong { .. })));
        assert_eq!(truncate_left(&ex, 1000).unwrap(), ex);
    }

    #[test]
    fn registry_specials() {
        let r = EmotionRegistry::parse_manifest("# labels\nproud\n\nsad\nproud\n").unwrap();
        assert_eq!(r.labels(), ["proud", "sad"]);
        let s = r.special_tokens();
        assert_eq!(s.len(), 7);
        assert_eq!(s[5], "<|emo_proud|>");
        assert!(EmotionRegistry::parse_manifest("\n").is_err());
    }

    #[test]
    fn split_name_from_path() {
        assert_eq!(SplitName::from_path(Path::new("data/train.csv")), Some(SplitName::Train));
        assert_eq!(SplitName::from_path(Path::new("valid.csv")), Some(SplitName::Valid));
        assert_eq!(SplitName::from_path(Path::new("x/test.csv")), Some(SplitName::Test));
        assert_eq!(SplitName::from_path(Path::new("other.csv")), None);
    }
}
