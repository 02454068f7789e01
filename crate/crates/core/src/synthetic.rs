//! Synthetic corpora whose emotion label is the only cue for the response
//! vocabulary.
//!
//! Each label owns a pool of made-up words that no other label uses.
//! Situations and speaker turns draw from a separate neutral pool, so a
//! model can tell which pool a response comes from only by seeing the
//! emotion token (or earlier words of the same response).
//!
//! Pools never share a consonant, so they stay disjoint even at subword level.

use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::data::{write_corpus_csv, Conversation, CorpusSplit, DataError, SplitName};
use crate::rng::{rng_from_seed, Rng, SYNTH_OFFSET};

const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
/// Consonant groups; group 0 is the neutral pool.
const CONSONANT_GROUPS: [[char; 3]; 6] = [
    ['b', 'd', 'f'],
    ['g', 'h', 'j'],
    ['k', 'l', 'm'],
    ['n', 'p', 'r'],
    ['s', 't', 'v'],
    ['w', 'z', 'c'],
];

pub const DEFAULT_LABELS: [&str; 4] = ["joyful", "sad", "angry", "afraid"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub labels: Vec<String>,
    pub n_conversations: usize,
    pub pool_size: usize,
    pub situation_words: usize,
    pub speaker_words: usize,
    pub response_words: usize,
    /// Fractions of conversations going to the validation and test splits.
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            labels: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
            n_conversations: 2000,
            pool_size: 50,
            situation_words: 4,
            speaker_words: 4,
            response_words: 5,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub labels: Vec<String>,
    /// `pools[i]` holds the response words of `labels[i]`.
    pub pools: Vec<Vec<String>>,
    pub neutral: Vec<String>,
    pub train: CorpusSplit,
    pub valid: CorpusSplit,
    pub test: CorpusSplit,
}

impl SyntheticCorpus {
    /// Index of the label whose pool contains `word`.
    pub fn pool_of(&self, word: &str) -> Option<usize> {
        self.pools.iter().position(|p| p.iter().any(|w| w == word))
    }

    pub fn pool_for_label(&self, label: &str) -> Option<&[String]> {
        self.labels.iter().position(|l| l == label).map(|i| self.pools[i].as_slice())
    }

    pub fn splits(&self) -> [&CorpusSplit; 3] {
        [&self.train, &self.valid, &self.test]
    }

    /// Every text field, for tokenizer training.
    pub fn texts(&self) -> Vec<String> {
        self.splits()
            .iter()
            .flat_map(|s| s.conversations.iter())
            .flat_map(|c| std::iter::once(c.situation.clone()).chain(c.turns.iter().map(|t| t.text.clone())))
            .collect()
    }

    /// Writes `train.csv`, `valid.csv`, `test.csv` and `emotions.txt` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir)?;
        for split in self.splits() {
            let file = std::fs::File::create(dir.join(format!("{}.csv", split.name)))?;
            write_corpus_csv(std::io::BufWriter::new(file), &split.conversations)?;
        }
        let mut f = std::fs::File::create(dir.join("emotions.txt"))?;
        for l in &self.labels {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Draws `n` distinct two-syllable words whose consonants come from `group`.
fn word_pool(group: usize, n: usize, rng: &mut Rng) -> Vec<String> {
    let syllables: Vec<String> = CONSONANT_GROUPS[group]
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect();
    let mut words: Vec<String> =
        syllables.iter().flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}"))).collect();
    assert!(n <= words.len(), "pool size {n} exceeds {} available words", words.len());
    words.shuffle(rng);
    words.truncate(n);
    words
}

fn sentence(pool: &[String], n: usize, rng: &mut Rng) -> String {
    (0..n).map(|_| pool.choose(rng).expect("non-empty pool").as_str()).collect::<Vec<_>>().join(" ")
}

/// Builds the emotion-keyed corpus. Labels cycle over conversations, and the
/// split assignment is a seeded shuffle.
pub fn emotion_keyed(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(
        !spec.labels.is_empty() && spec.labels.len() < CONSONANT_GROUPS.len(),
        "between 1 and {} labels supported",
        CONSONANT_GROUPS.len() - 1
    );
    let mut rng = rng_from_seed(spec.seed.wrapping_add(SYNTH_OFFSET));
    let neutral = word_pool(0, spec.pool_size, &mut rng);
    let pools: Vec<Vec<String>> = (0..spec.labels.len()).map(|i| word_pool(i + 1, spec.pool_size, &mut rng)).collect();

    let mut convs: Vec<Conversation> = (0..spec.n_conversations)
        .map(|i| {
            let k = i % spec.labels.len();
            let situation = sentence(&neutral, spec.situation_words, &mut rng);
            let speaker = sentence(&neutral, spec.speaker_words, &mut rng);
            let listener = sentence(&pools[k], spec.response_words, &mut rng);
            Conversation::from_utterances(&format!("syn:{i}"), &spec.labels[k], &situation, &[&speaker, &listener])
        })
        .collect();
    convs.shuffle(&mut rng);

    let n_valid = (spec.n_conversations as f64 * spec.valid_fraction).round() as usize;
    let n_test = (spec.n_conversations as f64 * spec.test_fraction).round() as usize;
    let test = convs.split_off(convs.len() - n_test);
    let valid = convs.split_off(convs.len() - n_valid);
    SyntheticCorpus {
        labels: spec.labels.clone(),
        pools,
        neutral,
        train: CorpusSplit { name: SplitName::Train, conversations: convs },
        valid: CorpusSplit { name: SplitName::Valid, conversations: valid },
        test: CorpusSplit { name: SplitName::Test, conversations: test },
    }
}

/// Generic pretraining text over the same word pools: each line picks one
/// pool (neutral or emotional) uniformly and draws 4 to 12 words from it.
/// Uses its own random stream, so lines are independent of the dialogue corpus.
pub fn generic_corpus(corpus: &SyntheticCorpus, n_lines: usize, seed: u64) -> Vec<String> {
    let mut rng = rng_from_seed(seed.wrapping_add(SYNTH_OFFSET).wrapping_add(1));
    let all: Vec<&[String]> = std::iter::once(corpus.neutral.as_slice()).chain(corpus.pools.iter().map(Vec::as_slice)).collect();
    (0..n_lines)
        .map(|_| {
            let pool = all[rng.random_range(0..all.len())];
            let n = rng.random_range(4..=12);
            sentence(pool, n, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn pools_are_disjoint_and_sized() {
        let c = emotion_keyed(&SyntheticSpec::default());
        let mut seen = HashSet::new();
        for p in c.pools.iter().chain(std::iter::once(&c.neutral)) {
            assert_eq!(p.len(), 50);
            for w in p {
                assert!(seen.insert(w.clone()), "{w} appears twice");
            }
        }
        assert_eq!(c.train.conversations.len() + c.valid.conversations.len() + c.test.conversations.len(), 2000);
        assert_eq!(c.valid.conversations.len(), 200);
    }

    #[test]
    fn responses_use_their_label_pool_only() {
        let c = emotion_keyed(&SyntheticSpec { n_conversations: 200, ..SyntheticSpec::default() });
        for conv in &c.train.conversations {
            let k = c.labels.iter().position(|l| *l == conv.emotion).unwrap();
            for w in conv.turns[1].text.split(' ') {
                assert_eq!(c.pool_of(w), Some(k));
            }
            for w in conv.turns[0].text.split(' ').chain(conv.situation.split(' ')) {
                assert!(c.neutral.iter().any(|n| n == w));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec { n_conversations: 40, ..SyntheticSpec::default() };
        assert_eq!(emotion_keyed(&spec), emotion_keyed(&spec));
        assert_ne!(emotion_keyed(&spec), emotion_keyed(&SyntheticSpec { seed: 1, ..spec }));
    }

    #[test]
    fn generic_lines_stay_in_one_pool() {
        let c = emotion_keyed(&SyntheticSpec { n_conversations: 8, ..SyntheticSpec::default() });
        let lines = generic_corpus(&c, 100, 3);
        assert_eq!(lines, generic_corpus(&c, 100, 3));
        for line in &lines {
            let words: Vec<&str> = line.split(' ').collect();
            assert!((4..=12).contains(&words.len()));
            let first = c.pool_of(words[0]);
            assert!(words.iter().all(|w| c.pool_of(w) == first));
        }
    }

    #[test]
    fn written_dir_parses_back() {
        let c = emotion_keyed(&SyntheticSpec { n_conversations: 30, ..SyntheticSpec::default() });
        let dir = tempfile::tempdir().unwrap();
        c.write_dir(dir.path()).unwrap();
        let (valid, report) = crate::data::parse_corpus(&dir.path().join("valid.csv"), SplitName::Valid).unwrap();
        assert_eq!(report.rows_skipped, 0);
        assert_eq!(valid, c.valid);
        let reg = crate::data::EmotionRegistry::load(&dir.path().join("emotions.txt")).unwrap();
        assert_eq!(reg.labels(), c.labels.as_slice());
    }
}
