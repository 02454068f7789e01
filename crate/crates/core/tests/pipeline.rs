//! Library-level pipeline: synthetic corpus, tokenizer, training, then the
//! evaluation suite, on a model small enough to run in seconds.

use affectlm::data::{expand_split, EmotionRegistry, FormattedExample, Mode};
use affectlm::decode::GenerationSettings;
use affectlm::metrics::{evaluate_suite, generate_split};
use affectlm::model::{ModelConfig, TransformerModel};
use affectlm::synthetic::{emotion_keyed, SyntheticCorpus, SyntheticSpec};
use affectlm::tokenizer::{train_bpe_with, AlphabetChoice, Vocabulary};
use affectlm::train::{run_training, TrainConfig};

fn setup() -> (SyntheticCorpus, Vocabulary, ModelConfig) {
    let corpus = emotion_keyed(&SyntheticSpec { n_conversations: 80, ..SyntheticSpec::default() });
    let registry = EmotionRegistry::new(&corpus.labels).unwrap();
    let vocab = train_bpe_with(&corpus.texts(), 500, &registry.special_tokens(), AlphabetChoice::AllBytes).unwrap();
    let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 16, d_ff: 32, context_len: 48, vocab_size: vocab.vocab_size() };
    (corpus, vocab, cfg)
}

fn examples(corpus: &SyntheticCorpus, vocab: &Vocabulary, ctx: usize) -> (Vec<FormattedExample>, Vec<FormattedExample>) {
    let ex = |s| expand_split(s, Mode::EmoPrepend, vocab, ctx).unwrap().0.into_iter().map(|(_, _, e)| e).collect();
    (ex(&corpus.train), ex(&corpus.valid))
}

#[test]
fn training_lowers_suite_perplexity() {
    let (corpus, vocab, cfg) = setup();
    let (train, valid) = examples(&corpus, &vocab, cfg.context_len);
    let init = TransformerModel::init(cfg, 0).unwrap();
    let tc = TrainConfig { max_steps: 60, warmup_steps: 6, learning_rate: 3e-3, eval_every: 30, ..TrainConfig::default() };
    let trained = run_training(init.clone(), &train, &valid, &tc).unwrap();
    assert_eq!(trained.history.len(), 60);
    assert!(trained.history.iter().filter(|r| r.valid_ppl.is_some()).count() == 2);

    let settings = GenerationSettings { max_new_tokens: 12, ..GenerationSettings::for_vocab(&vocab, 4) };
    let (before, _) = evaluate_suite(&init, &vocab, &corpus.valid, Mode::EmoPrepend, &settings).unwrap();
    let (after, records) = evaluate_suite(trained.model(), &vocab, &corpus.valid, Mode::EmoPrepend, &settings).unwrap();
    assert!(after.valid_ppl < before.valid_ppl);
    assert_eq!(after.n_examples, records.len());
    assert_eq!(records.len(), corpus.valid.conversations.len());
    assert!((0.0..=1.0).contains(&after.bleu));
    assert!((0.0..=1.0).contains(&after.diversity));
    assert!((0.0..=1.0).contains(&after.readability_norm));
}

#[test]
fn generation_is_reproducible_per_seed() {
    let (corpus, vocab, cfg) = setup();
    let model = TransformerModel::init(cfg, 1).unwrap();
    let settings = GenerationSettings { max_new_tokens: 10, ..GenerationSettings::for_vocab(&vocab, 9) };
    let a = generate_split(&model, &vocab, &corpus.test, Mode::FineTuned, &settings).unwrap();
    let b = generate_split(&model, &vocab, &corpus.test, Mode::FineTuned, &settings).unwrap();
    let texts = |r: &[affectlm::metrics::ExampleEval]| r.iter().map(|e| e.generated_text.clone()).collect::<Vec<_>>();
    assert_eq!(texts(&a), texts(&b));
    let other = GenerationSettings { seed: 10, ..settings };
    let c = generate_split(&model, &vocab, &corpus.test, Mode::FineTuned, &other).unwrap();
    assert_ne!(texts(&a), texts(&c));
}
