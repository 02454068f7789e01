use super::*;
use crate::model::ModelConfig;
use proptest::prelude::*;

fn toks(s: &str) -> Vec<String> {
    words(s)
}

#[test]
fn bleu_perfect_match() {
    let c = vec![toks("the cat sat on the mat"), toks("a b c d e")];
    assert!((bleu(&c, &c).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn bleu2_hand_counted() {
    // p1 = 3/4, p2 = 2/3, BP = 1 (c = r = 4)
    let v = bleu_weighted(&[toks("a b c d")], &[toks("a b c e")], &[0.5, 0.5]).unwrap();
    assert!((v - 0.5f64.sqrt()).abs() < 1e-9);
}

#[test]
fn bleu_clips_repeated_words() {
    let v = bleu_weighted(&[toks("the the the the")], &[toks("the cat")], &[1.0]).unwrap();
    assert!((v - 0.25).abs() < 1e-12, "{v}");
}

#[test]
fn bleu_brevity_penalty() {
    // c = 2, r = 4: all unigrams match, BP = exp(1 - 2)
    let v = bleu_weighted(&[toks("a b")], &[toks("a b c d")], &[1.0]).unwrap();
    assert!((v - (-1.0f64).exp()).abs() < 1e-12);
}

#[test]
fn bleu_errors() {
    let empty: Vec<Vec<String>> = vec![];
    assert!(matches!(bleu(&empty, &empty), Err(MetricsError::NoExamples)));
    assert!(matches!(bleu(&[toks("a")], &[vec![]]), Err(MetricsError::EmptyReference(0))));
    assert!(matches!(bleu(&[toks("a")], &[toks("a"), toks("b")]), Err(MetricsError::LengthMismatch { .. })));
    assert_eq!(bleu(&[vec![]], &[toks("a b")]).unwrap(), 0.0);
}

#[test]
fn diversity_and_length() {
    assert_eq!(diversity(&[vec!["x"; 4]]).unwrap(), 0.25);
    assert_eq!(diversity(&[vec![1, 2], vec![3, 4, 5]]).unwrap(), 1.0);
    assert!(matches!(diversity::<u32>(&[vec![], vec![]]), Err(MetricsError::EmptyGenerations)));
    assert_eq!(avg_length(&[vec![0; 2], vec![0; 4]]).unwrap(), 3.0);
    assert_eq!(avg_length(&[vec![0; 7]]).unwrap(), 7.0);
}

#[test]
fn syllable_heuristic() {
    for (w, n) in [
        ("the", 1),
        ("cat", 1),
        ("table", 2),
        ("make", 1),
        ("free", 1),
        ("rhythm", 1),
        ("happy", 2),
        ("beautiful", 3),
        ("ale", 1),
        ("I", 1),
        ("Hello!", 2),
    ] {
        assert_eq!(count_syllables(w), n, "{w}");
    }
}

#[test]
fn fre_cat_sentence() {
    let s = text_statistics("The cat sat on the mat.");
    assert_eq!((s.words, s.sentences, s.syllables), (6, 1, 6));
    let fre = flesch_reading_ease("The cat sat on the mat.").unwrap();
    assert!((fre - 116.145).abs() < 1e-9);
    assert!((normalize_readability(fre) - 1.0).abs() < 1e-12);
    assert!(matches!(flesch_reading_ease("... 42 !"), Err(MetricsError::NoWords)));
}

#[test]
fn sentence_counting() {
    assert_eq!(text_statistics("Wow!!! Really? yes").sentences, 3);
    assert_eq!(text_statistics("no terminator here").sentences, 1);
    assert_eq!(text_statistics("Ends. ").sentences, 1);
}

#[test]
fn coherence_identity_and_antipode() {
    // Row 1 is the negation of row 0.
    let emb = vec![1.0, 2.0, -1.0, -2.0, 0.5, 0.0];
    assert!((coherence_from_embeddings(&emb, 2, &[0, 2], &[0, 2]).unwrap() - 1.0).abs() < 1e-12);
    assert!((coherence_from_embeddings(&emb, 2, &[0], &[1]).unwrap() + 1.0).abs() < 1e-12);
    assert!(matches!(coherence_from_embeddings(&emb, 2, &[], &[1]), Err(MetricsError::NoTokens)));
}

fn uniform_model(vocab: usize) -> TransformerModel {
    let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, context_len: 8, vocab_size: vocab };
    let mut m = TransformerModel::init(cfg, 1).unwrap();
    m.tensor_mut("lnf.g").unwrap().fill(0.0);
    m.tensor_mut("lnf.b").unwrap().fill(0.0);
    m
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let m = uniform_model(100);
    let exs = vec![
        FormattedExample::plain(vec![1, 2, 3, 4]),
        FormattedExample { loss_mask: vec![false, false, true], ..FormattedExample::plain(vec![9, 8, 7]) },
    ];
    let ppl = perplexity(&m, &exs).unwrap();
    assert!((ppl - 100.0).abs() < 1e-6, "{ppl}");
    assert!((perplexity_all_tokens(&m, &exs).unwrap() - 100.0).abs() < 1e-6);
    assert!(matches!(perplexity(&m, &[]), Err(MetricsError::NoExamples)));
    let unsupervised = FormattedExample { loss_mask: vec![false; 3], ..FormattedExample::plain(vec![1, 2, 3]) };
    assert!(matches!(perplexity(&m, &[unsupervised]), Err(MetricsError::NoMaskedTokens)));
}

#[test]
fn perplexity_is_exp_mean_nll() {
    let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, context_len: 8, vocab_size: 30 };
    let m = TransformerModel::init(cfg, 4).unwrap();
    let exs = vec![FormattedExample::plain(vec![1, 5, 9, 2]), FormattedExample::plain(vec![3, 3, 7])];
    let mut nll = 0.0;
    let mut n = 0;
    for ex in &exs {
        let (l, c) = m.masked_nll(ex).unwrap();
        nll += l;
        n += c;
    }
    assert!((perplexity(&m, &exs).unwrap() - (nll / n as f64).exp()).abs() < 1e-9);
}

fn word_seq() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 4..12)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn bleu_bounded_and_order_invariant(pairs in prop::collection::vec((word_seq(), word_seq()), 1..6)) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let v = bleu(&c, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let (rc, rr): (Vec<_>, Vec<_>) = pairs.iter().rev().cloned().unzip();
        prop_assert!((bleu(&rc, &rr).unwrap() - v).abs() < 1e-12);
        prop_assert!((bleu(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_bounds(gens in prop::collection::vec(prop::collection::vec(0u8..20, 0..10), 1..6)) {
        let total: usize = gens.iter().map(Vec::len).sum();
        prop_assume!(total > 0);
        let d = diversity(&gens).unwrap();
        prop_assert!(d >= 1.0 / total as f64 - 1e-15 && d <= 1.0);
    }

    #[test]
    fn fre_invariant_under_duplication(ks in prop::collection::vec(1usize..5, 1..8)) {
        let sentence: String = ks.iter().map(|&k| "ba".repeat(k)).collect::<Vec<_>>().join(" ") + ".";
        let doubled = format!("{sentence} {sentence}");
        let a = flesch_reading_ease(&sentence).unwrap();
        let b = flesch_reading_ease(&doubled).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn fre_decreases_with_syllables(ks in prop::collection::vec(1usize..5, 1..8), which in any::<prop::sample::Index>()) {
        let make = |ks: &[usize]| ks.iter().map(|&k| "ba".repeat(k)).collect::<Vec<_>>().join(" ") + ".";
        let mut more = ks.clone();
        more[which.index(ks.len())] += 1;
        prop_assert!(flesch_reading_ease(&make(&more)).unwrap() < flesch_reading_ease(&make(&ks)).unwrap());
    }

    #[test]
    fn coherence_symmetric_and_scale_invariant(
        emb in prop::collection::vec(-1.0f64..1.0, 24),
        a in prop::collection::vec(0u32..6, 1..5),
        b in prop::collection::vec(0u32..6, 1..5),
        scale in 0.1f64..10.0,
    ) {
        let ab = coherence_from_embeddings(&emb, 4, &a, &b).unwrap();
        let ba = coherence_from_embeddings(&emb, 4, &b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        let scaled: Vec<f64> = emb.iter().map(|x| x * scale).collect();
        let s = coherence_from_embeddings(&scaled, 4, &a, &b).unwrap();
        prop_assert!((s - ab).abs() < 1e-9);
    }
}
