use proptest::prelude::*;

use s4mt::data::{LengthBuckets, RESERVED};
use s4mt::eval::{
    beam_decode, bucket_report, corpus_bleu, decode_all, greedy_decode, max_decode_len, paired_bootstrap,
    tokenize_13a, BleuStats, DecodeConfig,
};
use s4mt::model::{build_model, DecoderKind, EncoderKind, FrozenModel, ModelConfig};
use s4mt::Error;

#[test]
fn tokenizer_rules() {
    assert_eq!(tokenize_13a("Hello, world!"), ["Hello", ",", "world", "!"]);
    assert_eq!(tokenize_13a("pay 1,000.50 now."), ["pay", "1,000.50", "now", "."]);
    assert_eq!(tokenize_13a("  a\t b  "), ["a", "b"]);
    assert_eq!(tokenize_13a("(x)"), ["(", "x", ")"]);
}

#[test]
fn bleu_hand_oracles() {
    let s = corpus_bleu(&["the cat sat"], &["the cat sat down"]).unwrap();
    assert_eq!(s.precisions[..3], [1.0, 1.0, 1.0]);
    assert_eq!(s.precisions[3], 0.5);
    assert!((s.brevity_penalty - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-15);
    assert!((s.score - 60.25286104785454).abs() < 1e-9, "{}", s.score);

    // p = (4/5, 2/4, 1/(2·3), 1/(4·2))
    let s = corpus_bleu(&["a b c d e"], &["a b x d e"]).unwrap();
    assert!((s.score - 30.21375397356768).abs() < 1e-9, "{}", s.score);
}

#[test]
fn bleu_extremes() {
    let refs = ["a b c d", "e f g h i"];
    assert_eq!(corpus_bleu(&refs, &refs).unwrap().score, 100.0);
    assert_eq!(corpus_bleu(&["", ""], &refs).unwrap().score, 0.0);
    assert!(matches!(corpus_bleu::<&str>(&[], &[]), Err(Error::Argument(_))));
    assert!(matches!(corpus_bleu(&["a"], &["a", "b"]), Err(Error::Argument(_))));
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", ",", "."]), 0..8).prop_map(|v| v.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bleu_in_range_and_order_invariant(
        pairs in prop::collection::vec((sentence(), sentence()), 1..8),
        rot in 0usize..8,
    ) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let s = corpus_bleu(&h, &r).unwrap().score;
        prop_assert!((0.0..=100.0).contains(&s));
        let k = rot % h.len();
        let (mut h2, mut r2) = (h.clone(), r.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        prop_assert_eq!(corpus_bleu(&h2, &r2).unwrap().score, s);
    }

    #[test]
    fn perfect_score_iff_identical_tokens(pairs in prop::collection::vec((sentence(), sentence()), 1..6)) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let same = h.iter().zip(&r).all(|(a, b)| tokenize_13a(a) == tokenize_13a(b));
        let any_nonempty = r.iter().any(|x| !tokenize_13a(x).is_empty());
        let s = corpus_bleu(&h, &r).unwrap().score;
        if same && any_nonempty {
            prop_assert_eq!(s, 100.0);
        }
        if s == 100.0 {
            prop_assert!(same);
        }
    }

    #[test]
    fn bootstrap_p_is_a_probability(
        pairs in prop::collection::vec((sentence(), sentence(), sentence()), 1..6),
        seed in 0u64..1000,
    ) {
        let a: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
        let b: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
        let r: Vec<&str> = pairs.iter().map(|p| p.2.as_str()).collect();
        let res = paired_bootstrap(&a, &b, &r, 100, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&res.p_value));
        prop_assert_eq!(res.significant, res.p_value < 0.05);
    }
}

#[test]
fn sentence_stats_add_up() {
    let mut total = BleuStats::default();
    total.add(&BleuStats::sentence(&["a", "b"], &["a", "b", "c"]));
    total.add(&BleuStats::sentence(&["c"], &["d"]));
    assert_eq!(total.hyp_len, 3);
    assert_eq!(total.ref_len, 4);
    assert_eq!(total.correct[0], 2);
    assert_eq!(total.total[1], 1);
}

#[test]
fn bootstrap_oracles() {
    let refs: Vec<String> = (0..30).map(|i| format!("w{i} x{} y z", i % 7)).collect();
    let empty = vec![String::new(); refs.len()];
    for n in [100, 250] {
        let r = paired_bootstrap(&refs, &empty, &refs, n, 3).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert!(r.significant);
        assert_eq!(r.resamples, n);
    }
    let r = paired_bootstrap(&refs, &refs, &refs, 100, 3).unwrap();
    assert_eq!(r.p_value, 0.5);
    assert!(!r.significant);
    assert!(matches!(paired_bootstrap(&refs, &refs, &refs, 99, 0), Err(Error::Argument(_))));
    assert!(matches!(
        paired_bootstrap(&refs[..3], &refs, &refs, 100, 0),
        Err(Error::Argument(_))
    ));
    let a = paired_bootstrap(&refs, &empty, &empty, 200, 9).unwrap();
    assert_eq!(a, paired_bootstrap(&refs, &empty, &empty, 200, 9).unwrap());
}

#[test]
fn bucket_report_shape() {
    let hyps = ["a b", "a b c", "x"];
    let refs = ["a b", "a b d", "y"];
    let single = bucket_report(&hyps, &refs, &[2, 3, 40], &LengthBuckets::new(vec![]).unwrap(), DecodeConfig::default())
        .unwrap();
    assert_eq!(single.buckets.len(), 1);
    assert_eq!(single.buckets[0].bleu, Some(single.overall));
    assert_eq!(single.buckets[0].range, "[1,40]");

    let lengths = [2, 20, 40];
    let r = bucket_report(&hyps, &refs, &lengths, &LengthBuckets::new(vec![18, 30]).unwrap(), DecodeConfig::default())
        .unwrap();
    let ranges: Vec<&str> = r.buckets.iter().map(|b| b.range.as_str()).collect();
    assert_eq!(ranges, ["[1,17]", "[18,29]", "[30,40]"]);
    assert_eq!(r.buckets.iter().map(|b| b.count).sum::<usize>(), 3);

    let r = bucket_report(&hyps[..1], &refs[..1], &[2], &LengthBuckets::new(vec![18]).unwrap(), DecodeConfig::default())
        .unwrap();
    assert_eq!(r.buckets[1].count, 0);
    assert_eq!(r.buckets[1].bleu, None);
    let json = serde_json::to_value(&r).unwrap();
    assert!(json["buckets"][1]["bleu"].is_null());
    assert_eq!(json["decode"]["beam"], 4);
}

fn tiny(enc: EncoderKind, dec: DecoderKind) -> ModelConfig {
    ModelConfig::new(enc, dec, 10 + RESERVED)
        .layers(if enc == EncoderKind::None { 0 } else { 1 }, 1)
        .blocks(1)
        .width(16, 32, 2)
        .state(4)
}

const ARCHS: [(EncoderKind, DecoderKind); 4] = [
    (EncoderKind::None, DecoderKind::S4),
    (EncoderKind::Transformer, DecoderKind::Transformer),
    (EncoderKind::Transformer, DecoderKind::S4a),
    (EncoderKind::S4, DecoderKind::S4),
];

fn sources(n: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|i| (0..1 + i % 6).map(|j| (RESERVED + (i * 7 + j * 3) % 10) as u32).collect())
        .collect()
}

#[test]
fn beam_one_is_greedy() {
    for (e, d) in ARCHS {
        let model = build_model(&tiny(e, d), 11).unwrap();
        let frozen = FrozenModel::new(&model).unwrap();
        for src in sources(6) {
            let max = max_decode_len(src.len());
            let g = greedy_decode(&frozen, &src, max).unwrap();
            let b = beam_decode(&frozen, &src, &DecodeConfig { beam: 1, alpha: 0.6 }, max).unwrap();
            assert_eq!(g, b.tokens, "{e:?}-{d:?}");
            assert!(g.len() <= max);
        }
    }
}

#[test]
fn beam_zero_is_rejected() {
    let model = build_model(&tiny(EncoderKind::None, DecoderKind::S4), 1).unwrap();
    let frozen = FrozenModel::new(&model).unwrap();
    let cfg = DecodeConfig { beam: 0, alpha: 0.6 };
    assert!(matches!(beam_decode(&frozen, &[6], &cfg, 5), Err(Error::Argument(_))));
    assert!(matches!(decode_all(&frozen, &[vec![6]], &cfg, 1), Err(Error::Argument(_))));
}

#[test]
fn wider_beams_usually_score_higher() {
    let model = build_model(&tiny(EncoderKind::Transformer, DecoderKind::Transformer), 5).unwrap();
    let frozen = FrozenModel::new(&model).unwrap();
    let srcs = sources(30);
    let mut better = 0;
    for src in &srcs {
        let max = max_decode_len(src.len());
        let one = beam_decode(&frozen, src, &DecodeConfig { beam: 1, alpha: 0.6 }, max).unwrap();
        let four = beam_decode(&frozen, src, &DecodeConfig { beam: 4, alpha: 0.6 }, max).unwrap();
        better += (four.normalized >= one.normalized - 1e-9) as usize;
    }
    assert!(better * 10 >= srcs.len() * 9, "{better}/{}", srcs.len());
}

#[test]
fn decoding_ignores_thread_count() {
    let model = build_model(&tiny(EncoderKind::S4, DecoderKind::S4), 3).unwrap();
    let frozen = FrozenModel::new(&model).unwrap();
    let srcs = sources(12);
    let cfg = DecodeConfig::default();
    let a = decode_all(&frozen, &srcs, &cfg, 1).unwrap();
    let b = decode_all(&frozen, &srcs, &cfg, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), srcs.len());
}
