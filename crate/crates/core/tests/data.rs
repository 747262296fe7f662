use proptest::prelude::*;
use s4mt::data::{
    bucket_of, generate, generate_range, make_batches, reverse_source, BatchConfig, BatchMode, LengthBuckets,
    LengthLaw, ParallelCorpus, SentencePair, SyntheticTaskSpec, TaskKind, Vocabulary, BOS, EOS, PAD, SEP,
};
use s4mt::Error;

fn spec(kind: TaskKind) -> SyntheticTaskSpec {
    SyntheticTaskSpec::new(kind, 20, LengthLaw::uniform(1, 12), 7)
}

fn pair(src: &[u32], tgt: &[u32]) -> SentencePair {
    SentencePair {
        src: src.to_vec(),
        tgt: tgt.to_vec(),
    }
}

#[test]
fn task_kinds() {
    for p in generate(&spec(TaskKind::Copy), 50).unwrap().pairs {
        assert_eq!(p.src, p.tgt);
    }
    for p in generate(&spec(TaskKind::ReverseCopy), 50).unwrap().pairs {
        let mut r = p.src.clone();
        r.reverse();
        assert_eq!(r, p.tgt);
    }
    let mut lex = spec(TaskKind::LexiconTranslate);
    lex.identity_lexicon = true;
    for p in generate(&lex, 50).unwrap().pairs {
        assert_eq!(p.src, p.tgt);
    }
}

#[test]
fn lexicon_translate_maps_then_reorders() {
    let mut s = spec(TaskKind::LexiconTranslate);
    s.window = 3;
    let lexicon = s.lexicon();
    let mut sorted = lexicon.clone();
    sorted.sort();
    assert_eq!(sorted, (5..25).collect::<Vec<u32>>());
    for p in generate(&s, 40).unwrap().pairs {
        assert_eq!(p.src.len(), p.tgt.len());
        let mapped: Vec<u32> = p.src.iter().map(|&t| lexicon[t as usize - 5]).collect();
        let mut expect: Vec<u32> = Vec::new();
        for chunk in mapped.chunks(3) {
            expect.extend(chunk.iter().rev().copied());
        }
        assert_eq!(p.tgt, expect);
    }
    let mut tiny = spec(TaskKind::LexiconTranslate);
    tiny.vocab_size = 1;
    assert!(matches!(generate(&tiny, 3), Err(Error::Config(_))));
}

#[test]
fn generation_is_indexed() {
    let s = spec(TaskKind::Copy);
    let all = generate(&s, 30).unwrap();
    let tail = generate_range(&s, 10, 20).unwrap();
    assert_eq!(&all.pairs[10..], &tail.pairs[..]);
    assert_eq!(generate(&s, 30).unwrap(), all);
    assert!(generate(&s, 0).is_err());
    assert!(all.pairs.iter().all(|p| !p.src.is_empty() && p.src.iter().all(|&t| t >= 5)));
}

#[test]
fn long_tail_lengths() {
    let mut s = spec(TaskKind::Copy);
    s.lengths = LengthLaw::uniform(2, 25).with_tail(0.1);
    let c = generate(&s, 2000).unwrap();
    let long = c.pairs.iter().filter(|p| p.src.len() > 25).count();
    assert!(long > 100 && long < 300, "{long}");
    assert!(c.pairs.iter().all(|p| (2..=100).contains(&p.src.len())));
}

#[test]
fn reverse_source_examples() {
    let c = ParallelCorpus {
        pairs: vec![pair(&[5, 6, 7], &[8]), pair(&[9], &[9, 10])],
    };
    let r = reverse_source(&c);
    assert_eq!(r.pairs[0].src, vec![7, 6, 5]);
    assert_eq!(r.pairs[1].src, vec![9]);
    assert_eq!(r.pairs[0].tgt, vec![8]);
    assert_eq!(reverse_source(&r), c);
}

#[test]
fn decoder_only_layout() {
    let c = ParallelCorpus {
        pairs: vec![pair(&[5, 6], &[7, 8, 9]), pair(&[10], &[11])],
    };
    let cfg = BatchConfig {
        max_tokens: 1000,
        mode: BatchMode::DecoderOnly,
    };
    let b = &make_batches(&c, &cfg).unwrap().batches;
    assert_eq!(b.len(), 1);
    let b = &b[0];
    // sorted by length: the short pair first
    assert_eq!(b.indices, vec![1, 0]);
    assert_eq!(b.input.row(0), &[BOS, 10, EOS, SEP, 11]);
    assert_eq!(b.input.row(1), &[BOS, 5, 6, EOS, SEP, 7, 8, 9]);
    let w = b.input.width;
    assert_eq!(&b.target[w..2 * w], &[5, 6, EOS, SEP, 7, 8, 9, EOS]);
    assert_eq!(&b.target[..w], &[10, EOS, SEP, 11, EOS, PAD, PAD, PAD]);
    assert_eq!(b.sep_positions, vec![3, 4]);
    assert_eq!(b.target_tokens(), (3 + 1) + (1 + 1));
    let scored: Vec<u32> = (0..2 * w).filter(|&i| b.loss_mask[i]).map(|i| b.target[i]).collect();
    assert_eq!(scored, vec![11, EOS, 7, 8, 9, EOS]);
    let ae: Vec<u32> = (0..2 * w).filter(|&i| b.ae_mask[i]).map(|i| b.target[i]).collect();
    assert_eq!(ae, vec![10, 5, 6]);
}

#[test]
fn encoder_decoder_layout() {
    let c = ParallelCorpus {
        pairs: vec![pair(&[5, 6], &[7, 8, 9])],
    };
    let cfg = BatchConfig {
        max_tokens: 100,
        mode: BatchMode::EncoderDecoder,
    };
    let b = &make_batches(&c, &cfg).unwrap().batches[0];
    assert_eq!(b.source.as_ref().unwrap().row(0), &[5, 6, EOS]);
    assert_eq!(b.input.row(0), &[BOS, 7, 8, 9]);
    assert_eq!(b.target, vec![7, 8, 9, EOS]);
    assert_eq!(b.target_tokens(), 4);
}

#[test]
fn budget_skip_and_order() {
    let mut s = spec(TaskKind::Copy);
    s.lengths = LengthLaw::uniform(1, 30);
    let c = generate(&s, 300).unwrap();
    for mode in [BatchMode::DecoderOnly, BatchMode::EncoderDecoder] {
        let cfg = BatchConfig { max_tokens: 50, mode };
        let b = make_batches(&c, &cfg).unwrap();
        assert!(b.skipped > 0);
        let kept: usize = b.batches.iter().map(|x| x.rows()).sum();
        assert_eq!(kept + b.skipped, 300);
        for x in &b.batches {
            assert!(x.padded_tokens() <= 50, "{}", x.padded_tokens());
            assert_eq!(x.loss_mask.iter().zip(&x.input.valid_mask()).filter(|(l, v)| **l && !**v).count(), 0);
        }
        assert_eq!(b.epoch_order(3), make_batches(&c, &cfg).unwrap().epoch_order(3));
    }
}

#[test]
fn buckets_follow_table_edges() {
    let b = LengthBuckets::default();
    assert_eq!(bucket_of(&b, 1), 0);
    assert_eq!(bucket_of(&b, 17), 0);
    assert_eq!(bucket_of(&b, 18), 1);
    assert_eq!(bucket_of(&b, 29), 1);
    assert_eq!(bucket_of(&b, 30), 2);
    assert_eq!(bucket_of(&b, 117), 2);
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::synthetic(20);
    vocab.write(&dir.path().join("vocab.txt")).unwrap();
    let back = Vocabulary::read(&dir.path().join("vocab.txt")).unwrap();
    assert_eq!(back, vocab);
    let c = generate(&spec(TaskKind::ReverseCopy), 25).unwrap();
    c.write(dir.path(), "train", &vocab).unwrap();
    assert_eq!(ParallelCorpus::read(dir.path(), "train", &back).unwrap(), c);
}

proptest! {
    #[test]
    fn encode_decode_round_trip(words in prop::collection::vec(0usize..20, 1..30)) {
        let v = Vocabulary::synthetic(20);
        let sentence = words.iter().map(|w| format!("t{w}")).collect::<Vec<_>>().join(" ");
        prop_assert_eq!(v.decode(&v.encode(&sentence)), sentence);
    }

    #[test]
    fn loss_mask_counts_targets_plus_eos(seed in 0u64..500, budget in 40usize..400) {
        let mut s = spec(TaskKind::LexiconTranslate);
        s.seed = seed;
        let c = generate(&s, 40).unwrap();
        for mode in [BatchMode::DecoderOnly, BatchMode::EncoderDecoder] {
            let b = make_batches(&c, &BatchConfig { max_tokens: budget, mode }).unwrap();
            for x in &b.batches {
                let want: usize = x.indices.iter().map(|&i| c.pairs[i].tgt.len() + 1).sum();
                prop_assert_eq!(x.target_tokens(), want);
            }
        }
    }
}
