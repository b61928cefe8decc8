mod common;

use asrkit::am::{AcousticModel, ArchConfig, Embedding, TrainConfig};
use asrkit::corpus::{synthesize_corpus, FeatureMatrix, Lexicon, SynthSpec, TokenSet, UntranscribedUtterance, Utterance};
use asrkit::ctc::PosteriorGrid;
use asrkit::ngram::{char_sentences, train_lm, CharLmScorer};
use asrkit::sst::{
    ctc_examples, evaluate, pool_utterances, read_pseudo, run_sst, select, train_ctc_model, transcribe, write_pseudo,
    DecodeMode, DecodeParams, Decoder, PseudoTranscript, Selection, SstConfig, SstData,
};
use asrkit::wfst::build_tlg_from;
use asrkit::{Error, Result};
use common::*;

/// Features are read back as log posteriors.
struct Replay {
    vocab: usize,
}

impl AcousticModel for Replay {
    fn posteriors(&self, features: &FeatureMatrix) -> Result<PosteriorGrid> {
        PosteriorGrid::from_features(features)
    }

    fn embed(&self, _: &FeatureMatrix) -> Result<Embedding> {
        Err(Error::Invalid("replay model has no embedding".into()))
    }

    fn embed_dim(&self) -> usize {
        0
    }

    fn num_outputs(&self) -> usize {
        self.vocab
    }
}

fn lexicon() -> Lexicon {
    spelled_lexicon(&["ab", "ba", "c"])
}

/// Near-one-hot posteriors following `path` (token ids).
fn sharp(path: &[usize], vocab: usize) -> FeatureMatrix {
    let mut v = Vec::new();
    for &k in path {
        for j in 0..vocab {
            v.push(if j == k { (0.97f32).ln() } else { (0.03f32 / (vocab - 1) as f32).ln() });
        }
    }
    FeatureMatrix::new(path.len(), vocab, v).unwrap()
}

fn utt(id: &str, path: &[usize], vocab: usize) -> UntranscribedUtterance {
    UntranscribedUtterance {
        id: id.into(),
        features: sharp(path, vocab),
        domain: "A".into(),
    }
}

fn decoder(lex: &Lexicon) -> Decoder {
    let text: Vec<Vec<String>> = vec![
        vec!["ab".into(), "c".into()],
        vec!["ba".into(), "ab".into()],
        vec!["c".into()],
    ];
    let char_lm = train_lm(&char_sentences(&text, lex).unwrap(), 2).unwrap();
    let tokens = TokenSet::from_lexicon(lex).unwrap();
    let fusion = CharLmScorer::new(char_lm, &tokens).unwrap();
    let graph = build_tlg_from(lex, &train_lm(&text, 2).unwrap()).unwrap();
    Decoder::new(lex, Some(fusion), Some(graph), DecodeParams::default()).unwrap()
}

#[test]
fn unambiguous_utterances_transcribe_exactly_in_every_mode() {
    let lex = lexicon();
    let dec = decoder(&lex);
    let v = dec.tokens.len();
    let (a, b, c) = (dec.tokens.id("a").unwrap(), dec.tokens.id("b").unwrap(), dec.tokens.id("c").unwrap());
    let utts = vec![
        utt("u1", &[a, a, b, 0, c, c], v),
        utt("u2", &[b, a, 0, a, b, b], v),
    ];
    let model = Replay { vocab: v };
    for mode in [DecodeMode::Greedy, DecodeMode::Fusion, DecodeMode::CtcWfst] {
        let t = transcribe(&model, &utts, mode, &dec);
        assert!(t.failed.is_empty(), "{mode}: {:?}", t.failed);
        assert_eq!(t.pseudo[0].words, vec!["ab", "c"], "{mode}");
        assert_eq!(t.pseudo[1].words, vec!["ba", "ab"], "{mode}");
        assert!(t.pseudo.iter().all(|p| p.mode == mode && p.score.is_finite()));
    }
}

#[test]
fn unparseable_hypotheses_are_flagged() {
    let lex = lexicon();
    let dec = decoder(&lex);
    let v = dec.tokens.len();
    let (a, c) = (dec.tokens.id("a").unwrap(), dec.tokens.id("c").unwrap());
    let utts = vec![utt("bad", &[a, a, 0, a], v), utt("ok", &[c], v)];
    let t = transcribe(&Replay { vocab: v }, &utts, DecodeMode::Greedy, &dec);
    assert_eq!(t.failed.len(), 1);
    assert_eq!(t.failed[0].id, "bad");
    assert_eq!(t.pseudo.len(), 1);
    // ctc-wfst always emits lexicon words.
    let t = transcribe(&Replay { vocab: v }, &utts, DecodeMode::CtcWfst, &dec);
    assert!(t.failed.is_empty());
}

#[test]
fn missing_resources_fail_only_their_mode() {
    let lex = lexicon();
    let dec = Decoder::new(&lex, None, None, DecodeParams::default()).unwrap();
    let v = dec.tokens.len();
    let model = Replay { vocab: v };
    let test = vec![Utterance {
        id: "t".into(),
        features: sharp(&[dec.tokens.id("c").unwrap()], v),
        transcript: Some(vec!["c".into()]),
        domain: "A".into(),
    }];
    assert!(evaluate(&model, &test, DecodeMode::Greedy, &dec).is_ok());
    assert!(evaluate(&model, &test, DecodeMode::Fusion, &dec).is_err());
    assert!(evaluate(&model, &test, DecodeMode::CtcWfst, &dec).is_err());
    assert!(evaluate(&Replay { vocab: v + 1 }, &test, DecodeMode::Greedy, &dec).is_err());
}

fn pseudo(id: &str, score: f64) -> PseudoTranscript {
    PseudoTranscript {
        id: id.into(),
        words: vec!["c".into()],
        score,
        mode: DecodeMode::Greedy,
    }
}

#[test]
fn selection_and_pseudo_files() {
    let all = vec![pseudo("a", -1.0), pseudo("b", -5.0)];
    assert_eq!(select(all.clone(), Selection::Threshold { tau: f64::NEG_INFINITY }), all);
    let above = all.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max) + 1e-9;
    assert!(select(all.clone(), Selection::Threshold { tau: above }).is_empty());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.jsonl");
    write_pseudo(&all, &p).unwrap();
    assert_eq!(read_pseudo(&p).unwrap(), all);
}

fn tiny() -> asrkit::corpus::SynthCorpus {
    synthesize_corpus(&SynthSpec {
        n_supervised: 16,
        n_untranscribed: 12,
        n_test: 6,
        n_text: 200,
        ..SynthSpec::default()
    })
    .unwrap()
}

#[test]
fn pooling_is_supervision_blind() {
    let corpus = tiny();
    let tokens = TokenSet::from_lexicon(&corpus.lexicon).unwrap();
    let truth: Vec<Utterance> = corpus.tests["A"].iter().take(4).cloned().collect();
    let as_audio: Vec<UntranscribedUtterance> = truth.iter().cloned().map(Utterance::into_untranscribed).collect();
    let as_pseudo: Vec<PseudoTranscript> = truth
        .iter()
        .map(|u| PseudoTranscript {
            id: u.id.clone(),
            words: u.transcript.clone().unwrap(),
            score: 0.0,
            mode: DecodeMode::Greedy,
        })
        .collect();
    let sup = &corpus.supervised;
    let pooled = pool_utterances(sup, &as_pseudo, &as_audio).unwrap();
    assert_eq!(pooled.len(), sup.len() + truth.len());
    let direct: Vec<Utterance> = sup.iter().chain(&truth).cloned().collect();
    assert_eq!(pooled, direct);
    assert_eq!(pool_utterances(sup, &[], &as_audio).unwrap(), sup.to_vec());

    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let train = |u: &[Utterance]| {
        let data = ctc_examples(u, &tokens, &corpus.lexicon).unwrap();
        train_ctc_model(None, ArchConfig::default(), &data, tokens.len(), &cfg, 4).unwrap().0
    };
    assert_eq!(train(&pooled), train(&direct));
}

#[test]
fn sst_loop_is_reproducible_and_refuses_leaks() {
    let corpus = tiny();
    let lex = &corpus.lexicon;
    let tokens = TokenSet::from_lexicon(lex).unwrap();
    let data_sup = ctc_examples(&corpus.supervised, &tokens, lex).unwrap();
    let cfg_train = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let (initial, _) = train_ctc_model(None, ArchConfig::default(), &data_sup, tokens.len(), &cfg_train, 1).unwrap();
    let dec = Decoder::new(lex, None, Some(build_tlg_from(lex, &train_lm(&corpus.text, 2).unwrap()).unwrap()), DecodeParams::default()).unwrap();
    let tests: Vec<Utterance> = corpus.tests.values().flatten().cloned().collect();
    let data = SstData {
        supervised: &corpus.supervised,
        untranscribed: &corpus.untranscribed,
        tests: &tests,
        lexicon: lex,
    };
    let cfg = SstConfig {
        mode: DecodeMode::CtcWfst,
        iterations: 2,
        train: cfg_train,
        ..SstConfig::default()
    };
    let modes = [DecodeMode::Greedy, DecodeMode::CtcWfst];
    let a = run_sst(&initial, None, ArchConfig::default(), &data, &dec, &modes, &cfg).unwrap();
    let b = run_sst(&initial, None, ArchConfig::default(), &data, &dec, &modes, &cfg).unwrap();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.model, y.model);
        assert_eq!(x.wer, y.wer);
        assert_eq!(x.wer.len(), 2);
    }

    let leaked: Vec<UntranscribedUtterance> = tests.iter().take(1).cloned().map(Utterance::into_untranscribed).collect();
    let bad = SstData { untranscribed: &leaked, ..data };
    assert!(run_sst(&initial, None, ArchConfig::default(), &bad, &dec, &modes, &cfg).is_err());
}

#[test]
fn empty_untranscribed_set_reduces_to_supervised_training() {
    let corpus = tiny();
    let lex = &corpus.lexicon;
    let tokens = TokenSet::from_lexicon(lex).unwrap();
    let data_sup = ctc_examples(&corpus.supervised, &tokens, lex).unwrap();
    let cfg_train = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let (initial, _) = train_ctc_model(None, ArchConfig::default(), &data_sup, tokens.len(), &cfg_train, 1).unwrap();
    let dec = Decoder::new(lex, None, None, DecodeParams::default()).unwrap();
    let data = SstData {
        supervised: &corpus.supervised,
        untranscribed: &[],
        tests: &[],
        lexicon: lex,
    };
    let cfg = SstConfig {
        mode: DecodeMode::Greedy,
        train: cfg_train.clone(),
        ..SstConfig::default()
    };
    let its = run_sst(&initial, None, ArchConfig::default(), &data, &dec, &[], &cfg).unwrap();
    let (direct, _) = train_ctc_model(None, ArchConfig::default(), &data_sup, tokens.len(), &cfg_train, cfg.seed).unwrap();
    assert_eq!(its[0].selected, 0);
    assert_eq!(its[0].model, direct);
}
