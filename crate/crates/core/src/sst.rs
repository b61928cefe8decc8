//! Self-training with pseudotranscripts: decode untranscribed audio with the current
//! model, keep some or all hypotheses, pool them with the transcribed set and retrain.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::am::{train_ctc, AcousticModel, ArchConfig, CtcExample, RefModel, TrainConfig, TrainReport};
use crate::corpus::{Lexicon, Manifest, ManifestEntry, TokenSet, UntranscribedUtterance, Utterance};
use crate::ctc::{prefix_beam_search_fused, BeamConfig, PosteriorGrid};
use crate::error::{Error, Result};
use crate::ngram::CharLmScorer;
use crate::score::{corpus_wer, CorpusWer, ScoredPair};
use crate::wfst::{decode_frames, DecodeConfig, Wfst};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    /// Best path, collapsed.
    Greedy,
    /// Prefix beam search with the character LM.
    Fusion,
    /// Viterbi search over the composed token/lexicon/grammar graph.
    CtcWfst,
}

impl DecodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Fusion => "fusion",
            DecodeMode::CtcWfst => "ctc-wfst",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "fusion" => Ok(DecodeMode::Fusion),
            "ctc-wfst" => Ok(DecodeMode::CtcWfst),
            _ => Err(Error::Invalid(format!("unknown decode mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub beam_size: usize,
    pub fusion_weight: f64,
    pub length_bonus: f64,
    pub graph_beam: f64,
    pub acoustic_scale: f64,
    pub max_active: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        let b = BeamConfig::default();
        let g = DecodeConfig::default();
        DecodeParams {
            beam_size: b.beam_size,
            fusion_weight: b.fusion_weight,
            length_bonus: b.length_bonus,
            graph_beam: g.beam,
            acoustic_scale: g.acoustic_scale,
            max_active: g.max_active,
        }
    }
}

impl DecodeParams {
    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam_size,
            fusion_weight: self.fusion_weight,
            length_bonus: self.length_bonus,
        }
    }

    pub fn graph(&self) -> DecodeConfig {
        DecodeConfig {
            beam: self.graph_beam,
            acoustic_scale: self.acoustic_scale,
            max_active: self.max_active,
        }
    }
}

/// Deterministic lexicon segmentation of a character string: longest word first,
/// backtracking when the remainder cannot be segmented.
#[derive(Debug, Clone)]
pub struct Segmenter {
    words: HashMap<Vec<String>, String>,
    max_len: usize,
}

impl Segmenter {
    pub fn new(lexicon: &Lexicon) -> Self {
        let mut words = HashMap::new();
        let mut max_len = 0;
        for (w, spelling) in lexicon.entries() {
            max_len = max_len.max(spelling.len());
            words.entry(spelling.clone()).or_insert_with(|| w.clone());
        }
        Segmenter { words, max_len }
    }

    pub fn segment<S: AsRef<str>>(&self, chars: &[S]) -> Option<Vec<String>> {
        let chars: Vec<String> = chars.iter().map(|c| c.as_ref().to_string()).collect();
        let n = chars.len();
        // next[i]: chosen word length at i on the first successful parse of chars[i..].
        let mut next: Vec<Option<usize>> = vec![None; n + 1];
        next[n] = Some(0);
        for i in (0..n).rev() {
            for len in (1..=self.max_len.min(n - i)).rev() {
                if next[i + len].is_some() && self.words.contains_key(&chars[i..i + len]) {
                    next[i] = Some(len);
                    break;
                }
            }
        }
        next[0]?;
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let len = next[i].unwrap();
            out.push(self.words[&chars[i..i + len]].clone());
            i += len;
        }
        Some(out)
    }

    /// Like `segment`, but unparseable stretches become words of their own.
    pub fn segment_lenient<S: AsRef<str>>(&self, chars: &[S]) -> Vec<String> {
        if let Some(words) = self.segment(chars) {
            return words;
        }
        let chars: Vec<String> = chars.iter().map(|c| c.as_ref().to_string()).collect();
        let n = chars.len();
        let mut out = Vec::new();
        let mut junk = String::new();
        let mut i = 0;
        while i < n {
            let hit = (1..=self.max_len.min(n - i))
                .rev()
                .find(|&len| self.words.contains_key(&chars[i..i + len]));
            match hit {
                Some(len) => {
                    if !junk.is_empty() {
                        out.push(std::mem::take(&mut junk));
                    }
                    out.push(self.words[&chars[i..i + len]].clone());
                    i += len;
                }
                None => {
                    junk.push_str(&chars[i]);
                    i += 1;
                }
            }
        }
        if !junk.is_empty() {
            out.push(junk);
        }
        out
    }
}

/// Everything a decode mode may need. Missing resources fail only the modes that use them.
pub struct Decoder {
    pub tokens: TokenSet,
    pub segmenter: Segmenter,
    pub fusion: Option<CharLmScorer>,
    pub graph: Option<Wfst>,
    pub params: DecodeParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// `None` when the character output does not segment into lexicon words.
    pub words: Option<Vec<String>>,
    /// Lenient segmentation, used for scoring.
    pub scored_words: Vec<String>,
    pub score: f64,
}

impl Decoder {
    pub fn new(lexicon: &Lexicon, fusion: Option<CharLmScorer>, graph: Option<Wfst>, params: DecodeParams) -> Result<Self> {
        Ok(Decoder {
            tokens: TokenSet::from_lexicon(lexicon)?,
            segmenter: Segmenter::new(lexicon),
            fusion,
            graph,
            params,
        })
    }

    fn from_labels(&self, labels: &[usize], score: f64) -> Hypothesis {
        let chars: Vec<&str> = labels.iter().map(|&l| self.tokens.symbol(l)).collect();
        Hypothesis {
            words: self.segmenter.segment(&chars),
            scored_words: self.segmenter.segment_lenient(&chars),
            score,
        }
    }

    /// Checks that `mode` has its resources and that `vocab` matches the token set.
    pub fn ready(&self, mode: DecodeMode, vocab: usize) -> Result<()> {
        if vocab != self.tokens.len() {
            return Err(Error::SymbolMismatch(format!(
                "posteriors have {vocab} columns, token set has {}",
                self.tokens.len()
            )));
        }
        match mode {
            DecodeMode::Fusion if self.fusion.is_none() => {
                Err(Error::Invalid("fusion decoding needs a character LM".into()))
            }
            DecodeMode::CtcWfst if self.graph.is_none() => {
                Err(Error::Invalid("ctc-wfst decoding needs a decoding graph".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn decode(&self, grid: &PosteriorGrid, mode: DecodeMode) -> Result<Hypothesis> {
        self.ready(mode, grid.vocab())?;
        match mode {
            DecodeMode::Greedy => {
                let mut score = 0.0;
                let mut path = Vec::with_capacity(grid.frames());
                for t in 0..grid.frames() {
                    let row = grid.row(t);
                    let (k, v) = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b });
                    score += v;
                    path.push(k);
                }
                Ok(self.from_labels(&crate::ctc::collapse(&path), score))
            }
            DecodeMode::Fusion => {
                let scorer = self.fusion.as_ref().expect("checked by ready");
                let hyps = prefix_beam_search_fused(grid, scorer, self.params.beam());
                let best = hyps
                    .first()
                    .ok_or_else(|| Error::SearchFailed("beam search produced no hypothesis".into()))?;
                Ok(self.from_labels(&best.labels, best.score))
            }
            DecodeMode::CtcWfst => {
                let graph = self.graph.as_ref().expect("checked by ready");
                let r = decode_frames(grid, graph, self.params.graph())?;
                let words: Vec<String> = r
                    .words
                    .iter()
                    .map(|&w| graph.osyms().symbol(w).unwrap_or("<unk>").to_string())
                    .collect();
                Ok(Hypothesis {
                    words: Some(words.clone()),
                    scored_words: words,
                    score: -r.total_cost,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoTranscript {
    pub id: String,
    pub words: Vec<String>,
    pub score: f64,
    pub mode: DecodeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transcription {
    pub pseudo: Vec<PseudoTranscript>,
    pub failed: Vec<TranscriptionFailure>,
}

/// Decodes every utterance in parallel. Failed or unsegmentable utterances are
/// reported and left out.
pub fn transcribe<M: AcousticModel>(
    model: &M,
    utterances: &[UntranscribedUtterance],
    mode: DecodeMode,
    decoder: &Decoder,
) -> Transcription {
    let results: Vec<std::result::Result<PseudoTranscript, TranscriptionFailure>> = utterances
        .par_iter()
        .map(|u| {
            let fail = |reason: String| TranscriptionFailure {
                id: u.id.clone(),
                reason,
            };
            let grid = model.posteriors(&u.features).map_err(|e| fail(e.to_string()))?;
            let hyp = decoder.decode(&grid, mode).map_err(|e| fail(e.to_string()))?;
            let words = hyp
                .words
                .ok_or_else(|| fail("hypothesis does not segment into lexicon words".into()))?;
            if !hyp.score.is_finite() {
                return Err(fail("non-finite decode score".into()));
            }
            Ok(PseudoTranscript {
                id: u.id.clone(),
                words,
                score: hyp.score,
                mode,
            })
        })
        .collect();
    let mut out = Transcription::default();
    for r in results {
        match r {
            Ok(p) => out.pseudo.push(p),
            Err(f) => {
                log::warn!("{}: not transcribed: {}", f.id, f.reason);
                out.failed.push(f);
            }
        }
    }
    out
}

pub fn write_pseudo(pseudo: &[PseudoTranscript], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in pseudo {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pseudo(path: impl AsRef<Path>) -> Result<Vec<PseudoTranscript>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(format!("line {}", i + 1), e.to_string())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum Selection {
    #[default]
    KeepAll,
    Threshold {
        tau: f64,
    },
}

pub fn select(pseudo: Vec<PseudoTranscript>, policy: Selection) -> Vec<PseudoTranscript> {
    match policy {
        Selection::KeepAll => pseudo,
        Selection::Threshold { tau } => {
            let n = pseudo.len();
            let kept: Vec<_> = pseudo.into_iter().filter(|p| p.score >= tau).collect();
            if kept.is_empty() && n > 0 {
                log::warn!("selection threshold {tau} removed all {n} pseudotranscripts");
            }
            kept
        }
    }
}

/// Adds the pseudo-labelled utterances to the supervised manifest as ordinary entries.
/// Feature paths are resolved so the result does not depend on either base directory.
pub fn pool(supervised: &Manifest, pseudo: &[PseudoTranscript], untranscribed: &Manifest) -> Result<Manifest> {
    let by_id: HashMap<&str, &ManifestEntry> = untranscribed.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut entries: Vec<ManifestEntry> = supervised
        .entries
        .iter()
        .map(|e| ManifestEntry {
            feats: supervised.feats_path(e),
            ..e.clone()
        })
        .collect();
    for p in pseudo {
        let e = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::utterance(&p.id, "pseudotranscript for an utterance not in the manifest"))?;
        entries.push(ManifestEntry {
            id: p.id.clone(),
            feats: untranscribed.feats_path(e),
            transcript: Some(p.words.clone()),
            domain: e.domain.clone(),
        });
    }
    Manifest::new(entries, "")
}

/// In-memory counterpart of [`pool`].
pub fn pool_utterances(
    supervised: &[Utterance],
    pseudo: &[PseudoTranscript],
    untranscribed: &[UntranscribedUtterance],
) -> Result<Vec<Utterance>> {
    let by_id: HashMap<&str, &UntranscribedUtterance> = untranscribed.iter().map(|u| (u.id.as_str(), u)).collect();
    let mut out = supervised.to_vec();
    for p in pseudo {
        let u = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::utterance(&p.id, "pseudotranscript for an unknown utterance"))?;
        out.push(Utterance {
            id: p.id.clone(),
            features: u.features.clone(),
            transcript: Some(p.words.clone()),
            domain: u.domain.clone(),
        });
    }
    Ok(out)
}

/// CTC examples from transcribed utterances; words are spelled through the lexicon.
pub fn ctc_examples(utterances: &[Utterance], tokens: &TokenSet, lexicon: &Lexicon) -> Result<Vec<CtcExample>> {
    utterances
        .iter()
        .map(|u| {
            let words = u
                .transcript
                .as_ref()
                .ok_or_else(|| Error::utterance(&u.id, "no transcript"))?;
            Ok(CtcExample {
                id: u.id.clone(),
                features: u.features.clone(),
                target: tokens.encode_words(words, lexicon).map_err(|e| Error::utterance(&u.id, e))?,
            })
        })
        .collect()
}

/// Trains a CTC model from `init`'s hidden layer with a fresh head, or from scratch.
pub fn train_ctc_model(
    init: Option<&RefModel>,
    arch: ArchConfig,
    data: &[CtcExample],
    outputs: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<(RefModel, TrainReport)> {
    let dims = data
        .first()
        .ok_or_else(|| Error::Invalid("CTC training set is empty".into()))?
        .features
        .dims();
    let mut model = match init {
        Some(m) => m.swap_head(outputs, seed)?,
        None => RefModel::new(arch, dims, outputs, seed)?,
    };
    let report = train_ctc(&mut model, data, config)?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub wer: CorpusWer,
    pub hypotheses: Vec<(String, Vec<String>)>,
    pub failed: Vec<TranscriptionFailure>,
}

/// Decodes held-out utterances and scores them. A failed decode scores as an empty hypothesis.
pub fn evaluate<M: AcousticModel>(model: &M, tests: &[Utterance], mode: DecodeMode, decoder: &Decoder) -> Result<Evaluation> {
    decoder.ready(mode, model.num_outputs())?;
    let results: Vec<(Vec<String>, Option<String>)> = tests
        .par_iter()
        .map(|u| {
            let hyp = model
                .posteriors(&u.features)
                .and_then(|g| decoder.decode(&g, mode));
            match hyp {
                Ok(h) => (h.scored_words, None),
                Err(e) => (Vec::new(), Some(e.to_string())),
            }
        })
        .collect();
    let mut pairs: Vec<ScoredPair> = Vec::with_capacity(tests.len());
    let mut hypotheses = Vec::with_capacity(tests.len());
    let mut failed = Vec::new();
    for (u, (hyp, err)) in tests.iter().zip(results) {
        let reference = u
            .transcript
            .clone()
            .ok_or_else(|| Error::utterance(&u.id, "test utterance has no transcript"))?;
        if let Some(reason) = err {
            failed.push(TranscriptionFailure { id: u.id.clone(), reason });
        }
        pairs.push((u.domain.clone(), reference, hyp.clone()));
        hypotheses.push((u.id.clone(), hyp));
    }
    Ok(Evaluation {
        wer: corpus_wer(&pairs),
        hypotheses,
        failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SstConfig {
    pub mode: DecodeMode,
    pub selection: Selection,
    pub iterations: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for SstConfig {
    fn default() -> Self {
        SstConfig {
            mode: DecodeMode::Fusion,
            selection: Selection::KeepAll,
            iterations: 1,
            train: TrainConfig::default(),
            seed: 21,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SstIteration {
    pub model: RefModel,
    pub transcription: Transcription,
    pub selected: usize,
    pub train: TrainReport,
    /// Held-out WER per evaluation mode.
    pub wer: BTreeMap<DecodeMode, CorpusWer>,
}

/// Inputs to [`run_sst`].
pub struct SstData<'a> {
    pub supervised: &'a [Utterance],
    pub untranscribed: &'a [UntranscribedUtterance],
    pub tests: &'a [Utterance],
    pub lexicon: &'a Lexicon,
}

/// Self-training loop. Iteration i transcribes with the model from iteration i−1
/// (the initial model first) and retrains on the pooled set. Every retraining
/// starts from `encoder`'s hidden layer with a fresh head, or from a fresh model
/// built with `arch` when no encoder is given.
pub fn run_sst(
    initial: &RefModel,
    encoder: Option<&RefModel>,
    arch: ArchConfig,
    data: &SstData<'_>,
    decoder: &Decoder,
    eval_modes: &[DecodeMode],
    config: &SstConfig,
) -> Result<Vec<SstIteration>> {
    if config.iterations == 0 {
        return Err(Error::Invalid("SST needs at least one iteration".into()));
    }
    let test_ids: std::collections::HashSet<&str> = data.tests.iter().map(|u| u.id.as_str()).collect();
    if let Some(u) = data.untranscribed.iter().find(|u| test_ids.contains(u.id.as_str())) {
        return Err(Error::utterance(&u.id, "test utterance in the untranscribed set"));
    }
    let mut out: Vec<SstIteration> = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let current = out.last().map_or(initial, |i| &i.model);
        let transcription = transcribe(current, data.untranscribed, config.mode, decoder);
        let selected = select(transcription.pseudo.clone(), config.selection);
        if selected.is_empty() && !data.untranscribed.is_empty() {
            return Err(Error::Invalid(format!(
                "SST iteration {}: no pseudotranscripts survived ({} failed)",
                it + 1,
                transcription.failed.len()
            )));
        }
        let pooled = pool_utterances(data.supervised, &selected, data.untranscribed)?;
        let examples = ctc_examples(&pooled, &decoder.tokens, data.lexicon)?;
        let (model, train) = train_ctc_model(encoder, arch, &examples, decoder.tokens.len(), &config.train, config.seed)?;
        let mut wer = BTreeMap::new();
        for &mode in eval_modes {
            match evaluate(&model, data.tests, mode, decoder) {
                Ok(e) => {
                    wer.insert(mode, e.wer);
                }
                Err(e) => log::warn!("SST iteration {}: {mode} evaluation failed: {e}", it + 1),
            }
        }
        log::info!(
            "SST iteration {}: {} pseudotranscripts, {} failed",
            it + 1,
            selected.len(),
            transcription.failed.len()
        );
        out.push(SstIteration {
            model,
            selected: selected.len(),
            transcription,
            train,
            wer,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> Lexicon {
        Lexicon::new(
            [("ab", "a b"), ("a", "a"), ("ba", "b a"), ("c", "c")]
                .into_iter()
                .map(|(w, s)| (w.to_string(), s.split(' ').map(str::to_string).collect())),
        )
        .unwrap()
    }

    #[test]
    fn segmentation_prefers_long_words_and_backtracks() {
        let s = Segmenter::new(&lexicon());
        assert_eq!(s.segment(&["a", "b", "c"]), Some(vec!["ab".into(), "c".into()]));
        assert_eq!(s.segment(&["a", "b", "a", "c"]), Some(vec!["ab".into(), "a".into(), "c".into()]));
        assert_eq!(s.segment(&["b"]), None);
        assert_eq!(s.segment_lenient(&["b", "b", "c"]), vec!["bb".to_string(), "c".to_string()]);
        assert_eq!(s.segment::<&str>(&[]), Some(vec![]));
    }

    #[test]
    fn backtracking_recovers_a_parse() {
        let lex = Lexicon::new(
            [("xy", "x y"), ("x", "x"), ("yz", "y z")]
                .into_iter()
                .map(|(w, s)| (w.to_string(), s.split(' ').map(str::to_string).collect())),
        )
        .unwrap();
        let s = Segmenter::new(&lex);
        // Longest match "xy" leaves "z"; the parse is "x" + "yz".
        assert_eq!(s.segment(&["x", "y", "z"]), Some(vec!["x".into(), "yz".into()]));
    }

    #[test]
    fn selection_policies() {
        let p = |s: f64| PseudoTranscript {
            id: format!("{s}"),
            words: vec![],
            score: s,
            mode: DecodeMode::Greedy,
        };
        let all = vec![p(-3.0), p(-1.0)];
        assert_eq!(select(all.clone(), Selection::KeepAll), all);
        assert_eq!(select(all.clone(), Selection::Threshold { tau: f64::NEG_INFINITY }), all);
        assert_eq!(select(all.clone(), Selection::Threshold { tau: -2.0 }).len(), 1);
        assert!(select(all, Selection::Threshold { tau: 0.0 }).is_empty());
    }

    #[test]
    fn pseudo_json_shape() {
        let p = PseudoTranscript {
            id: "u1".into(),
            words: vec!["ab".into()],
            score: -1.5,
            mode: DecodeMode::CtcWfst,
        };
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"id":"u1","words":["ab"],"score":-1.5,"mode":"ctc-wfst"}"#
        );
    }
}
