//! Witten-Bell backoff n-gram language models (order 1 to 3), ARPA interchange and
//! the character-level fusion scorer used by prefix beam search.
//!
//! Probabilities are kept as natural logs internally; ARPA files carry log10.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::hash::Hash;
use std::path::Path;

use crate::corpus::{Lexicon, TokenSet};
use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

const LN_10: f64 = std::f64::consts::LN_10;
const ARPA_NEG_INF: f64 = -99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    log_prob: f64,
    backoff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackoffLm {
    order: usize,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    bos: u32,
    eos: u32,
    unk: Option<u32>,
    /// `ngrams[n - 1]` holds the n-grams keyed by their token ids.
    ngrams: Vec<HashMap<Vec<u32>, Entry>>,
}

fn check_order(order: usize) -> Result<()> {
    if !(1..=3).contains(&order) {
        return Err(Error::Invalid(format!("LM order must be 1..=3, got {order}")));
    }
    Ok(())
}

fn build_vocab<'a>(words: impl Iterator<Item = &'a str>) -> (Vec<String>, HashMap<String, u32>) {
    let mut vocab = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
    let mut rest: Vec<&str> = words.filter(|w| ![BOS, EOS, UNK].contains(w)).collect();
    rest.sort_unstable();
    rest.dedup();
    vocab.extend(rest.into_iter().map(str::to_string));
    let index = vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i as u32))
        .collect();
    (vocab, index)
}

impl BackoffLm {
    /// Trains an interpolated Witten-Bell model. Empty sentences are legal and only
    /// contribute end-of-sentence events.
    pub fn train<S: AsRef<str>>(corpus: &[Vec<S>], order: usize) -> Result<Self> {
        check_order(order)?;
        if corpus.is_empty() {
            return Err(Error::Invalid("cannot train an LM on an empty corpus".into()));
        }
        let (vocab, index) = build_vocab(corpus.iter().flatten().map(AsRef::as_ref));
        let (bos, eos, unk) = (0u32, 1u32, 2u32);

        let mut counts: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
        for sentence in corpus {
            let mut toks = Vec::with_capacity(sentence.len() + 2);
            toks.push(bos);
            toks.extend(sentence.iter().map(|w| index[w.as_ref()]));
            toks.push(eos);
            for i in 1..toks.len() {
                for n in 1..=order.min(i + 1) {
                    *counts[n - 1].entry(toks[i + 1 - n..=i].to_vec()).or_insert(0) += 1;
                }
            }
        }

        let mut lm = BackoffLm {
            order,
            vocab,
            index,
            bos,
            eos,
            unk: Some(unk),
            ngrams: vec![HashMap::new(); order],
        };

        // Unigrams: interpolate with a uniform distribution over predictable tokens.
        let predictable = (lm.vocab.len() - 1) as f64;
        let total: u64 = counts[0].values().sum();
        let types = counts[0].len() as f64;
        let denom = total as f64 + types;
        for id in 0..lm.vocab.len() as u32 {
            let log_prob = if id == bos {
                f64::NEG_INFINITY
            } else {
                let c = counts[0].get(&vec![id]).copied().unwrap_or(0) as f64;
                ((c + types / predictable) / denom).ln()
            };
            lm.ngrams[0].insert(
                vec![id],
                Entry {
                    log_prob,
                    backoff: None,
                },
            );
        }

        for n in 2..=order {
            let mut by_context: BTreeMap<Vec<u32>, Vec<(u32, u64)>> = BTreeMap::new();
            for (gram, &c) in &counts[n - 1] {
                by_context
                    .entry(gram[..n - 1].to_vec())
                    .or_default()
                    .push((gram[n - 1], c));
            }
            let mut level = HashMap::new();
            for (ctx, mut next) in by_context {
                next.sort_unstable();
                let seen: u64 = next.iter().map(|&(_, c)| c).sum();
                let distinct = next.len() as f64;
                let denom = seen as f64 + distinct;
                for (w, c) in next {
                    let lower = lm.log_prob_ids(&ctx[1..], w).exp();
                    let p = (c as f64 + distinct * lower) / denom;
                    let mut key = ctx.clone();
                    key.push(w);
                    level.insert(
                        key,
                        Entry {
                            log_prob: p.ln(),
                            backoff: None,
                        },
                    );
                }
                let bow = (distinct / denom).ln();
                lm.ngrams[n - 2]
                    .get_mut(&ctx)
                    .expect("every context is a lower-order n-gram")
                    .backoff = Some(bow);
            }
            lm.ngrams[n - 1] = level;
        }
        Ok(lm)
    }

    /// Uniform unigram model over `words` plus end-of-sentence and unknown tokens.
    pub fn uniform<S: AsRef<str>>(words: &[S]) -> Self {
        let (vocab, index) = build_vocab(words.iter().map(AsRef::as_ref));
        let predictable = (vocab.len() - 1) as f64;
        let mut unigrams = HashMap::new();
        for id in 0..vocab.len() as u32 {
            let log_prob = if id == 0 {
                f64::NEG_INFINITY
            } else {
                -predictable.ln()
            };
            unigrams.insert(
                vec![id],
                Entry {
                    log_prob,
                    backoff: None,
                },
            );
        }
        BackoffLm {
            order: 1,
            vocab,
            index,
            bos: 0,
            eos: 1,
            unk: Some(2),
            ngrams: vec![unigrams],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Tokens that can be predicted: the whole vocabulary minus sentence-begin.
    pub fn predictable_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.vocab.len() as u32).filter(move |&i| i != self.bos)
    }

    pub fn bos_id(&self) -> u32 {
        self.bos
    }

    pub fn eos_id(&self) -> u32 {
        self.eos
    }

    pub fn unk_id(&self) -> Option<u32> {
        self.unk
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Vocabulary id, mapping unknown words to the unknown token.
    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied().or(self.unk)
    }

    pub fn symbol(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    /// Number of stored n-grams of order `n`.
    pub fn ngram_count(&self, n: usize) -> usize {
        self.ngrams.get(n.wrapping_sub(1)).map_or(0, HashMap::len)
    }

    /// Stored n-grams of order `n` as (ids, ln p, ln backoff), sorted by ids.
    pub fn ngrams(&self, n: usize) -> Vec<(Vec<u32>, f64, Option<f64>)> {
        let mut out: Vec<_> = self.ngrams[n - 1]
            .iter()
            .map(|(k, e)| (k.clone(), e.log_prob, e.backoff))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Explicit entry for an n-gram, if stored: (ln p, ln backoff).
    pub fn entry(&self, gram: &[u32]) -> Option<(f64, Option<f64>)> {
        self.ngrams
            .get(gram.len().checked_sub(1)?)?
            .get(gram)
            .map(|e| (e.log_prob, e.backoff))
    }

    /// ln backoff weight of a context; 0 when the context is not stored.
    pub fn backoff_ids(&self, context: &[u32]) -> f64 {
        if context.is_empty() || context.len() >= self.order {
            return 0.0;
        }
        self.ngrams[context.len() - 1]
            .get(context)
            .and_then(|e| e.backoff)
            .unwrap_or(0.0)
    }

    /// Natural-log probability through the backoff recursion.
    pub fn log_prob_ids(&self, history: &[u32], word: u32) -> f64 {
        let keep = self.order - 1;
        let h = &history[history.len().saturating_sub(keep)..];
        let mut bow = 0.0;
        let mut key = Vec::with_capacity(h.len() + 1);
        for start in 0..=h.len() {
            let ctx = &h[start..];
            key.clear();
            key.extend_from_slice(ctx);
            key.push(word);
            if let Some(e) = self.ngrams[ctx.len()].get(&key) {
                return bow + e.log_prob;
            }
            bow += self.backoff_ids(ctx);
        }
        f64::NEG_INFINITY
    }

    fn ids(&self, words: &[&str]) -> Vec<u32> {
        words
            .iter()
            .map(|w| self.id(w).unwrap_or(u32::MAX))
            .collect()
    }

    /// Natural-log probability of `word` after `history`.
    pub fn log_prob(&self, history: &[&str], word: &str) -> f64 {
        let h = self.ids(history);
        match self.id(word) {
            Some(w) if !h.contains(&u32::MAX) => self.log_prob_ids(&h, w),
            _ => f64::NEG_INFINITY,
        }
    }

    /// Natural-log sentence probability, conditioned on sentence-begin and including
    /// the end-of-sentence event.
    pub fn sentence_log_prob<S: AsRef<str>>(&self, words: &[S]) -> f64 {
        let mut hist = vec![self.bos];
        let mut total = 0.0;
        for w in words {
            let Some(id) = self.id(w.as_ref()) else {
                return f64::NEG_INFINITY;
            };
            total += self.log_prob_ids(&hist, id);
            hist.push(id);
        }
        total + self.log_prob_ids(&hist, self.eos)
    }

    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for n in 1..=self.order {
            let _ = writeln!(out, "ngram {n}={}", self.ngram_count(n));
        }
        for n in 1..=self.order {
            let _ = write!(out, "\n\\{n}-grams:\n");
            for (gram, lp, bow) in self.ngrams(n) {
                let words: Vec<&str> = gram.iter().map(|&i| self.symbol(i)).collect();
                let _ = write!(out, "{:.7}\t{}", to_log10(lp), words.join(" "));
                if let Some(b) = bow {
                    let _ = write!(out, "\t{:.7}", to_log10(b));
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn parse_arpa(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut declared: Vec<usize> = Vec::new();
        for (lineno, line) in lines.by_ref() {
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                break;
            }
            return Err(Error::format(format!("line {lineno}"), "expected \\data\\"));
        }
        let mut section: Option<usize> = None;
        let mut vocab: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut ngrams: Vec<HashMap<Vec<u32>, Entry>> = Vec::new();
        let mut ended = false;
        for (lineno, line) in lines {
            let at = || format!("line {lineno}");
            if line.is_empty() {
                continue;
            }
            if line == "\\end\\" {
                ended = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                if section.is_some() {
                    return Err(Error::format(at(), "ngram count after n-gram sections"));
                }
                let (n, c) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::format(at(), "bad ngram count line"))?;
                let n: usize = n.trim().parse().map_err(|_| Error::format(at(), "bad order"))?;
                let c: usize = c.trim().parse().map_err(|_| Error::format(at(), "bad count"))?;
                if n != declared.len() + 1 {
                    return Err(Error::format(at(), "ngram orders must be consecutive"));
                }
                declared.push(c);
                continue;
            }
            if let Some(rest) = line.strip_prefix('\\') {
                let n: usize = rest
                    .strip_suffix("-grams:")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| Error::format(at(), "bad section header"))?;
                if n != ngrams.len() + 1 || n > declared.len() {
                    return Err(Error::format(at(), "unexpected n-gram section"));
                }
                ngrams.push(HashMap::new());
                section = Some(n);
                continue;
            }
            let n = section.ok_or_else(|| Error::format(at(), "n-gram line outside a section"))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != n + 1 && fields.len() != n + 2 {
                return Err(Error::format(at(), format!("expected {} or {} fields", n + 1, n + 2)));
            }
            let lp: f64 = fields[0]
                .parse()
                .map_err(|_| Error::format(at(), "bad probability"))?;
            let bow = match fields.get(n + 1) {
                Some(b) => Some(
                    b.parse::<f64>()
                        .map_err(|_| Error::format(at(), "bad backoff weight"))?
                        * LN_10,
                ),
                None => None,
            };
            let mut key = Vec::with_capacity(n);
            for w in &fields[1..=n] {
                let id = match index.get(*w) {
                    Some(&id) => id,
                    None if n == 1 => {
                        let id = vocab.len() as u32;
                        vocab.push(w.to_string());
                        index.insert(w.to_string(), id);
                        id
                    }
                    None => return Err(Error::format(at(), format!("word {w:?} missing from 1-grams"))),
                };
                key.push(id);
            }
            let log_prob = if n == 1 && fields[1] == BOS && lp <= ARPA_NEG_INF {
                f64::NEG_INFINITY
            } else {
                lp * LN_10
            };
            if ngrams[n - 1]
                .insert(
                    key,
                    Entry {
                        log_prob,
                        backoff: bow,
                    },
                )
                .is_some()
            {
                return Err(Error::format(at(), "duplicate n-gram"));
            }
        }
        if !ended {
            return Err(Error::format("\\end\\", "missing end marker"));
        }
        if ngrams.len() != declared.len() || declared.is_empty() {
            return Err(Error::format("sections", "n-gram sections do not match header"));
        }
        for (n, (level, &count)) in ngrams.iter().zip(&declared).enumerate() {
            if level.len() != count {
                return Err(Error::format(
                    format!("ngram {}", n + 1),
                    format!("header declares {count}, found {}", level.len()),
                ));
            }
        }
        check_order(declared.len())?;
        let bos = *index
            .get(BOS)
            .ok_or_else(|| Error::format("1-grams", "missing <s>"))?;
        let eos = *index
            .get(EOS)
            .ok_or_else(|| Error::format("1-grams", "missing </s>"))?;
        let unk = index.get(UNK).copied();
        Ok(BackoffLm {
            order: declared.len(),
            vocab,
            index,
            bos,
            eos,
            unk,
            ngrams,
        })
    }
}

fn to_log10(ln: f64) -> f64 {
    if ln == f64::NEG_INFINITY {
        ARPA_NEG_INF
    } else {
        ln / LN_10
    }
}

pub fn train_lm<S: AsRef<str>>(corpus: &[Vec<S>], order: usize) -> Result<BackoffLm> {
    BackoffLm::train(corpus, order)
}

/// log10 probability of `word` given up to two history words.
pub fn score_word(lm: &BackoffLm, history: &[&str], word: &str) -> f64 {
    to_log10(lm.log_prob(history, word))
}

/// log10 sentence probability including `<s>` conditioning and `</s>` emission.
pub fn score_sentence<S: AsRef<str>>(lm: &BackoffLm, words: &[S]) -> f64 {
    to_log10(lm.sentence_log_prob(words))
}

pub fn perplexity<S: AsRef<str>>(lm: &BackoffLm, corpus: &[Vec<S>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Invalid("perplexity of an empty corpus".into()));
    }
    let mut total = 0.0;
    let mut events = 0usize;
    for s in corpus {
        total += lm.sentence_log_prob(s);
        events += s.len() + 1;
    }
    Ok((-total / events as f64).exp())
}

pub fn write_arpa(lm: &BackoffLm, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, lm.to_arpa()).map_err(|e| Error::io(path, e))
}

pub fn read_arpa(path: impl AsRef<Path>) -> Result<BackoffLm> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    BackoffLm::parse_arpa(&text)
}

/// Spells each sentence as one character sequence with word boundaries removed.
pub fn char_sentences<S: AsRef<str>>(text: &[Vec<S>], lexicon: &Lexicon) -> Result<Vec<Vec<String>>> {
    text.iter()
        .map(|s| {
            let mut out = Vec::new();
            for w in s {
                let spelling = lexicon
                    .spelling(w.as_ref())
                    .ok_or_else(|| Error::Invalid(format!("text word {:?} not in lexicon", w.as_ref())))?;
                out.extend(spelling.iter().cloned());
            }
            Ok(out)
        })
        .collect()
}

/// Label-synchronous LM used for shallow fusion.
pub trait FusionScorer: Sync {
    type State: Clone + Eq + Hash + Send + Sync;

    fn start(&self) -> Self::State;

    /// Natural-log increment for emitting `token` (a CTC label id, never blank).
    fn extend(&self, state: &Self::State, token: usize) -> (Self::State, f64);

    /// Natural-log probability of ending the sequence.
    fn finish(&self, state: &Self::State) -> f64;
}

/// Character backoff LM over the CTC label inventory.
#[derive(Debug, Clone)]
pub struct CharLmScorer {
    lm: BackoffLm,
    /// LM id per CTC token; index 0 (blank) is unused.
    token_ids: Vec<u32>,
    /// ln of the share applied when several tokens fall back to the unknown token.
    unk_share: Vec<f64>,
}

impl CharLmScorer {
    pub fn new(lm: BackoffLm, tokens: &TokenSet) -> Result<Self> {
        let mut token_ids = vec![u32::MAX; tokens.len()];
        let mut unknown = Vec::new();
        for (t, slot) in token_ids.iter_mut().enumerate().skip(1) {
            match lm.index.get(tokens.symbol(t)) {
                Some(&id) => *slot = id,
                None => unknown.push(t),
            }
        }
        let mut unk_share = vec![0.0; tokens.len()];
        if !unknown.is_empty() {
            let unk = lm
                .unk
                .ok_or_else(|| Error::Invalid("character LM has no <unk> for unseen tokens".into()))?;
            let share = -(unknown.len() as f64).ln();
            for t in unknown {
                token_ids[t] = unk;
                unk_share[t] = share;
            }
        }
        Ok(CharLmScorer {
            lm,
            token_ids,
            unk_share,
        })
    }

    pub fn lm(&self) -> &BackoffLm {
        &self.lm
    }

    fn trim(&self, mut h: Vec<u32>) -> Vec<u32> {
        let keep = self.lm.order - 1;
        if h.len() > keep {
            h.drain(..h.len() - keep);
        }
        h
    }
}

impl FusionScorer for CharLmScorer {
    type State = Vec<u32>;

    fn start(&self) -> Vec<u32> {
        self.trim(vec![self.lm.bos])
    }

    fn extend(&self, state: &Vec<u32>, token: usize) -> (Vec<u32>, f64) {
        let id = self.token_ids[token];
        let inc = self.lm.log_prob_ids(state, id) + self.unk_share[token];
        let mut next = state.clone();
        next.push(id);
        (self.trim(next), inc)
    }

    fn finish(&self, state: &Vec<u32>) -> f64 {
        self.lm.log_prob_ids(state, self.lm.eos)
    }
}
