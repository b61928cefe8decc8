//! Corpus data model: feature files, manifests, lexicons, text corpora and the
//! synthetic two-domain generator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"WSFT0001";
const FEATURE_HEADER_LEN: usize = 16;

/// Row-major T×D grid of acoustic features for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dims: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dims: usize, values: Vec<f32>) -> Result<Self> {
        if dims == 0 {
            return Err(Error::Invalid("feature dims must be positive".into()));
        }
        if frames.checked_mul(dims) != Some(values.len()) {
            return Err(Error::Invalid(format!(
                "expected {frames}x{dims} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite feature value at frame {}, dim {}",
                i / dims,
                i % dims
            )));
        }
        Ok(FeatureMatrix {
            frames,
            dims,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.values[t * self.dims..(t + 1) * self.dims]
    }

    pub fn get(&self, t: usize, d: usize) -> f32 {
        self.values[t * self.dims + d]
    }

    pub fn set(&mut self, t: usize, d: usize, v: f32) {
        self.values[t * self.dims + d] = v;
    }

    /// Per-dimension mean over all frames, accumulated in f64.
    pub fn column_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.dims];
        for t in 0..self.frames {
            for (s, &v) in sums.iter_mut().zip(self.row(t)) {
                *s += v as f64;
            }
        }
        let n = self.frames.max(1) as f64;
        sums.iter_mut().for_each(|s| *s /= n);
        sums
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.frames == 0 {
            return Err(Error::Invalid("feature matrix must have at least one frame".into()));
        }
        let frames = u32::try_from(self.frames)
            .map_err(|_| Error::Invalid("frame count exceeds u32".into()))?;
        let dims =
            u32::try_from(self.dims).map_err(|_| Error::Invalid("dims exceed u32".into()))?;
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&frames.to_le_bytes());
        out.extend_from_slice(&dims.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format("magic", "truncated header"));
        }
        if &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::format("magic", "bad magic"));
        }
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::format("header", "truncated header"));
        }
        let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dims = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if frames == 0 {
            return Err(Error::format("frames", "must be at least 1"));
        }
        if dims == 0 {
            return Err(Error::format("dims", "must be at least 1"));
        }
        let payload = frames
            .checked_mul(dims)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("frames*dims", "size overflow"))?;
        let body = &bytes[FEATURE_HEADER_LEN..];
        if body.len() < payload {
            return Err(Error::format(
                "payload",
                format!("truncated: expected {payload} bytes, found {}", body.len()),
            ));
        }
        if body.len() > payload {
            return Err(Error::format(
                "payload",
                format!("{} trailing bytes", body.len() - payload),
            ));
        }
        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureMatrix::new(frames, dims, values).map_err(|e| Error::format("payload", e.to_string()))
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes)
}

pub fn write_features(matrix: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = matrix.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feats: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Vec<String>>,
    pub domain: String,
}

/// Ordered utterance list. Relative feature paths resolve against `base_dir`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        check_unique_ids(entries.iter().map(|e| e.id.as_str()))?;
        Ok(Manifest {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feats_path(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.feats.is_absolute() {
            entry.feats.clone()
        } else {
            self.base_dir.join(&entry.feats)
        }
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    /// Reads every referenced feature file.
    pub fn load_utterances(&self) -> Result<Vec<Utterance>> {
        self.entries
            .iter()
            .map(|e| {
                let features =
                    read_features(self.feats_path(e)).map_err(|err| Error::utterance(&e.id, err))?;
                Ok(Utterance {
                    id: e.id.clone(),
                    features,
                    transcript: e.transcript.clone(),
                    domain: e.domain.clone(),
                })
            })
            .collect()
    }

    /// Loads the audio side only; transcripts are dropped.
    pub fn load_untranscribed(&self) -> Result<Vec<UntranscribedUtterance>> {
        Ok(self
            .load_utterances()?
            .into_iter()
            .map(Utterance::into_untranscribed)
            .collect())
    }
}

fn check_unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Duplicate {
                kind: "utterance id",
                name: id.to_string(),
            });
        }
    }
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("line {}", lineno + 1), e.to_string()))?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Duplicate {
                kind: "utterance id",
                name: entry.id,
            });
        }
        if let Some(words) = &entry.transcript {
            if let Some(w) = words.iter().find(|w| w.is_empty() || w.chars().any(char::is_whitespace)) {
                return Err(Error::utterance(
                    &entry.id,
                    format!("transcript word {w:?} is empty or contains whitespace"),
                ));
            }
        }
        let feats = if entry.feats.is_absolute() {
            entry.feats.clone()
        } else {
            base_dir.join(&entry.feats)
        };
        if !feats.is_file() {
            return Err(Error::utterance(
                &entry.id,
                format!("missing feature file {}", feats.display()),
            ));
        }
        read_features(&feats).map_err(|e| Error::utterance(&entry.id, e))?;
        entries.push(entry);
    }
    Ok(Manifest { entries, base_dir })
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in &manifest.entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub transcript: Option<Vec<String>>,
    pub domain: String,
}

impl Utterance {
    pub fn into_untranscribed(self) -> UntranscribedUtterance {
        UntranscribedUtterance {
            id: self.id,
            features: self.features,
            domain: self.domain,
        }
    }
}

/// Audio with no transcript field at all, so consumers cannot read one.
#[derive(Debug, Clone, PartialEq)]
pub struct UntranscribedUtterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub domain: String,
}

/// Pronunciation dictionary from words to character sequences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Lexicon {
    words: Vec<(String, Vec<String>)>,
    index: HashMap<String, usize>,
    inventory: BTreeSet<String>,
}

impl Lexicon {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<String>)>) -> Result<Self> {
        let mut lex = Lexicon::default();
        for (word, spelling) in entries {
            lex.insert(word, spelling)?;
        }
        Ok(lex)
    }

    fn insert(&mut self, word: String, spelling: Vec<String>) -> Result<()> {
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(Error::Invalid(format!("bad lexicon word {word:?}")));
        }
        if spelling.is_empty() {
            return Err(Error::Invalid(format!("word {word:?} has an empty spelling")));
        }
        if self.index.contains_key(&word) {
            return Err(Error::Duplicate {
                kind: "lexicon word",
                name: word,
            });
        }
        self.inventory.extend(spelling.iter().cloned());
        self.index.insert(word.clone(), self.words.len());
        self.words.push((word, spelling));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words in file order with their spellings.
    pub fn entries(&self) -> &[(String, Vec<String>)] {
        &self.words
    }

    pub fn spelling(&self, word: &str) -> Option<&[String]> {
        self.index.get(word).map(|&i| self.words[i].1.as_slice())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn inventory(&self) -> &BTreeSet<String> {
        &self.inventory
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, s) in &self.words {
            out.push_str(w);
            out.push('\t');
            out.push_str(&s.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lex = Lexicon::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, chars) = line.split_once('\t').ok_or_else(|| {
                Error::format(format!("line {}", lineno + 1), "expected word<TAB>characters")
            })?;
            let spelling: Vec<String> = chars.split_whitespace().map(str::to_string).collect();
            lex.insert(word.to_string(), spelling)
                .map_err(|e| match e {
                    Error::Duplicate { .. } => e,
                    other => Error::format(format!("line {}", lineno + 1), other.to_string()),
                })?;
        }
        Ok(lex)
    }
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Lexicon> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Lexicon::parse_tsv(&text)
}

pub fn save_lexicon(lexicon: &Lexicon, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, lexicon.to_tsv()).map_err(|e| Error::io(path, e))
}

pub const BLANK_SYMBOL: &str = "<blk>";

/// CTC output inventory: index 0 is blank, then the lexicon characters in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSet {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenSet {
    pub fn new(chars: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut symbols = vec![BLANK_SYMBOL.to_string()];
        let mut index = HashMap::new();
        index.insert(BLANK_SYMBOL.to_string(), 0);
        for c in chars {
            if index.contains_key(&c) {
                return Err(Error::Duplicate {
                    kind: "token",
                    name: c,
                });
            }
            index.insert(c.clone(), symbols.len());
            symbols.push(c);
        }
        if symbols.len() < 2 {
            return Err(Error::Invalid("token inventory is empty".into()));
        }
        Ok(TokenSet { symbols, index })
    }

    pub fn from_lexicon(lexicon: &Lexicon) -> Result<Self> {
        TokenSet::new(lexicon.inventory().iter().cloned())
    }

    /// Number of tokens including blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Concatenated spelling of a word sequence as token ids.
    pub fn encode_words(&self, words: &[String], lexicon: &Lexicon) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for w in words {
            let spelling = lexicon
                .spelling(w)
                .ok_or_else(|| Error::Invalid(format!("word {w:?} not in lexicon")))?;
            for c in spelling {
                out.push(
                    self.id(c)
                        .ok_or_else(|| Error::Invalid(format!("character {c:?} not in inventory")))?,
                );
            }
        }
        Ok(out)
    }
}

pub fn read_text_corpus(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

pub fn write_text_corpus(sentences: &[Vec<String>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in sentences {
        writeln!(f, "{}", s.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub tag: String,
    /// Additive channel offset, one value per feature dimension.
    pub offset: Vec<f64>,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub n_chars: usize,
    pub dims: usize,
    pub word_len: (usize, usize),
    pub frames_per_char: (usize, usize),
    pub sentence_len: (usize, usize),
    /// Probability of a single gap frame between two different characters.
    pub gap_prob: f64,
    pub zipf_exponent: f64,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub n_supervised: usize,
    pub n_untranscribed: usize,
    /// Fraction of the untranscribed split drawn from the target domain.
    pub untranscribed_target_fraction: f64,
    pub n_test: usize,
    pub n_text: usize,
    /// Number of out-of-vocabulary word tokens injected into target-domain test transcripts.
    pub oov_tokens: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let dims = 12;
        SynthSpec {
            vocab_size: 40,
            n_chars: 10,
            dims,
            word_len: (2, 4),
            frames_per_char: (2, 4),
            sentence_len: (3, 6),
            gap_prob: 0.3,
            zipf_exponent: 1.1,
            source: DomainSpec {
                tag: "A".into(),
                offset: vec![0.0; dims],
                noise: 0.5,
            },
            target: DomainSpec {
                tag: "B".into(),
                offset: (0..dims)
                    .map(|d| if d % 2 == 0 { 0.4 } else { -0.4 })
                    .collect(),
                noise: 0.6,
            },
            n_supervised: 200,
            n_untranscribed: 400,
            untranscribed_target_fraction: 0.8,
            n_test: 100,
            n_text: 3000,
            oov_tokens: 0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("n_chars", self.n_chars),
            ("dims", self.dims),
            ("n_supervised", self.n_supervised),
            ("n_untranscribed", self.n_untranscribed),
            ("n_test", self.n_test),
            ("n_text", self.n_text),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if self.n_chars > 26 {
            return Err(Error::Invalid("n_chars must be at most 26".into()));
        }
        for (name, (lo, hi)) in [
            ("word_len", self.word_len),
            ("frames_per_char", self.frames_per_char),
            ("sentence_len", self.sentence_len),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Invalid(format!("{name} must satisfy 1 <= min <= max")));
            }
        }
        for d in [&self.source, &self.target] {
            if !(d.noise > 0.0 && d.noise.is_finite()) {
                return Err(Error::Invalid(format!("domain {} noise must be > 0", d.tag)));
            }
            if d.offset.len() != self.dims || d.offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "domain {} offset must have {} finite values",
                    d.tag, self.dims
                )));
            }
        }
        if self.source.tag == self.target.tag {
            return Err(Error::Invalid("domain tags must differ".into()));
        }
        if !(0.0..=1.0).contains(&self.untranscribed_target_fraction) || !(0.0..=1.0).contains(&self.gap_prob) {
            return Err(Error::Invalid("fractions must lie in [0, 1]".into()));
        }
        let possible: f64 = (self.word_len.0..=self.word_len.1)
            .map(|l| (self.n_chars as f64).powi(l as i32))
            .sum();
        if possible < 2.0 * self.vocab_size as f64 {
            return Err(Error::Invalid("vocabulary too large for word lengths".into()));
        }
        Ok(())
    }
}

/// Generated corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub supervised: Vec<Utterance>,
    pub untranscribed: Vec<UntranscribedUtterance>,
    /// Test sets keyed by domain tag.
    pub tests: BTreeMap<String, Vec<Utterance>>,
    pub lexicon: Lexicon,
    pub text: Vec<Vec<String>>,
    pub oov_words: Vec<String>,
}

/// Paths written by [`SynthCorpus::write`].
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub supervised: PathBuf,
    pub untranscribed: PathBuf,
    pub tests: BTreeMap<String, PathBuf>,
    pub lexicon: PathBuf,
    pub text: PathBuf,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path, test_domains: impl IntoIterator<Item = String>) -> Self {
        CorpusPaths {
            supervised: dir.join("supervised.jsonl"),
            untranscribed: dir.join("untranscribed.jsonl"),
            tests: test_domains
                .into_iter()
                .map(|d| {
                    let p = dir.join(format!("test_{d}.jsonl"));
                    (d, p)
                })
                .collect(),
            lexicon: dir.join("lexicon.tsv"),
            text: dir.join("text.txt"),
        }
    }
}

impl SynthCorpus {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<CorpusPaths> {
        let dir = dir.as_ref();
        let feats_dir = dir.join("feats");
        fs::create_dir_all(&feats_dir).map_err(|e| Error::io(&feats_dir, e))?;
        let paths = CorpusPaths::in_dir(dir, self.tests.keys().cloned());

        let write_set = |utts: &mut dyn Iterator<Item = (&str, &FeatureMatrix, Option<&Vec<String>>, &str)>,
                         path: &Path|
         -> Result<()> {
            let mut entries = Vec::new();
            for (id, feats, transcript, domain) in utts {
                let rel = PathBuf::from("feats").join(format!("{id}.wsft"));
                write_features(feats, dir.join(&rel))?;
                entries.push(ManifestEntry {
                    id: id.to_string(),
                    feats: rel,
                    transcript: transcript.cloned(),
                    domain: domain.to_string(),
                });
            }
            save_manifest(&Manifest::new(entries, dir)?, path)
        };

        write_set(
            &mut self
                .supervised
                .iter()
                .map(|u| (u.id.as_str(), &u.features, u.transcript.as_ref(), u.domain.as_str())),
            &paths.supervised,
        )?;
        write_set(
            &mut self
                .untranscribed
                .iter()
                .map(|u| (u.id.as_str(), &u.features, None, u.domain.as_str())),
            &paths.untranscribed,
        )?;
        for (domain, utts) in &self.tests {
            write_set(
                &mut utts
                    .iter()
                    .map(|u| (u.id.as_str(), &u.features, u.transcript.as_ref(), u.domain.as_str())),
                &paths.tests[domain],
            )?;
        }
        save_lexicon(&self.lexicon, &paths.lexicon)?;
        write_text_corpus(&self.text, &paths.text)?;
        Ok(paths)
    }
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    rng: ChaCha8Rng,
    words: Vec<String>,
    spellings: HashMap<String, Vec<usize>>,
    /// Character prototypes; index 0 is the inter-character gap.
    prototypes: Vec<Vec<f64>>,
    zipf_cdf: Vec<f64>,
    /// Per-word successor ranking used for bigram-structured sentences.
    successors: Vec<Vec<usize>>,
}

fn char_name(i: usize) -> String {
    ((b'a' + i as u8) as char).to_string()
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut prototypes = vec![vec![0.0; spec.dims]];
        for _ in 0..spec.n_chars {
            prototypes.push((0..spec.dims).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        }
        let mut words = Vec::new();
        let mut spellings = HashMap::new();
        while words.len() < spec.vocab_size {
            let len = rng.random_range(spec.word_len.0..=spec.word_len.1);
            let chars: Vec<usize> = (0..len).map(|_| rng.random_range(1..=spec.n_chars)).collect();
            let word: String = chars.iter().map(|&c| char_name(c - 1)).collect();
            if spellings.contains_key(&word) {
                continue;
            }
            spellings.insert(word.clone(), chars);
            words.push(word);
        }
        let weights: Vec<f64> = (0..spec.vocab_size)
            .map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let zipf_cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        let successors = (0..spec.vocab_size)
            .map(|_| {
                let mut perm: Vec<usize> = (0..spec.vocab_size).collect();
                perm.shuffle(&mut rng);
                perm
            })
            .collect();
        Generator {
            spec,
            rng,
            words,
            spellings,
            prototypes,
            zipf_cdf,
            successors,
        }
    }

    fn zipf_rank(&mut self) -> usize {
        let u: f64 = self.rng.random();
        self.zipf_cdf.partition_point(|&c| c < u).min(self.zipf_cdf.len() - 1)
    }

    fn sentence(&mut self) -> Vec<String> {
        let len = self
            .rng
            .random_range(self.spec.sentence_len.0..=self.spec.sentence_len.1);
        let mut out = Vec::with_capacity(len);
        let mut prev = self.zipf_rank();
        out.push(self.words[prev].clone());
        for _ in 1..len {
            let rank = self.zipf_rank();
            prev = self.successors[prev][rank];
            out.push(self.words[prev].clone());
        }
        out
    }

    fn features(&mut self, chars: &[usize], domain: &DomainSpec) -> FeatureMatrix {
        let mut labels = vec![0usize];
        for (i, &c) in chars.iter().enumerate() {
            if i > 0 && (chars[i - 1] == c || self.rng.random::<f64>() < self.spec.gap_prob) {
                labels.push(0);
            }
            let n = self
                .rng
                .random_range(self.spec.frames_per_char.0..=self.spec.frames_per_char.1);
            labels.extend(std::iter::repeat_n(c, n));
        }
        labels.push(0);
        let dims = self.spec.dims;
        let mut values = Vec::with_capacity(labels.len() * dims);
        for &l in &labels {
            for d in 0..dims {
                let noise: f64 = self.rng.sample(StandardNormal);
                values.push((self.prototypes[l][d] + domain.offset[d] + domain.noise * noise) as f32);
            }
        }
        FeatureMatrix::new(labels.len(), dims, values).expect("generated features are finite")
    }

    fn utterance(&mut self, id: String, domain: &DomainSpec, words: Vec<String>) -> Utterance {
        let chars: Vec<usize> = words
            .iter()
            .flat_map(|w| self.spellings[w].clone())
            .collect();
        let features = self.features(&chars, domain);
        Utterance {
            id,
            features,
            transcript: Some(words),
            domain: domain.tag.clone(),
        }
    }
}

/// Deterministic two-domain corpus. The supervised split is source-domain only.
pub fn synthesize_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut g = Generator::new(spec);
    let lexicon = Lexicon::new(g.words.clone().into_iter().map(|w| {
        let s = g.spellings[&w].iter().map(|&c| char_name(c - 1)).collect();
        (w, s)
    }))?;

    let text: Vec<Vec<String>> = (0..spec.n_text).map(|_| g.sentence()).collect();

    let supervised = (0..spec.n_supervised)
        .map(|i| {
            let words = g.sentence();
            g.utterance(format!("sup{i:05}"), &spec.source, words)
        })
        .collect();

    let untranscribed = (0..spec.n_untranscribed)
        .map(|i| {
            let domain = if g.rng.random::<f64>() < spec.untranscribed_target_fraction {
                &spec.target
            } else {
                &spec.source
            };
            let words = g.sentence();
            g.utterance(format!("unt{i:05}"), domain, words).into_untranscribed()
        })
        .collect();

    // Out-of-vocabulary words share the character inventory but are absent from the lexicon.
    let mut oov_words = Vec::new();
    let mut oov_spellings = Vec::new();
    while oov_words.len() < spec.oov_tokens.min(8) {
        let len = g.rng.random_range(spec.word_len.0..=spec.word_len.1);
        let chars: Vec<usize> = (0..len).map(|_| g.rng.random_range(1..=spec.n_chars)).collect();
        let word: String = chars.iter().map(|&c| char_name(c - 1)).collect();
        if g.spellings.contains_key(&word) || oov_words.contains(&word) {
            continue;
        }
        oov_words.push(word);
        oov_spellings.push(chars);
    }

    let mut tests = BTreeMap::new();
    for domain in [&spec.source, &spec.target] {
        let mut sentences: Vec<Vec<String>> = (0..spec.n_test).map(|_| g.sentence()).collect();
        if domain.tag == spec.target.tag && spec.oov_tokens > 0 {
            let mut slots: Vec<(usize, usize)> = sentences
                .iter()
                .enumerate()
                .flat_map(|(i, s)| (0..s.len()).map(move |j| (i, j)))
                .collect();
            if slots.len() < spec.oov_tokens {
                return Err(Error::Invalid("more OOV tokens requested than test word slots".into()));
            }
            slots.shuffle(&mut g.rng);
            for (n, &(i, j)) in slots[..spec.oov_tokens].iter().enumerate() {
                sentences[i][j] = oov_words[n % oov_words.len()].clone();
            }
        }
        let utts = sentences
            .into_iter()
            .enumerate()
            .map(|(i, words)| {
                let chars: Vec<usize> = words
                    .iter()
                    .flat_map(|w| match g.spellings.get(w) {
                        Some(s) => s.clone(),
                        None => oov_spellings[oov_words.iter().position(|o| o == w).unwrap()].clone(),
                    })
                    .collect();
                let features = g.features(&chars, domain);
                Utterance {
                    id: format!("test{}{i:05}", domain.tag),
                    features,
                    transcript: Some(words),
                    domain: domain.tag.clone(),
                }
            })
            .collect();
        tests.insert(domain.tag.clone(), utts);
    }

    Ok(SynthCorpus {
        supervised,
        untranscribed,
        tests,
        lexicon,
        text,
        oov_words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_layout() {
        let m = FeatureMatrix::new(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(bytes.len(), 8 + 8 + 24);
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        let back = FeatureMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back.row(1), &[3.0, 4.0]);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let one = FeatureMatrix::new(1, 1, vec![0.0]).unwrap();
        assert_eq!(one.to_bytes().unwrap().len(), 8 + 4 + 4 + 4);
    }

    #[test]
    fn feature_errors() {
        let m = FeatureMatrix::new(2, 3, vec![0.5; 6]).unwrap();
        let mut bytes = m.to_bytes().unwrap();
        assert_eq!(bytes.len() - 16, 24);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = FeatureMatrix::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        bytes.truncate(bytes.len() - 3);
        let err = FeatureMatrix::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("payload"), "{err}");

        let mut huge = FEATURE_MAGIC.to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = FeatureMatrix::from_bytes(&huge).unwrap_err().to_string();
        assert!(err.contains("payload") || err.contains("overflow"), "{err}");

        let empty = FeatureMatrix::new(0, 4, vec![]).unwrap();
        assert!(empty.to_bytes().is_err());
        assert!(FeatureMatrix::new(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn lexicon_parsing() {
        let lex = Lexicon::parse_tsv("ab\ta b\nc\tc\n").unwrap();
        assert_eq!(lex.spelling("ab").unwrap(), &["a".to_string(), "b".to_string()]);
        assert_eq!(lex.spelling("c").unwrap().len(), 1);
        assert_eq!(lex.inventory().len(), 3);
        assert!(matches!(
            Lexicon::parse_tsv("ab\ta b\nab\ta b\n"),
            Err(Error::Duplicate { .. })
        ));
        assert!(Lexicon::parse_tsv("ab\t\n").is_err());
        assert_eq!(Lexicon::parse_tsv(&lex.to_tsv()).unwrap(), lex);
    }

    #[test]
    fn token_set_puts_blank_first() {
        let lex = Lexicon::parse_tsv("ba\tb a\n").unwrap();
        let tokens = TokenSet::from_lexicon(&lex).unwrap();
        assert_eq!(tokens.symbols(), &["<blk>", "a", "b"]);
        assert_eq!(
            tokens.encode_words(&["ba".to_string()], &lex).unwrap(),
            vec![2, 1]
        );
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = SynthSpec {
            n_supervised: 5,
            n_untranscribed: 5,
            n_test: 3,
            n_text: 20,
            ..SynthSpec::default()
        };
        let a = synthesize_corpus(&spec).unwrap();
        let b = synthesize_corpus(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.supervised.iter().all(|u| u.domain == "A"));
        for u in a.supervised.iter().chain(a.tests.values().flatten()) {
            for w in u.transcript.as_ref().unwrap() {
                assert!(a.lexicon.contains(w));
            }
        }
    }

    #[test]
    fn oov_injection_count_is_exact() {
        let spec = SynthSpec {
            n_supervised: 3,
            n_untranscribed: 3,
            n_test: 10,
            n_text: 10,
            oov_tokens: 7,
            ..SynthSpec::default()
        };
        let c = synthesize_corpus(&spec).unwrap();
        let count = |tag: &str| {
            c.tests[tag]
                .iter()
                .flat_map(|u| u.transcript.clone().unwrap())
                .filter(|w| !c.lexicon.contains(w))
                .count()
        };
        assert_eq!(count("B"), 7);
        assert_eq!(count("A"), 0);
        assert!(c.text.iter().flatten().all(|w| c.lexicon.contains(w)));
    }

    #[test]
    fn zero_offset_domains_have_equal_means() {
        let mut spec = SynthSpec {
            n_supervised: 1,
            n_untranscribed: 1,
            n_test: 300,
            n_text: 1,
            ..SynthSpec::default()
        };
        spec.target.offset = vec![0.0; spec.dims];
        spec.target.noise = spec.source.noise;
        let c = synthesize_corpus(&spec).unwrap();
        // Utterances are independent draws; compare utterance-level means.
        let stats = |tag: &str| {
            let means: Vec<Vec<f64>> = c.tests[tag].iter().map(|u| u.features.column_means()).collect();
            let n = means.len() as f64;
            let mean: Vec<f64> = (0..spec.dims)
                .map(|d| means.iter().map(|m| m[d]).sum::<f64>() / n)
                .collect();
            let var: Vec<f64> = (0..spec.dims)
                .map(|d| means.iter().map(|m| (m[d] - mean[d]).powi(2)).sum::<f64>() / (n - 1.0))
                .collect();
            (mean, var, n)
        };
        let (ma, va, na) = stats("A");
        let (mb, vb, nb) = stats("B");
        for d in 0..spec.dims {
            let se = (va[d] / na + vb[d] / nb).sqrt();
            assert!((ma[d] - mb[d]).abs() < 3.0 * se, "dim {d}: {} vs {}", ma[d], mb[d]);
        }
    }
}
