//! Declarative experiment plans: corpus, recipes, decode modes and seeds go in; a WER
//! grid, every intermediate artifact and a hash manifest come out.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::am::{ArchConfig, RefModel, TrainConfig};
use crate::corpus::{
    load_lexicon, load_manifest, read_text_corpus, save_lexicon, synthesize_corpus, CorpusPaths, Lexicon,
    SynthSpec, TokenSet, UntranscribedUtterance, Utterance,
};
use crate::error::{Error, Result};
use crate::ngram::{char_sentences, train_lm, write_arpa, BackoffLm, CharLmScorer};
use crate::sst::{
    ctc_examples, evaluate, run_sst, train_ctc_model, write_pseudo, DecodeMode, DecodeParams, Decoder,
    Selection, SstConfig, SstData,
};
use crate::unsup::{unsup_iteration, UnsupConfig};
use crate::wfst::{build_tlg_from, Wfst};

pub const GRID_FILE: &str = "grid.json";
pub const CLAIMS_FILE: &str = "claims.json";
pub const PLAN_ECHO_FILE: &str = "config.json";
pub const ARTIFACTS_FILE: &str = "artifacts.json";
/// Wall-clock durations; the only output that differs between identical runs.
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synth(SynthSpec),
    /// A directory laid out like the output of `synth`.
    Dir(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeKind {
    Supervised,
    Sst,
    Unsup,
    UnsupThenSst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    pub kind: RecipeKind,
    /// SST iterations (sst, unsup_then_sst).
    #[serde(default = "one")]
    pub sst_iterations: usize,
    /// Pretraining iterations (unsup, unsup_then_sst).
    #[serde(default = "one")]
    pub unsup_iterations: usize,
    /// Decode mode used to produce pseudotranscripts.
    #[serde(default = "greedy")]
    pub transcription: DecodeMode,
}

fn one() -> usize {
    1
}

fn greedy() -> DecodeMode {
    DecodeMode::Greedy
}

impl Recipe {
    pub fn new(name: &str, kind: RecipeKind) -> Self {
        Recipe {
            name: name.to_string(),
            kind,
            sst_iterations: 1,
            unsup_iterations: 1,
            transcription: DecodeMode::Greedy,
        }
    }

    fn iterations(&self) -> usize {
        match self.kind {
            RecipeKind::Supervised => 1,
            RecipeKind::Sst | RecipeKind::UnsupThenSst => self.sst_iterations,
            RecipeKind::Unsup => self.unsup_iterations,
        }
    }

    /// Row names in the grid: the final model under the recipe name, plus one row
    /// per iteration when there are several.
    pub fn rows(&self) -> Vec<String> {
        let n = self.iterations();
        let mut rows = vec![self.name.clone()];
        if n > 1 {
            rows.extend((1..=n).map(|i| format!("{}/iter{i}", self.name)));
        }
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub word_order: usize,
    pub char_order: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            word_order: 3,
            char_order: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SstSettings {
    pub selection: Selection,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for SstSettings {
    fn default() -> Self {
        let base = SstConfig::default();
        SstSettings {
            selection: base.selection,
            train: base.train,
            seed: base.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub corpus: CorpusSource,
    pub output_dir: PathBuf,
    pub recipes: Vec<Recipe>,
    pub decode_modes: Vec<DecodeMode>,
    /// Lexicon for the decoding graph; the corpus lexicon when absent.
    #[serde(default)]
    pub graph_lexicon: Option<PathBuf>,
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default)]
    pub decode: DecodeParams,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub supervised: TrainConfig,
    #[serde(default = "default_supervised_seed")]
    pub supervised_seed: u64,
    #[serde(default)]
    pub unsup: UnsupConfig,
    #[serde(default)]
    pub sst: SstSettings,
    /// Directional checks run after the grid; the default set when absent.
    #[serde(default)]
    pub claims: Option<Vec<Claim>>,
}

fn default_supervised_seed() -> u64 {
    5
}

impl ExperimentPlan {
    /// Every recipe of the comparison grid on the default synthetic corpus.
    pub fn default_plan(output_dir: impl Into<PathBuf>) -> Self {
        let mut sst_fusion = Recipe::new("sst_fusion", RecipeKind::Sst);
        sst_fusion.transcription = DecodeMode::Fusion;
        let mut sst_ctc = Recipe::new("sst_ctc", RecipeKind::Sst);
        sst_ctc.transcription = DecodeMode::CtcWfst;
        ExperimentPlan {
            corpus: CorpusSource::Synth(SynthSpec::default()),
            output_dir: output_dir.into(),
            recipes: vec![
                Recipe::new("supervised", RecipeKind::Supervised),
                Recipe::new("sst", RecipeKind::Sst),
                Recipe::new("unsup", RecipeKind::Unsup),
                Recipe::new("unsup_sst", RecipeKind::UnsupThenSst),
                sst_fusion,
                sst_ctc,
            ],
            decode_modes: vec![DecodeMode::Greedy, DecodeMode::Fusion, DecodeMode::CtcWfst],
            graph_lexicon: None,
            lm: LmConfig::default(),
            decode: DecodeParams::default(),
            arch: ArchConfig::default(),
            supervised: TrainConfig::default(),
            supervised_seed: default_supervised_seed(),
            unsup: UnsupConfig::default(),
            sst: SstSettings::default(),
            claims: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: ExperimentPlan = serde_json::from_str(&text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.recipes.is_empty() {
            return Err(Error::Invalid("plan has no recipes".into()));
        }
        if self.decode_modes.is_empty() {
            return Err(Error::Invalid("plan has no decode modes".into()));
        }
        let mut names = HashSet::new();
        for r in &self.recipes {
            if r.name.is_empty() || r.name.contains('/') {
                return Err(Error::Invalid(format!("recipe name {:?} must be non-empty without '/'", r.name)));
            }
            if !names.insert(r.name.as_str()) {
                return Err(Error::Duplicate {
                    kind: "recipe",
                    name: r.name.clone(),
                });
            }
            if r.iterations() == 0 {
                return Err(Error::Invalid(format!("recipe {}: iterations must be at least 1", r.name)));
            }
        }
        if self.lm.word_order == 0 || self.lm.char_order == 0 {
            return Err(Error::Invalid("LM orders must be at least 1".into()));
        }
        self.supervised.validate()?;
        self.unsup.train.validate()?;
        self.sst.train.validate()?;
        if let CorpusSource::Synth(spec) = &self.corpus {
            spec.validate()?;
        }
        Ok(())
    }

    /// Every seed the plan uses, by name.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut s = BTreeMap::new();
        if let CorpusSource::Synth(spec) = &self.corpus {
            s.insert("corpus".to_string(), spec.seed);
        }
        s.insert("supervised_init".into(), self.supervised_seed);
        s.insert("supervised_shuffle".into(), self.supervised.seed);
        s.insert("unsup".into(), self.unsup.seed);
        s.insert("unsup_shuffle".into(), self.unsup.train.seed);
        s.insert("sst".into(), self.sst.seed);
        s.insert("sst_shuffle".into(), self.sst.train.seed);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub recipe: String,
    pub mode: DecodeMode,
    pub domain: String,
    pub status: CellStatus,
    pub wer: Option<f64>,
    pub errors: Option<usize>,
    pub reference_words: Option<usize>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultGrid {
    pub cells: Vec<Cell>,
    pub seeds: BTreeMap<String, u64>,
    /// Seconds per stage; written to the timings file, not the grid file.
    #[serde(skip)]
    pub durations: BTreeMap<String, f64>,
}

impl ResultGrid {
    pub fn get(&self, recipe: &str, mode: DecodeMode, domain: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.recipe == recipe && c.mode == mode && c.domain == domain)
    }

    pub fn wer(&self, recipe: &str, mode: DecodeMode, domain: &str) -> Option<f64> {
        self.get(recipe, mode, domain).and_then(|c| c.wer)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRef {
    pub recipe: String,
    pub mode: DecodeMode,
    pub domain: String,
}

impl CellRef {
    pub fn new(recipe: &str, mode: DecodeMode, domain: &str) -> Self {
        CellRef {
            recipe: recipe.into(),
            mode,
            domain: domain.into(),
        }
    }
}

impl std::fmt::Display for CellRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.recipe, self.mode, self.domain)
    }
}

/// Holds when WER(lhs) ≤ WER(rhs) − margin, or `<` when strict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Claim {
    pub name: String,
    pub lhs: CellRef,
    pub rhs: CellRef,
    #[serde(default)]
    pub margin: f64,
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotEvaluable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimResult {
    pub claim: Claim,
    pub verdict: Verdict,
    pub lhs_wer: Option<f64>,
    pub rhs_wer: Option<f64>,
    pub detail: String,
}

/// Rounding slack for comparing WER ratios against a bound.
pub const TIE_TOLERANCE: f64 = 1e-12;

pub fn compare(grid: &ResultGrid, claims: &[Claim]) -> Vec<ClaimResult> {
    claims
        .iter()
        .map(|c| {
            let l = grid.wer(&c.lhs.recipe, c.lhs.mode, &c.lhs.domain);
            let r = grid.wer(&c.rhs.recipe, c.rhs.mode, &c.rhs.domain);
            let (verdict, detail) = match (l, r) {
                (Some(l), Some(r)) => {
                    let bound = r - c.margin;
                    let holds = if c.strict { l < bound - TIE_TOLERANCE } else { l <= bound + TIE_TOLERANCE };
                    let op = if c.strict { "<" } else { "<=" };
                    (
                        if holds { Verdict::Pass } else { Verdict::Fail },
                        format!("{l:.4} {op} {r:.4} - {:.4}", c.margin),
                    )
                }
                _ => {
                    let missing: Vec<String> = [(&c.lhs, l), (&c.rhs, r)]
                        .iter()
                        .filter(|(_, w)| w.is_none())
                        .map(|(cell, _)| cell.to_string())
                        .collect();
                    (Verdict::NotEvaluable, format!("no WER for {}", missing.join(", ")))
                }
            };
            ClaimResult {
                claim: c.clone(),
                verdict,
                lhs_wer: l,
                rhs_wer: r,
                detail,
            }
        })
        .collect()
}

/// The comparative findings checked on the default plan, target domain "B".
pub fn default_claims() -> Vec<Claim> {
    use DecodeMode::*;
    let c = CellRef::new;
    let claim = |name: &str, lhs: CellRef, rhs: CellRef, margin: f64, strict: bool| Claim {
        name: name.into(),
        lhs,
        rhs,
        margin,
        strict,
    };
    vec![
        claim(
            "domain shift: supervised WER on A below B",
            c("supervised", Greedy, "A"),
            c("supervised", Greedy, "B"),
            0.0,
            true,
        ),
        claim(
            "SST iteration 1 beats supervised on B by 2 points",
            c("sst", Greedy, "B"),
            c("supervised", Greedy, "B"),
            0.02,
            false,
        ),
        claim(
            "unsup+SST within 0.5 points of SST on B",
            c("unsup_sst", Greedy, "B"),
            c("sst", Greedy, "B"),
            -0.005,
            false,
        ),
        claim(
            "unsup+SST within 0.5 points of unsup on B",
            c("unsup_sst", Greedy, "B"),
            c("unsup", Greedy, "B"),
            -0.005,
            false,
        ),
        claim(
            "word-LM graph decoding beats greedy on B",
            c("supervised", CtcWfst, "B"),
            c("supervised", Greedy, "B"),
            0.0,
            true,
        ),
        claim(
            "graph transcription for SST no worse than fusion transcription on B",
            c("sst_ctc", Fusion, "B"),
            c("sst_fusion", Fusion, "B"),
            0.0,
            false,
        ),
    ]
}

/// Audio, lexicon and text for an experiment.
pub struct LoadedCorpus {
    pub supervised: Vec<Utterance>,
    pub untranscribed: Vec<UntranscribedUtterance>,
    pub tests: Vec<Utterance>,
    pub domains: Vec<String>,
    pub lexicon: Lexicon,
    pub text: Vec<Vec<String>>,
}

impl LoadedCorpus {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut domains = Vec::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(tag) = name.strip_prefix("test_").and_then(|n| n.strip_suffix(".jsonl")) {
                domains.push(tag.to_string());
            }
        }
        domains.sort();
        let paths = CorpusPaths::in_dir(dir, domains.clone());
        let mut tests = Vec::new();
        for p in paths.tests.values() {
            tests.extend(load_manifest(p)?.load_utterances()?);
        }
        Ok(LoadedCorpus {
            supervised: load_manifest(&paths.supervised)?.load_utterances()?,
            untranscribed: load_manifest(&paths.untranscribed)?.load_untranscribed()?,
            tests,
            domains,
            lexicon: load_lexicon(&paths.lexicon)?,
            text: read_text_corpus(&paths.text)?,
        })
    }

    /// Training and test id sets must not overlap.
    pub fn check_disjoint(&self) -> Result<()> {
        let test: HashSet<&str> = self.tests.iter().map(|u| u.id.as_str()).collect();
        for id in self
            .supervised
            .iter()
            .map(|u| u.id.as_str())
            .chain(self.untranscribed.iter().map(|u| u.id.as_str()))
        {
            if test.contains(id) {
                return Err(Error::utterance(id, "appears in both training and test sets"));
            }
        }
        Ok(())
    }
}

/// Language models and the decoding graph for a corpus.
pub struct DecodingResources {
    pub word_lm: BackoffLm,
    pub char_lm: BackoffLm,
    pub graph: std::result::Result<Wfst, String>,
}

pub fn build_resources(corpus: &LoadedCorpus, lm: LmConfig, graph_lexicon: Option<&Path>) -> Result<DecodingResources> {
    let word_lm = train_lm(&corpus.text, lm.word_order)?;
    let char_lm = train_lm(&char_sentences(&corpus.text, &corpus.lexicon)?, lm.char_order)?;
    let graph = graph_lexicon
        .map_or_else(|| Ok(corpus.lexicon.clone()), load_lexicon)
        .and_then(|lex| build_tlg_from(&lex, &word_lm))
        .map_err(|e| e.to_string());
    Ok(DecodingResources {
        word_lm,
        char_lm,
        graph,
    })
}

struct Stage {
    model: RefModel,
}

struct UnsupStage {
    encoder: RefModel,
    finetuned: Stage,
}

struct Runner<'a> {
    plan: &'a ExperimentPlan,
    out: PathBuf,
    corpus: LoadedCorpus,
    decoder: Decoder,
    graph_error: Option<String>,
    supervised: Option<std::result::Result<Stage, String>>,
    unsup: Vec<UnsupStage>,
    unsup_error: Option<String>,
    durations: BTreeMap<String, f64>,
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Runner<'_> {
    fn timed<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let start = Instant::now();
        let out = f(self);
        *self.durations.entry(name.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    fn tokens(&self) -> usize {
        self.decoder.tokens.len()
    }

    fn supervised_stage(&mut self) -> std::result::Result<&Stage, String> {
        if self.supervised.is_none() {
            let result = self.timed("train/supervised", |r| -> Result<Stage> {
                let data = ctc_examples(&r.corpus.supervised, &r.decoder.tokens, &r.corpus.lexicon)?;
                let (model, report) = train_ctc_model(
                    None,
                    r.plan.arch,
                    &data,
                    r.tokens(),
                    &r.plan.supervised,
                    r.plan.supervised_seed,
                )?;
                let dir = r.out.join("models");
                mkdir(&dir)?;
                model.save(dir.join("supervised.wsam"))?;
                write_json(&report, &dir.join("supervised.train.json"))?;
                Ok(Stage { model })
            });
            self.supervised = Some(result.map_err(|e| format!("supervised training: {e}")));
        }
        self.supervised.as_ref().unwrap().as_ref().map_err(Clone::clone)
    }

    /// Runs pretraining iterations up to `n`, reusing earlier ones.
    fn unsup_stage(&mut self, n: usize) -> std::result::Result<&UnsupStage, String> {
        while self.unsup.len() < n && self.unsup_error.is_none() {
            let bootstrap = self.supervised_stage()?.model.clone();
            let i = self.unsup.len() + 1;
            let result = self.timed(&format!("train/unsup_iter{i}"), |r| -> Result<UnsupStage> {
                let prev = r.unsup.last().map_or(&bootstrap, |s| &s.encoder);
                let it = unsup_iteration(Some(prev), &r.corpus.untranscribed, &r.plan.unsup, i)?;
                let data = ctc_examples(&r.corpus.supervised, &r.decoder.tokens, &r.corpus.lexicon)?;
                let (model, report) = train_ctc_model(
                    Some(&it.model),
                    r.plan.arch,
                    &data,
                    r.tokens(),
                    &r.plan.supervised,
                    r.plan.supervised_seed.wrapping_add(i as u64),
                )?;
                let dir = r.out.join("unsup").join(format!("iter{i}"));
                mkdir(&dir)?;
                it.kmeans.model.save(dir.join("centroids.wskm"))?;
                write_json(&it.kmeans.distortion_history, &dir.join("distortion.json"))?;
                it.targets.save(dir.join("targets.jsonl"))?;
                it.model.save(dir.join("pretrained.wsam"))?;
                write_json(&it.report, &dir.join("pretrain.train.json"))?;
                model.save(dir.join("finetuned.wsam"))?;
                write_json(&report, &dir.join("finetune.train.json"))?;
                Ok(UnsupStage {
                    encoder: it.model,
                    finetuned: Stage { model },
                })
            });
            match result {
                Ok(s) => self.unsup.push(s),
                Err(e) => self.unsup_error = Some(format!("unsupervised iteration {i}: {e}")),
            }
        }
        match &self.unsup_error {
            Some(e) if self.unsup.len() < n => Err(e.clone()),
            _ => Ok(&self.unsup[n - 1]),
        }
    }

    /// Evaluates a model under every planned decode mode.
    fn evaluate_row(&mut self, row: &str, model: &RefModel, cells: &mut Vec<Cell>) -> Result<()> {
        let dir = self.out.join("eval").join(row.replace('/', "_"));
        mkdir(&dir)?;
        for &mode in &self.plan.decode_modes {
            let missing_graph = (mode == DecodeMode::CtcWfst).then(|| self.graph_error.clone()).flatten();
            let outcome = match missing_graph {
                Some(reason) => Err(format!("decoding graph unavailable: {reason}")),
                None => self
                    .timed(&format!("eval/{row}/{mode}"), |r| evaluate(model, &r.corpus.tests, mode, &r.decoder))
                    .map_err(|e| e.to_string()),
            };
            match outcome {
                Ok(eval) => {
                    write_json(&eval, &dir.join(format!("{mode}.json")))?;
                    for domain in &self.corpus.domains {
                        let score = eval.wer.per_domain.get(domain);
                        log::info!(
                            "[{row}/{mode}/{domain}] WER {}",
                            score.map_or("n/a".to_string(), |s| format!("{:.4}", s.wer))
                        );
                        cells.push(Cell {
                            recipe: row.into(),
                            mode,
                            domain: domain.clone(),
                            status: if score.is_some() { CellStatus::Ok } else { CellStatus::Failed },
                            wer: score.map(|s| s.wer),
                            errors: score.map(|s| s.errors),
                            reference_words: score.map(|s| s.reference_words),
                            reason: score.is_none().then(|| "no test utterances".to_string()),
                        });
                    }
                }
                Err(reason) => {
                    log::warn!("[{row}/{mode}] failed: {reason}");
                    for domain in &self.corpus.domains {
                        cells.push(failed_cell(row, mode, domain, &reason));
                    }
                }
            }
        }
        Ok(())
    }

    fn fail_rows(&self, recipe: &Recipe, reason: &str, cells: &mut Vec<Cell>) {
        log::warn!("[{}] failed: {reason}", recipe.name);
        for row in recipe.rows() {
            for &mode in &self.plan.decode_modes {
                for domain in &self.corpus.domains {
                    cells.push(failed_cell(&row, mode, domain, reason));
                }
            }
        }
    }

    /// Models for each row of a recipe, final model first.
    fn recipe_models(&mut self, recipe: &Recipe) -> std::result::Result<Vec<(String, RefModel)>, String> {
        let name = &recipe.name;
        match recipe.kind {
            RecipeKind::Supervised => Ok(vec![(name.clone(), self.supervised_stage()?.model.clone())]),
            RecipeKind::Unsup => {
                let n = recipe.unsup_iterations;
                let mut rows = vec![(name.clone(), self.unsup_stage(n)?.finetuned.model.clone())];
                if n > 1 {
                    for i in 1..=n {
                        rows.push((format!("{name}/iter{i}"), self.unsup[i - 1].finetuned.model.clone()));
                    }
                }
                Ok(rows)
            }
            RecipeKind::Sst | RecipeKind::UnsupThenSst => {
                let (initial, encoder) = if recipe.kind == RecipeKind::Sst {
                    (self.supervised_stage()?.model.clone(), None)
                } else {
                    let s = self.unsup_stage(recipe.unsup_iterations)?;
                    (s.finetuned.model.clone(), Some(s.encoder.clone()))
                };
                let config = SstConfig {
                    mode: recipe.transcription,
                    selection: self.plan.sst.selection,
                    iterations: recipe.sst_iterations,
                    train: self.plan.sst.train.clone(),
                    seed: self.plan.sst.seed,
                };
                if recipe.transcription == DecodeMode::CtcWfst {
                    if let Some(e) = &self.graph_error {
                        return Err(format!("decoding graph unavailable: {e}"));
                    }
                }
                let iterations = self.timed(&format!("train/{name}"), |r| {
                    let data = SstData {
                        supervised: &r.corpus.supervised,
                        untranscribed: &r.corpus.untranscribed,
                        tests: &[],
                        lexicon: &r.corpus.lexicon,
                    };
                    run_sst(&initial, encoder.as_ref(), r.plan.arch, &data, &r.decoder, &[], &config)
                });
                let iterations = iterations.map_err(|e| format!("SST: {e}"))?;
                let dir = self.out.join("sst").join(name);
                let persist = || -> Result<()> {
                    for (i, it) in iterations.iter().enumerate() {
                        let d = dir.join(format!("iter{}", i + 1));
                        mkdir(&d)?;
                        write_pseudo(&it.transcription.pseudo, d.join("pseudo.jsonl"))?;
                        write_json(&it.transcription.failed, &d.join("failed.json"))?;
                        it.model.save(d.join("model.wsam"))?;
                        write_json(&it.train, &d.join("train.json"))?;
                    }
                    Ok(())
                };
                persist().map_err(|e| e.to_string())?;
                let n = iterations.len();
                let mut rows = vec![(name.clone(), iterations[n - 1].model.clone())];
                if n > 1 {
                    for (i, it) in iterations.into_iter().enumerate() {
                        rows.push((format!("{name}/iter{}", i + 1), it.model));
                    }
                }
                Ok(rows)
            }
        }
    }
}

fn failed_cell(row: &str, mode: DecodeMode, domain: &str, reason: &str) -> Cell {
    Cell {
        recipe: row.into(),
        mode,
        domain: domain.into(),
        status: CellStatus::Failed,
        wer: None,
        errors: None,
        reference_words: None,
        reason: Some(reason.into()),
    }
}

/// Executes the plan. Stage failures mark the affected cells failed and the run
/// continues; only I/O on the output directory and an unusable corpus abort it.
pub fn run_plan(plan: &ExperimentPlan) -> Result<ResultGrid> {
    plan.validate()?;
    let out = plan.output_dir.clone();
    mkdir(&out)?;
    // The echo names its own directory so artifacts do not depend on where they live.
    let echo = ExperimentPlan {
        output_dir: PathBuf::from("."),
        ..plan.clone()
    };
    write_json(&echo, &out.join(PLAN_ECHO_FILE))?;
    let mut durations = BTreeMap::new();

    let start = Instant::now();
    let corpus = match &plan.corpus {
        CorpusSource::Synth(spec) => {
            let synth = synthesize_corpus(spec)?;
            synth.write(out.join("corpus"))?;
            let mut tests = Vec::new();
            for utts in synth.tests.values() {
                tests.extend(utts.iter().cloned());
            }
            LoadedCorpus {
                domains: synth.tests.keys().cloned().collect(),
                supervised: synth.supervised,
                untranscribed: synth.untranscribed,
                tests,
                lexicon: synth.lexicon,
                text: synth.text,
            }
        }
        CorpusSource::Dir(dir) => LoadedCorpus::from_dir(dir)?,
    };
    corpus.check_disjoint()?;
    durations.insert("corpus".to_string(), start.elapsed().as_secs_f64());

    let start = Instant::now();
    let resources = build_resources(&corpus, plan.lm, plan.graph_lexicon.as_deref())?;
    let lm_dir = out.join("lm");
    mkdir(&lm_dir)?;
    write_arpa(&resources.word_lm, lm_dir.join("word.arpa"))?;
    write_arpa(&resources.char_lm, lm_dir.join("char.arpa"))?;
    let tokens = TokenSet::from_lexicon(&corpus.lexicon)?;
    let scorer = CharLmScorer::new(resources.char_lm, &tokens)?;
    let (graph, graph_error) = match resources.graph {
        Ok(g) => {
            let dir = out.join("graph");
            mkdir(&dir)?;
            g.save(&dir, "tlg")?;
            (Some(g), None)
        }
        Err(e) => {
            log::warn!("decoding graph unavailable: {e}");
            (None, Some(e))
        }
    };
    if let Some(path) = &plan.graph_lexicon {
        if path.is_file() {
            save_lexicon(&load_lexicon(path)?, lm_dir.join("graph_lexicon.tsv"))?;
        }
    }
    durations.insert("resources".to_string(), start.elapsed().as_secs_f64());

    let mut runner = Runner {
        plan,
        out: out.clone(),
        decoder: Decoder::new(&corpus.lexicon, Some(scorer), graph, plan.decode)?,
        corpus,
        graph_error,
        supervised: None,
        unsup: Vec::new(),
        unsup_error: None,
        durations,
    };

    let mut cells = Vec::new();
    for recipe in &plan.recipes {
        match runner.recipe_models(recipe) {
            Ok(rows) => {
                for (row, model) in rows {
                    runner.evaluate_row(&row, &model, &mut cells)?;
                }
            }
            Err(reason) => runner.fail_rows(recipe, &reason, &mut cells),
        }
    }

    let grid = ResultGrid {
        cells,
        seeds: plan.seeds(),
        durations: runner.durations,
    };
    write_json(&grid, &out.join(GRID_FILE))?;
    let claims = plan.claims.clone().unwrap_or_else(default_claims);
    write_json(&compare(&grid, &claims), &out.join(CLAIMS_FILE))?;
    write_json(&grid.durations, &out.join(TIMINGS_FILE))?;
    write_json(&hash_tree(&out)?, &out.join(ARTIFACTS_FILE))?;
    Ok(grid)
}

/// SHA-256 of every file under `root`, keyed by relative path with '/' separators.
/// The hash manifest itself and the timings file are left out.
pub fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel: Vec<String> = path
                .strip_prefix(root)
                .expect("walk stays under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            let rel = rel.join("/");
            if rel == ARTIFACTS_FILE || rel == TIMINGS_FILE {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let digest = Sha256::digest(&bytes);
            out.insert(rel, digest.iter().map(|b| format!("{b:02x}")).collect());
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}
