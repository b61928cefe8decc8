//! Command-line interface. Each subcommand layers its configuration as
//! defaults < `--config` JSON < flags, and writes the effective configuration to
//! `config.json` in its output directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::am::{AcousticModel, ArchConfig, RefModel, TrainConfig};
use crate::corpus::{
    load_lexicon, load_manifest, read_text_corpus, synthesize_corpus, Lexicon, SynthSpec, TokenSet, Utterance,
};
use crate::error::{Error, Result};
use crate::ngram::{char_sentences, perplexity, read_arpa, train_lm, write_arpa, CharLmScorer};
use crate::pipeline::{run_plan, ExperimentPlan, GRID_FILE};
use crate::score::{align, corpus_wer, ScoredPair};
use crate::sst::{
    ctc_examples, evaluate, run_sst, train_ctc_model, transcribe, write_pseudo, DecodeMode, DecodeParams, Decoder,
    SstConfig, SstData,
};
use crate::unsup::{collect_points, generate_targets, kmeans_fit, pretrain, ClusterInput, ClusterTargets, UnsupConfig};
use crate::wfst::{build_tlg_from, Wfst};

pub const CONFIG_ECHO: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "asrkit", version, about = "CTC speech recognition with WFST decoding, pseudo-label pretraining and self-training")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-domain corpus.
    Synth(SynthArgs),
    /// Train a Witten-Bell backoff LM and write it as ARPA.
    LmTrain(LmTrainArgs),
    /// Compose the token, lexicon and grammar transducers.
    Graph(GraphArgs),
    /// Decode a manifest with a trained model.
    Decode(DecodeArgs),
    /// Fit k-means on frame embeddings and label every frame.
    Cluster(ClusterArgs),
    /// Train a fresh model on cluster targets with masked inputs.
    Pretrain(PretrainArgs),
    /// Train a CTC character model, optionally from a pretrained hidden layer.
    Finetune(FinetuneArgs),
    /// Self-train with pseudotranscripts.
    Sst(SstArgs),
    /// Execute an experiment plan.
    Run(RunArgs),
    /// Word error rate of hypotheses against references.
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON file with configuration values; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LmUnit {
    Word,
    Char,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LmTrainConfig {
    order: usize,
    unit: LmUnit,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            order: 3,
            unit: LmUnit::Word,
        }
    }
}

#[derive(Args, Debug)]
struct LmTrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    text: PathBuf,
    /// Required for character LMs: spells words into characters.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long, value_enum)]
    unit: Option<LmUnit>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    lexicon: PathBuf,
    /// Word-level ARPA model.
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Greedy,
    Fusion,
    CtcWfst,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Greedy => DecodeMode::Greedy,
            ModeArg::Fusion => DecodeMode::Fusion,
            ModeArg::CtcWfst => DecodeMode::CtcWfst,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct DecodeFlags {
    #[arg(long)]
    beam_size: Option<usize>,
    /// Fusion LM weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Per-label bonus.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    graph_beam: Option<f64>,
    #[arg(long)]
    acoustic_scale: Option<f64>,
    #[arg(long)]
    max_active: Option<usize>,
}

impl DecodeFlags {
    fn apply(&self, p: &mut DecodeParams) {
        set(&mut p.beam_size, self.beam_size);
        set(&mut p.fusion_weight, self.alpha);
        set(&mut p.length_bonus, self.beta);
        set(&mut p.graph_beam, self.graph_beam);
        set(&mut p.acoustic_scale, self.acoustic_scale);
        set(&mut p.max_active, self.max_active);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DecodeCommandConfig {
    mode: DecodeMode,
    decode: DecodeParams,
}

impl Default for DecodeCommandConfig {
    fn default() -> Self {
        DecodeCommandConfig {
            mode: DecodeMode::Greedy,
            decode: DecodeParams::default(),
        }
    }
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Directory holding tlg.fst and its symbol tables (ctc-wfst mode).
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Character ARPA model (fusion mode).
    #[arg(long)]
    char_lm: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ClusterConfig {
    k: usize,
    kmeans_iters: usize,
    stride: usize,
    cluster_input: ClusterInput,
    seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let u = UnsupConfig::default();
        ClusterConfig {
            k: u.k,
            kmeans_iters: u.kmeans_iters,
            stride: u.stride,
            cluster_input: u.cluster_input,
            seed: u.seed,
        }
    }
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[command(flatten)]
    common: Common,
    /// Model whose hidden layer provides the embeddings.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Cluster the raw features instead of embeddings.
    #[arg(long)]
    raw_features: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.epochs, self.epochs);
        set(&mut t.seed, self.seed);
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Number of clusters; defaults to one more than the largest target.
    #[arg(long)]
    k: Option<usize>,
    /// Continue from this model's hidden layer instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long)]
    mask_span: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FinetuneConfig {
    arch: ArchConfig,
    train: TrainConfig,
    seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            seed: 5,
        }
    }
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Pretrained model; its head is replaced. Trains from scratch when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
struct SstCommandConfig {
    sst: SstConfig,
    decode: DecodeParams,
    arch: ArchConfig,
}


#[derive(Args, Debug)]
struct SstArgs {
    #[command(flatten)]
    common: Common,
    /// Model that produces the first pseudotranscripts.
    #[arg(long)]
    model: PathBuf,
    /// Pretrained model whose hidden layer seeds every retraining.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    supervised: PathBuf,
    #[arg(long)]
    untranscribed: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    /// Held-out manifests scored after each iteration.
    #[arg(long)]
    test: Vec<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    char_lm: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    plan: PathBuf,
    /// Overrides the plan's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    /// JSON lines with `id` and `transcript` or `words`, optionally `domain`.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// JSON lines with `id` and `words`.
    #[arg(long)]
    hyp: PathBuf,
    /// Output directory; the report goes to standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Missing or conflicting arguments; exit status 1.
#[derive(Debug)]
struct UsageError(String);

enum Failure {
    Usage(UsageError),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Malformed or unreadable `--config` files are usage errors.
fn layered<T: Default + DeserializeOwned>(common: &Common) -> CliResult<T> {
    match &common.config {
        None => Ok(T::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| UsageError(format!("--config {}: {e}", path.display())).into())
        }
    }
}

/// For subcommands configured only by flags: the file must hold an empty object.
fn no_config(common: &Common) -> CliResult<()> {
    if let Some(path) = &common.config {
        let map: BTreeMap<String, serde_json::Value> = layered(common)?;
        if let Some(k) = map.keys().next() {
            return Err(UsageError(format!("--config {}: unknown key {k:?}", path.display())).into());
        }
    }
    Ok(())
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo<T: Serialize>(config: &T, out: &Path) -> Result<()> {
    mkdir(out)?;
    write_json(config, &out.join(CONFIG_ECHO))
}

fn load_graph(dir: &Path) -> Result<Wfst> {
    Wfst::load(dir, "tlg")
}

fn decoder_for(
    lexicon: &Lexicon,
    mode: DecodeMode,
    graph: Option<&Path>,
    char_lm: Option<&Path>,
    params: DecodeParams,
) -> CliResult<Decoder> {
    let tokens = TokenSet::from_lexicon(lexicon)?;
    let fusion = match (mode, char_lm) {
        (DecodeMode::Fusion, None) => return Err(UsageError("--mode fusion requires --char-lm".into()).into()),
        (_, Some(p)) => Some(CharLmScorer::new(read_arpa(p)?, &tokens)?),
        (_, None) => None,
    };
    let graph = match (mode, graph) {
        (DecodeMode::CtcWfst, None) => return Err(UsageError("--mode ctc-wfst requires --graph".into()).into()),
        (_, Some(p)) => Some(load_graph(p)?),
        (_, None) => None,
    };
    Ok(Decoder::new(lexicon, fusion, graph, params)?)
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let mut spec: SynthSpec = layered(&a.common)?;
    set(&mut spec.seed, a.seed);
    spec.validate()?;
    echo(&spec, &a.out)?;
    let corpus = synthesize_corpus(&spec)?;
    corpus.write(&a.out)?;
    log::info!(
        "wrote {} supervised, {} untranscribed and {} test utterances to {}",
        corpus.supervised.len(),
        corpus.untranscribed.len(),
        corpus.tests.values().map(Vec::len).sum::<usize>(),
        a.out.display()
    );
    Ok(())
}

fn cmd_lm_train(a: LmTrainArgs) -> CliResult<()> {
    let mut cfg: LmTrainConfig = layered(&a.common)?;
    set(&mut cfg.order, a.order);
    set(&mut cfg.unit, a.unit);
    let text = read_text_corpus(&a.text)?;
    let sentences = match cfg.unit {
        LmUnit::Word => text,
        LmUnit::Char => {
            let lex = a
                .lexicon
                .as_ref()
                .ok_or_else(|| UsageError("--unit char requires --lexicon".into()))?;
            char_sentences(&text, &load_lexicon(lex)?)?
        }
    };
    echo(&cfg, &a.out)?;
    let lm = train_lm(&sentences, cfg.order)?;
    write_arpa(&lm, a.out.join("lm.arpa"))?;
    let stats = serde_json::json!({
        "order": lm.order(),
        "vocab": lm.vocab().len(),
        "ngrams": (1..=lm.order()).map(|n| lm.ngram_count(n)).collect::<Vec<_>>(),
        "train_perplexity": perplexity(&lm, &sentences)?,
    });
    write_json(&stats, &a.out.join("lm.json"))?;
    Ok(())
}

fn cmd_graph(a: GraphArgs) -> CliResult<()> {
    let cfg = serde_json::json!({ "lexicon": a.lexicon, "lm": a.lm });
    no_config(&a.common)?;
    echo(&cfg, &a.out)?;
    let lexicon = load_lexicon(&a.lexicon)?;
    let lm = read_arpa(&a.lm)?;
    let g = build_tlg_from(&lexicon, &lm)?;
    g.save(&a.out, "tlg")?;
    write_json(
        &serde_json::json!({"states": g.num_states(), "arcs": g.num_arcs()}),
        &a.out.join("graph.json"),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct HypLine<'a> {
    id: &'a str,
    words: &'a [String],
}

fn cmd_decode(a: DecodeArgs) -> CliResult<()> {
    let mut cfg: DecodeCommandConfig = layered(&a.common)?;
    set(&mut cfg.mode, a.mode.map(Into::into));
    a.decode.apply(&mut cfg.decode);
    let lexicon = load_lexicon(&a.lexicon)?;
    let decoder = decoder_for(&lexicon, cfg.mode, a.graph.as_deref(), a.char_lm.as_deref(), cfg.decode)?;
    echo(&cfg, &a.out)?;
    let model = RefModel::load(&a.model)?;
    let utts = load_manifest(&a.manifest)?.load_utterances()?;
    let scored = utts.iter().all(|u| u.transcript.is_some());
    if scored && !utts.is_empty() {
        let eval = evaluate(&model, &utts, cfg.mode, &decoder)?;
        write_hyps(&eval.hypotheses, &a.out.join("hyps.jsonl"))?;
        write_json(&eval.wer, &a.out.join("wer.json"))?;
        write_json(&eval.failed, &a.out.join("failed.json"))?;
    } else {
        decoder.ready(cfg.mode, model.num_outputs())?;
        let audio: Vec<_> = utts.into_iter().map(Utterance::into_untranscribed).collect();
        let t = transcribe(&model, &audio, cfg.mode, &decoder);
        write_pseudo(&t.pseudo, a.out.join("hyps.jsonl"))?;
        write_json(&t.failed, &a.out.join("failed.json"))?;
    }
    Ok(())
}

fn write_hyps(hyps: &[(String, Vec<String>)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (id, words) in hyps {
        out.push_str(&serde_json::to_string(&HypLine { id, words })?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn cmd_cluster(a: ClusterArgs) -> CliResult<()> {
    let mut cfg: ClusterConfig = layered(&a.common)?;
    set(&mut cfg.k, a.k);
    set(&mut cfg.seed, a.seed);
    if a.raw_features {
        cfg.cluster_input = ClusterInput::RawFeatures;
    }
    let model = match (&a.model, cfg.cluster_input) {
        (Some(p), _) => Some(RefModel::load(p)?),
        (None, ClusterInput::Embedding) => {
            return Err(UsageError("clustering embeddings requires --model (or use --raw-features)".into()).into())
        }
        (None, ClusterInput::RawFeatures) => None,
    };
    echo(&cfg, &a.out)?;
    let utts = load_manifest(&a.manifest)?.load_untranscribed()?;
    let (dims, points) = collect_points(model.as_ref(), cfg.cluster_input, &utts, cfg.stride)?;
    let fit = kmeans_fit(&points, dims, cfg.k, cfg.kmeans_iters, cfg.seed)?;
    let targets = generate_targets(model.as_ref(), cfg.cluster_input, &utts, &fit.model)?;
    fit.model.save(a.out.join("centroids.wskm"))?;
    targets.save(a.out.join("targets.jsonl"))?;
    write_json(
        &serde_json::json!({
            "k": cfg.k,
            "distortion": fit.distortion(),
            "distortion_history": fit.distortion_history,
            "converged": fit.converged,
        }),
        &a.out.join("kmeans.json"),
    )?;
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> CliResult<()> {
    let mut cfg: UnsupConfig = layered(&a.common)?;
    a.train.apply(&mut cfg.train);
    if a.mask_prob.is_some() || a.mask_span.is_some() {
        let mut m = cfg.train.input_mask.unwrap_or_default();
        set(&mut m.prob, a.mask_prob);
        set(&mut m.span, a.mask_span);
        cfg.train.input_mask = Some(m);
    }
    let targets = ClusterTargets::load(&a.targets)?;
    let observed = targets.entries().iter().flat_map(|e| e.targets.iter().copied()).max().map_or(1, |m| m + 1);
    let k = a.k.unwrap_or(observed.max(cfg.k.min(observed)));
    cfg.k = k;
    cfg.continue_training = a.init.is_some();
    echo(&cfg, &a.out)?;
    let init = a.init.as_ref().map(RefModel::load).transpose()?;
    let utts = load_manifest(&a.manifest)?.load_untranscribed()?;
    let (model, report) = pretrain(init.as_ref(), &utts, &targets, k, &cfg, cfg.seed)?;
    model.save(a.out.join("model.wsam"))?;
    write_json(&report, &a.out.join("train.json"))?;
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> CliResult<()> {
    let mut cfg: FinetuneConfig = layered(&a.common)?;
    a.train.apply(&mut cfg.train);
    echo(&cfg, &a.out)?;
    let lexicon = load_lexicon(&a.lexicon)?;
    let tokens = TokenSet::from_lexicon(&lexicon)?;
    let init = a.model.as_ref().map(RefModel::load).transpose()?;
    let utts = load_manifest(&a.manifest)?.load_utterances()?;
    let data = ctc_examples(&utts, &tokens, &lexicon)?;
    let (model, report) = train_ctc_model(init.as_ref(), cfg.arch, &data, tokens.len(), &cfg.train, cfg.seed)?;
    model.save(a.out.join("model.wsam"))?;
    write_json(&report, &a.out.join("train.json"))?;
    Ok(())
}

fn cmd_sst(a: SstArgs) -> CliResult<()> {
    let mut cfg: SstCommandConfig = layered(&a.common)?;
    set(&mut cfg.sst.mode, a.mode.map(Into::into));
    set(&mut cfg.sst.iterations, a.iterations);
    a.decode.apply(&mut cfg.decode);
    let lexicon = load_lexicon(&a.lexicon)?;
    let mut decoder = decoder_for(&lexicon, cfg.sst.mode, a.graph.as_deref(), a.char_lm.as_deref(), cfg.decode)?;
    decoder.params = cfg.decode;
    echo(&cfg, &a.out)?;
    let initial = RefModel::load(&a.model)?;
    let encoder = a.encoder.as_ref().map(RefModel::load).transpose()?;
    let supervised = load_manifest(&a.supervised)?.load_utterances()?;
    let untranscribed = load_manifest(&a.untranscribed)?.load_untranscribed()?;
    let mut tests = Vec::new();
    for t in &a.test {
        tests.extend(load_manifest(t)?.load_utterances()?);
    }
    let mut eval_modes = vec![DecodeMode::Greedy];
    if decoder.fusion.is_some() {
        eval_modes.push(DecodeMode::Fusion);
    }
    if decoder.graph.is_some() {
        eval_modes.push(DecodeMode::CtcWfst);
    }
    let data = SstData {
        supervised: &supervised,
        untranscribed: &untranscribed,
        tests: &tests,
        lexicon: &lexicon,
    };
    let iterations = run_sst(&initial, encoder.as_ref(), cfg.arch, &data, &decoder, &eval_modes, &cfg.sst)?;
    let mut report = Vec::new();
    for (i, it) in iterations.iter().enumerate() {
        let dir = a.out.join(format!("iter{}", i + 1));
        mkdir(&dir)?;
        write_pseudo(&it.transcription.pseudo, dir.join("pseudo.jsonl"))?;
        it.model.save(dir.join("model.wsam"))?;
        write_json(&it.train, &dir.join("train.json"))?;
        report.push(serde_json::json!({
            "iteration": i + 1,
            "pseudotranscripts": it.selected,
            "failed": it.transcription.failed,
            "wer": it.wer.iter().map(|(m, w)| (m.to_string(), w)).collect::<BTreeMap<_, _>>(),
        }));
    }
    write_json(&report, &a.out.join("report.json"))?;
    Ok(())
}

fn cmd_run(a: RunArgs) -> CliResult<()> {
    if a.common.config.is_some() {
        return Err(UsageError("run is configured by --plan; --config is not accepted here".into()).into());
    }
    let mut plan = ExperimentPlan::load(&a.plan)?;
    set(&mut plan.output_dir, a.out);
    let grid = run_plan(&plan)?;
    let failed = grid.failed().count();
    log::info!(
        "{} cells ({} failed); grid at {}",
        grid.cells.len(),
        failed,
        plan.output_dir.join(GRID_FILE).display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct ScoreLine {
    id: String,
    #[serde(default)]
    words: Option<Vec<String>>,
    #[serde(default)]
    transcript: Option<Vec<String>>,
    #[serde(default)]
    domain: Option<String>,
}

fn read_score_lines(path: &Path) -> Result<Vec<ScoreLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(format!("{}:{}", path.display(), i + 1), e.to_string())))
        .collect()
}

fn cmd_score(a: ScoreArgs) -> CliResult<()> {
    no_config(&a.common)?;
    let refs = read_score_lines(&a.reference)?;
    let hyps: BTreeMap<String, Vec<String>> = read_score_lines(&a.hyp)?
        .into_iter()
        .map(|l| (l.id, l.words.or(l.transcript).unwrap_or_default()))
        .collect();
    let mut pairs: Vec<ScoredPair> = Vec::new();
    let mut utterances = Vec::new();
    for r in refs {
        let reference = r
            .transcript
            .or(r.words)
            .ok_or_else(|| Error::utterance(&r.id, "reference line has no transcript"))?;
        let hyp = hyps.get(&r.id).cloned().unwrap_or_default();
        let rep = align(&reference, &hyp);
        utterances.push(serde_json::json!({
            "id": r.id, "substitutions": rep.substitutions, "deletions": rep.deletions,
            "insertions": rep.insertions, "wer": rep.wer,
        }));
        pairs.push((r.domain.unwrap_or_else(|| "all".into()), reference, hyp));
    }
    let report = serde_json::json!({ "corpus": corpus_wer(&pairs), "utterances": utterances });
    match &a.out {
        Some(dir) => {
            echo(&serde_json::json!({}), dir)?;
            write_json(&report, &dir.join("wer.json"))?;
        }
        None => {
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            // A closed reader (e.g. `| head`) is not a failure of the command.
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    return Err(Failure::Runtime(Error::Io { path: PathBuf::from("<stdout>"), source: e }))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs the subcommand; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::LmTrain(a) => cmd_lm_train(a),
        Command::Graph(a) => cmd_graph(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Sst(a) => cmd_sst(a),
        Command::Run(a) => cmd_run(a),
        Command::Score(a) => cmd_score(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(UsageError(msg))) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
