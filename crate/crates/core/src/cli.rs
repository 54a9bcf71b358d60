//! `ctxnmt` command line: one subcommand per pipeline stage. Each run writes
//! `<command>.manifest.json` into its output directory.
//!
//! A `--config` file is TOML with one table per module (`[corpus]`,
//! `[context]`, `[model]`, `[train]`, `[metrics]`, ...). Keys are flag names
//! with `_` or `-`; every key that names a flag of the running subcommand is
//! applied, and flags given on the command line take precedence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::contextizer::{build_example, ContextConfig};
use crate::corpus::{
    corpus_stats, generate_synthetic_corpus, load_corpus, CorpusSet, LoadOptions, SceneTag, Split, SynthSpec,
};
use crate::metrics::{
    bleu, cxmi, emit_bleu_summary, emit_cxmi_report, honorifics_pcxmi, score_logprobs, BleuMode, BleuOptions,
    CxmiReport,
};
use crate::model::{load_checkpoint, save_checkpoint, CrossAttention, ModelConfig, Strategy, Transformer};
use crate::tokenizer::{build_vocab, decode, honorific_ids, Side, TargetMode, TokenSequence, Vocabulary, EOS};
use crate::trainer::{finite_difference_check, log_to_jsonl, train, TrainConfig};

const SCHEMA: &str = "bsd-json-v1";

#[derive(Debug, Parser)]
#[command(name = "ctxnmt", version, about = "Context-aware dialogue translation experiments", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Validate a corpus and print split statistics.
    Ingest(IngestArgs),
    /// Generate the synthetic politeness corpus.
    Synth(SynthArgs),
    /// Build a vocabulary from the training split.
    Vocab(VocabArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Translate a split with a checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Bleu(BleuArgs),
    /// CXMI and honorifics P-CXMI of one checkpoint.
    Cxmi(CxmiArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Synth(_) => "synth",
            Command::Vocab(_) => "vocab",
            Command::Train(_) => "train",
            Command::Translate(_) => "translate",
            Command::Bleu(_) => "bleu",
            Command::Cxmi(_) => "cxmi",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Ingest(a) => &a.common,
            Command::Synth(a) => &a.common,
            Command::Vocab(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Translate(a) => &a.common,
            Command::Bleu(a) => &a.common,
            Command::Cxmi(a) => &a.common,
            Command::Gradcheck(a) => &a.common,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct Common {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// TOML config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CorpusArgs {
    /// Corpus directory (train/dev/test.json) or single file.
    #[arg(long = "in", alias = "corpus")]
    input: PathBuf,
    #[arg(long, default_value = SCHEMA)]
    schema: String,
    /// Scene for documents without a scene tag; "none" rejects them.
    #[arg(long, default_value = "meeting")]
    default_scene: String,
    /// Split receiving the documents of a single-file corpus.
    #[arg(long, default_value = "train")]
    single_file_split: String,
}

impl CorpusArgs {
    fn load(&self) -> Result<CorpusSet> {
        let default_scene = match self.default_scene.as_str() {
            "none" => None,
            s => Some(s.parse::<SceneTag>().map_err(anyhow::Error::msg)?),
        };
        let opts = LoadOptions {
            default_scene,
            single_file_split: self.single_file_split.parse().map_err(anyhow::Error::msg)?,
        };
        Ok(load_corpus(&self.input, &self.schema, &opts)?)
    }
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    /// "default" or a JSON file with synthesis settings.
    #[arg(long, default_value = "default")]
    spec: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args, Serialize)]
struct VocabArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    #[arg(long, default_value = "character")]
    target_mode: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args, Serialize)]
struct ContextArgs {
    /// Model family such as 1-1, 2-1 or 1-3.
    #[arg(long, default_value = "1-1")]
    family: String,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "false")]
    speaker_tags: bool,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "false")]
    scene_tag: bool,
    /// Resample the context size per example and epoch.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "false")]
    dynamic: bool,
    #[arg(long)]
    max_src_len: Option<usize>,
    #[arg(long)]
    max_tgt_len: Option<usize>,
}

impl ContextArgs {
    fn resolve(&self) -> Result<ContextConfig> {
        let mut cfg = ContextConfig::from_family(&self.family)?
            .with_speaker_tags(self.speaker_tags)
            .with_scene_tag(self.scene_tag)
            .with_dynamic(self.dynamic);
        if let Some(n) = self.max_src_len {
            cfg.max_src_len = n;
        }
        if let Some(n) = self.max_tgt_len {
            cfg.max_tgt_len = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum CrossAttentionArg {
    CoattMask,
    Full,
}

#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    layers_enc: usize,
    #[arg(long, default_value_t = 2)]
    layers_dec: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 256)]
    max_positions: usize,
    #[arg(long, value_enum, default_value = "coatt-mask")]
    cross_attention: CrossAttentionArg,
}

impl ModelArgs {
    fn resolve(&self) -> ModelConfig {
        ModelConfig {
            layers_enc: self.layers_enc,
            layers_dec: self.layers_dec,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            dropout: self.dropout,
            max_positions: self.max_positions,
            cross_attention: match self.cross_attention {
                CrossAttentionArg::CoattMask => CrossAttention::CoAttMask,
                CrossAttentionArg::Full => CrossAttention::Full,
            },
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct OptimArgs {
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 400)]
    warmup_steps: u64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 50)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Steps between dev evaluations; 0 means once per epoch.
    #[arg(long, default_value_t = 0)]
    eval_interval: u64,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    context: ContextArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum StrategyArg {
    Greedy,
    Beam,
}

#[derive(Debug, Args, Serialize)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value = "greedy")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 4)]
    beam_width: usize,
    /// Extra decoder positions allowed beyond the reference length.
    #[arg(long, default_value_t = 16)]
    max_extra: usize,
    /// Context size override (defaults to the trained size).
    #[arg(long)]
    context: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum BleuModeArg {
    Character,
    Whitespace,
}

#[derive(Debug, Args, Serialize)]
struct BleuArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, value_enum, default_value = "character")]
    mode: BleuModeArg,
    #[arg(long, default_value_t = 4)]
    max_n: usize,
    /// Add-one smoothing for n >= 2.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "false")]
    smooth: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args, Serialize)]
struct CxmiArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value = "test")]
    split: String,
    /// Context sizes compared against 0 (comma separated); defaults to
    /// 1..=trained maximum.
    #[arg(long, value_delimiter = ',')]
    context: Vec<usize>,
    /// Count the synthetic "+masu" marker as an honorific.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "true")]
    synthetic_honorific: bool,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 32)]
    d_ff: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 200)]
    probes: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    #[command(flatten)]
    common: Common,
}

/// Record of one run, written beside its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Input path to SHA-256 of its contents (directories hash their
    /// `*.json` files in name order).
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub version: String,
}

fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.to_string_lossy().ends_with(".manifest.json"))
            .collect();
        files.sort();
        for f in files {
            h.update(f.file_name().unwrap_or_default().to_string_lossy().as_bytes());
            h.update(fs::read(&f)?);
        }
    } else {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

struct Run {
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    artifacts: Vec<String>,
}

impl Run {
    fn new(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run {
            out: out.to_path_buf(),
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.artifacts.push(p.display().to_string());
        p
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.artifact(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    fn finish(self, command: &Command) -> Result<()> {
        let common = command.common();
        let manifest = RunManifest {
            command: command.name().to_string(),
            config: serde_json::to_value(command)?,
            seed: common.seed,
            inputs: self.inputs,
            artifacts: self.artifacts,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = self.out.join(format!("{}.manifest.json", command.name()));
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Turns the config file into `--flag=value` arguments for `subcommand`.
fn config_flags(path: &Path, subcommand: &str) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(subcommand) else {
        return Ok(Vec::new());
    };
    let known: Vec<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(String::from))
        .filter(|l| l != "config")
        .collect();
    let mut flags = Vec::new();
    let mut push = |key: &str, value: &toml::Value| -> Result<()> {
        let flag = key.replace('_', "-");
        if !known.contains(&flag) {
            log::debug!("config key {key:?} does not apply to {subcommand}");
            return Ok(());
        }
        let rendered = match value {
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            other => bail!("config key {key:?}: unsupported value {other}"),
        };
        flags.push(OsString::from(format!("--{flag}={rendered}")));
        Ok(())
    };
    for (key, value) in &table {
        match value {
            toml::Value::Table(section) => {
                for (k, v) in section {
                    push(k, v)?;
                }
            }
            v => push(key, v)?,
        }
    }
    Ok(flags)
}

/// Finds the subcommand name and `--config` value in raw argv.
fn prescan(argv: &[OsString]) -> (Option<(usize, String)>, Option<PathBuf>) {
    let names = ["ingest", "synth", "vocab", "train", "translate", "bleu", "cxmi", "gradcheck"];
    let sub = argv
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| a.to_str().filter(|s| names.contains(s)).map(|s| (i, s.to_string())));
    let mut config = None;
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = it.next().map(PathBuf::from);
        } else if let Some(v) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        }
    }
    (sub, config)
}

fn expand_argv(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let (sub, config) = prescan(&argv);
    let (Some((idx, name)), Some(config)) = (sub, config) else {
        return Ok(argv);
    };
    let flags = config_flags(&config, &name)?;
    let mut out: Vec<OsString> = argv[..=idx].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[idx + 1..]);
    Ok(out)
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 for domain errors, 2 for usage errors.
pub fn run(argv: Vec<OsString>) -> i32 {
    let argv = match expand_argv(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(command: &Command) -> Result<()> {
    let mut run = Run::new(&command.common().out)?;
    match command {
        Command::Ingest(a) => ingest(a, &mut run)?,
        Command::Synth(a) => synth(a, &mut run)?,
        Command::Vocab(a) => vocab(a, &mut run)?,
        Command::Train(a) => train_cmd(a, &mut run)?,
        Command::Translate(a) => translate(a, &mut run)?,
        Command::Bleu(a) => bleu_cmd(a, &mut run)?,
        Command::Cxmi(a) => cxmi_cmd(a, &mut run)?,
        Command::Gradcheck(a) => gradcheck(a, &mut run)?,
    }
    run.finish(command)
}

fn ingest(a: &IngestArgs, run: &mut Run) -> Result<()> {
    run.input(&a.corpus.input)?;
    let corpus = a.corpus.load()?;
    let stats = corpus_stats(&corpus);
    let mut text = String::new();
    let (mut sentences, mut scenarios) = (0, 0);
    for (split, s) in [("train", &stats.train), ("dev", &stats.dev), ("test", &stats.test)] {
        if s.sentences > 0 {
            text.push_str(&format!("{split}: {} sentences, {} scenarios\n", s.sentences, s.scenarios));
            sentences += s.sentences;
            scenarios += s.scenarios;
        }
    }
    text.push_str(&format!("total: {sentences} sentences, {scenarios} scenarios\n"));
    print!("{text}");
    run.write("stats.txt", &text)?;
    run.write("stats.json", serde_json::to_string_pretty(&stats)? + "\n")?;
    Ok(())
}

fn synth(a: &SynthArgs, run: &mut Run) -> Result<()> {
    let spec = if a.spec == "default" {
        SynthSpec::default()
    } else {
        let p = Path::new(&a.spec);
        run.input(p)?;
        serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
    };
    let corpus = generate_synthetic_corpus(&spec, a.common.seed)?;
    corpus.save_dir(&run.out)?;
    for split in Split::ALL {
        run.artifact(&format!("{split}.json"));
    }
    let stats = corpus_stats(&corpus);
    println!(
        "train: {}\ndev: {}\ntest: {}",
        stats.train, stats.dev, stats.test
    );
    Ok(())
}

fn vocab(a: &VocabArgs, run: &mut Run) -> Result<()> {
    run.input(&a.corpus.input)?;
    let corpus = a.corpus.load()?;
    let mode: TargetMode = a.target_mode.parse().map_err(anyhow::Error::msg)?;
    let vocab = build_vocab(&corpus, a.min_freq, mode)?;
    run.write("vocab.txt", vocab.to_file_string())?;
    println!("{} entries, hash {}", vocab.len(), vocab.content_hash());
    Ok(())
}

fn train_cmd(a: &TrainArgs, run: &mut Run) -> Result<()> {
    run.input(&a.corpus.input)?;
    run.input(&a.vocab)?;
    let corpus = a.corpus.load()?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let ctx = a.context.resolve()?;
    let model_cfg = a.model.resolve();
    let o = &a.optim;
    let train_cfg = TrainConfig {
        batch_size: o.batch_size,
        peak_lr: o.lr,
        warmup_steps: o.warmup_steps,
        label_smoothing: o.label_smoothing,
        clip_norm: o.clip_norm,
        max_epochs: o.max_epochs,
        patience: o.patience,
        eval_interval: o.eval_interval,
        seed: a.common.seed,
        ..TrainConfig::default()
    };
    let outcome = match train(&corpus, &ctx, &model_cfg, &train_cfg, &vocab) {
        Ok(o) => o,
        Err(crate::trainer::TrainError::Diverged { step, last_good }) => {
            save_checkpoint(&run.artifact("model.ckpt"), &last_good)?;
            bail!("training diverged at step {step}; last good checkpoint saved");
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&run.artifact("model.ckpt"), &outcome.checkpoint)?;
    run.write("train_log.jsonl", log_to_jsonl(&outcome.log))?;
    println!(
        "{} steps, best dev loss {:.4} at step {}{}",
        outcome.steps,
        outcome.best_dev_loss,
        outcome.best_step,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

fn decode_target(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let ids: Vec<u32> = ids.iter().copied().filter(|&t| t != EOS).collect();
    Ok(decode(&TokenSequence { ids, side: Side::Target }, vocab)?)
}

fn translate(a: &TranslateArgs, run: &mut Run) -> Result<()> {
    run.input(&a.checkpoint)?;
    run.input(&a.corpus.input)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = a.corpus.load()?;
    let split: Split = a.split.parse().map_err(anyhow::Error::msg)?;
    let ctx = ckpt.context.with_dynamic(false);
    let strategy = match a.strategy {
        StrategyArg::Greedy => Strategy::Greedy,
        StrategyArg::Beam => Strategy::Beam(a.beam_width),
    };
    let model: &Transformer = &ckpt.model;
    let (mut hyps, mut refs) = (String::new(), String::new());
    for doc in corpus.split(split) {
        for i in 0..doc.len() {
            let ex = build_example(doc, i, &ctx, &ckpt.vocab, a.context)?;
            let max_len = (ex.target_ids.len() + a.max_extra).min(model.config().max_positions);
            let prefix_len = ex.tgt_loss_mask.iter().position(|&m| m).unwrap_or(1);
            let out = if prefix_len > 1 {
                model.forced_prefix_generate(&ex.source_ids, &ex.src_context_mask, &ex.target_ids[..prefix_len], max_len)?
            } else {
                model.generate(&ex.source_ids, &ex.src_context_mask, max_len, strategy)?
            };
            hyps.push_str(&decode_target(&out, &ckpt.vocab)?);
            hyps.push('\n');
            refs.push_str(&doc.utterances[i].target_text);
            refs.push('\n');
        }
    }
    run.write("hyp.txt", hyps)?;
    run.write("ref.txt", refs)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .map(String::from)
        .collect())
}

fn bleu_cmd(a: &BleuArgs, run: &mut Run) -> Result<()> {
    run.input(&a.hyp)?;
    run.input(&a.reference)?;
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    let opts = BleuOptions {
        max_n: a.max_n,
        mode: match a.mode {
            BleuModeArg::Character => BleuMode::Character,
            BleuModeArg::Whitespace => BleuMode::Whitespace,
        },
        smooth: a.smooth,
    };
    let score = bleu(&hyps, &refs, &opts)?;
    emit_bleu_summary(&score, &run.artifact("bleu.txt"))?;
    println!("{}", score.summary());
    Ok(())
}

fn cxmi_cmd(a: &CxmiArgs, run: &mut Run) -> Result<()> {
    run.input(&a.checkpoint)?;
    run.input(&a.corpus.input)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = a.corpus.load()?;
    let split: Split = a.split.parse().map_err(anyhow::Error::msg)?;
    let docs = corpus.split(split);
    let sizes: Vec<usize> = if a.context.is_empty() {
        (1..=ckpt.context.k_max().max(1)).collect()
    } else {
        let mut s = a.context.clone();
        s.sort_unstable();
        s.dedup();
        s
    };
    let agnostic = score_logprobs(&ckpt, docs, 0, a.batch_size)?;
    let honorific = honorific_ids(&ckpt.vocab).ids(a.synthetic_honorific);
    let mut values = Vec::new();
    let mut pcxmi = None;
    for &c in &sizes {
        let aware = score_logprobs(&ckpt, docs, c, a.batch_size)?;
        values.push((c, cxmi(&agnostic, &aware)?));
        if Some(&c) == sizes.last() {
            pcxmi = honorifics_pcxmi(&agnostic, &aware, &honorific)?.map(|p| (c, p));
        }
    }
    let (report, details) = CxmiReport::build(&values, pcxmi.as_ref().map(|(c, p)| (*c, p)), &ckpt.vocab);
    emit_cxmi_report(&details, &run.artifact("cxmi.tsv"))?;
    run.artifacts.push(run.out.join("cxmi.tsv.json").display().to_string());
    print!("{}", report.to_tsv());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, run: &mut Run) -> Result<()> {
    let spec = SynthSpec {
        train_docs: 2,
        dev_docs: 1,
        test_docs: 1,
        utterances_per_doc: 4,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, a.common.seed)?;
    let vocab = build_vocab(&corpus, 1, TargetMode::Word)?;
    let ctx = ContextConfig::new(2, 0).with_speaker_tags(true).with_scene_tag(true);
    let ex = build_example(&corpus.train[0], 3, &ctx, &vocab, None)?;
    let cfg = ModelConfig {
        layers_enc: a.layers,
        layers_dec: a.layers,
        heads: a.heads,
        d_model: a.d_model,
        d_ff: a.d_ff,
        dropout: 0.0,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let model = Transformer::new(cfg, a.common.seed)?;
    let report = finite_difference_check(&model, &ex, a.probes, a.h, a.label_smoothing, a.common.seed)?;
    run.write("gradcheck.json", serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "max relative error {:.3e} over {} probes (h = {:e})",
        report.max_relative_error,
        report.probes.len(),
        a.h
    );
    if report.max_relative_error >= a.tolerance {
        bail!(
            "gradient check failed: {:.3e} >= tolerance {:e}",
            report.max_relative_error,
            a.tolerance
        );
    }
    Ok(())
}
