//! Command-line orchestration of the full pipeline: vocabulary building,
//! testbed generation, training, transfer, evaluation, analysis, and
//! gradient self-verification.
//!
//! Conventions shared by every command:
//!
//! - On success, exactly one machine-readable JSON result line is printed to
//!   stdout; human-readable progress goes to stderr.
//! - Exit codes: 0 success, 1 internal error, 2 I/O or parse error,
//!   3 contract violation (fingerprint mismatch, parity failure, ...).
//! - Input paths are checked and output directories created before any real
//!   work starts.
//! - Config files are JSON; every top-level config field has a CLI flag
//!   override with precedence flag > file > default, and the effective
//!   configuration is echoed into the output directory for provenance.
//! - All randomness flows from explicit seeds through named substreams, so
//!   reruns with identical inputs and seeds produce bytewise-identical
//!   output files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adapter::{attach, init, AdapterCheckpoint, AdapterConfig};
use crate::analysis::{alignment_trajectory, recovery_accuracy, DEFAULT_TOP_K};
use crate::error::{Error, Result};
use crate::rng::child_seed;
use crate::testbed::{
    derive_model, gen_dataset, gen_feature_map, gen_latents, load_samples, save_samples,
    DatasetConfig, SyntheticSample, ToyLanguageModel, DEFAULT_DIM_A, DEFAULT_DIM_B,
    DEFAULT_D_S, DEFAULT_D_V, DEFAULT_HELDOUT, DEFAULT_MIXTURE_K, DEFAULT_NOISE_SIGMA,
    DEFAULT_PATCHES, DEFAULT_SFT_TRAIN, DEFAULT_T, DEFAULT_TRAIN, DEFAULT_T_FULL_A,
    DEFAULT_T_FULL_B,
};
use crate::training::{
    caption_loss, gradient_check, train_pipeline, CaptionHead, Phase, TrainConfig,
    TrainConfigPatch, TrainEvent,
};
use crate::vocab::{
    count_frequencies, intersect, select_top_n, FrequencyCount, SharedVocabulary, TokenSet,
    TokenizerVocab, DEFAULT_TOP_N,
};

/// Vocabulary-anchored vision-language adapter workbench.
#[derive(Debug, Parser)]
#[command(
    name = "langbridge",
    version,
    about = "Vocabulary-anchored vision-language adapter workbench",
    long_about = "Builds shared vocabularies, generates the synthetic testbed, trains the \
                  adapter, re-attaches it to other models, and analyzes what it learned.\n\n\
                  Every command prints one machine-readable JSON result line to stdout on \
                  success. Exit codes: 0 success, 1 internal error, 2 I/O or parse error, \
                  3 contract violation.\n\n\
                  Environment: LANGBRIDGE_LAB_THREADS optionally caps the worker threads \
                  used for corpus frequency counting."
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Shared-vocabulary operations.
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Synthetic-testbed operations.
    #[command(subcommand)]
    Testbed(TestbedCommand),
    /// Train an adapter against one model's embedding table.
    Train(TrainArgs),
    /// Bind a trained adapter to a model without retraining.
    Attach(AttachArgs),
    /// Evaluate a bound adapter on a dataset.
    Eval(EvalArgs),
    /// Trace per-patch top-k retrievals across training checkpoints.
    Analyze(AnalyzeArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Subcommand)]
enum VocabCommand {
    /// Intersect two tokenizer vocabularies and rank by corpus frequency.
    Build(VocabBuildArgs),
}

#[derive(Debug, Subcommand)]
enum TestbedCommand {
    /// Generate toy models and synthetic datasets with planted tokens.
    Gen(TestbedGenArgs),
}

/// Result of one executed command: the JSON line for stdout plus the
/// process exit code (nonzero only for "ran to completion, verdict is fail",
/// like an unsuccessful gradient check).
struct CommandOutput {
    result: serde_json::Value,
    exit: i32,
}

fn ok(result: serde_json::Value) -> Result<CommandOutput> {
    Ok(CommandOutput { result, exit: 0 })
}

/// Parses arguments, runs the selected command, prints its result line, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print to stdout and exit 0; genuine usage
            // errors print to stderr and exit 2 (a parse failure).
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            println!("{}", out.result);
            out.exit
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<CommandOutput> {
    match command {
        Command::Vocab(VocabCommand::Build(args)) => cmd_vocab_build(args),
        Command::Testbed(TestbedCommand::Gen(args)) => cmd_testbed_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Attach(args) => cmd_attach(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

// ---------------------------------------------------------------------------
// Path plumbing
// ---------------------------------------------------------------------------

fn require_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path.display().to_string(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        ))
    }
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn prepare_out_file(path: &Path) -> Result<()> {
    match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => prepare_out_dir(parent),
        _ => Ok(()),
    }
}

fn write_json_pretty(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

// ---------------------------------------------------------------------------
// vocab build
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
struct VocabBuildArgs {
    /// Tokenizer vocabulary JSON for the first model ({"token": id, ...}).
    #[arg(long)]
    vocab_a: PathBuf,
    /// Tokenizer vocabulary JSON for the second model.
    #[arg(long)]
    vocab_b: PathBuf,
    /// Corpus text file for frequency ranking; repeat for multiple files.
    #[arg(long = "corpus", required = true)]
    corpus: Vec<PathBuf>,
    /// Keep the N most frequent intersection tokens.
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    top_n: usize,
    /// Name recorded for the first model.
    #[arg(long, default_value = "alpha")]
    name_a: String,
    /// Name recorded for the second model.
    #[arg(long, default_value = "beta")]
    name_b: String,
    /// Output path for the shared-vocabulary JSON.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_vocab_build(args: VocabBuildArgs) -> Result<CommandOutput> {
    require_input(&args.vocab_a)?;
    require_input(&args.vocab_b)?;
    for path in &args.corpus {
        require_input(path)?;
    }
    prepare_out_file(&args.out)?;

    let a = TokenizerVocab::load(&args.vocab_a, &args.name_a)?;
    let b = TokenizerVocab::load(&args.vocab_b, &args.name_b)?;
    let pairs = intersect(&a, &b);
    if pairs.is_empty() {
        return Err(Error::Contract(
            "empty intersection between the tokenizer vocabularies".into(),
        ));
    }

    let set = TokenSet::new(pairs.iter().map(|(token, _, _)| token.clone()))?;
    let mut counts = FrequencyCount::default();
    for path in &args.corpus {
        let file = File::open(path).map_err(|e| Error::io(display(path), e))?;
        counts = counts.merge(count_frequencies(BufReader::new(file), &set)?);
    }

    let outcome = select_top_n(&counts.counts, &pairs, args.top_n, &args.name_a, &args.name_b)?;
    let vocabulary = outcome.vocabulary;
    vocabulary.save(&args.out)?;

    eprintln!(
        "intersection {} tokens, selected {}, unknown chars {}, skipped lines {}",
        pairs.len(),
        vocabulary.len(),
        counts.unknown_chars,
        counts.skipped_lines.len()
    );
    ok(json!({
        "command": "vocab build",
        "out": display(&args.out),
        "intersection": pairs.len(),
        "selected": vocabulary.len(),
        "top_n": args.top_n,
        "saturated": outcome.saturated,
        "unknown_chars": counts.unknown_chars,
        "skipped_lines": counts.skipped_lines.len(),
        "fingerprint": vocabulary.fingerprint(),
    }))
}

// ---------------------------------------------------------------------------
// testbed gen
// ---------------------------------------------------------------------------

/// Effective testbed configuration: defaults, overlaid by a config file,
/// overlaid by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TestbedConfig {
    seed: u64,
    /// Number of shared tokens T.
    t: usize,
    /// Latent semantic dimension.
    d_s: usize,
    /// Visual feature dimension.
    d_v: usize,
    name_a: String,
    name_b: String,
    dim_a: usize,
    dim_b: usize,
    t_full_a: usize,
    t_full_b: usize,
    train: usize,
    heldout: usize,
    /// Size of the second (fine-tuning) dataset; 0 skips it.
    sft: usize,
    patches: usize,
    noise_sigma: f64,
    mixture_k: usize,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        TestbedConfig {
            seed: 42,
            t: DEFAULT_T,
            d_s: DEFAULT_D_S,
            d_v: DEFAULT_D_V,
            name_a: "alpha".into(),
            name_b: "beta".into(),
            dim_a: DEFAULT_DIM_A,
            dim_b: DEFAULT_DIM_B,
            t_full_a: DEFAULT_T_FULL_A,
            t_full_b: DEFAULT_T_FULL_B,
            train: DEFAULT_TRAIN,
            heldout: DEFAULT_HELDOUT,
            sft: DEFAULT_SFT_TRAIN,
            patches: DEFAULT_PATCHES,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            mixture_k: DEFAULT_MIXTURE_K,
        }
    }
}

/// Partial testbed config: any subset of fields; unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TestbedPatch {
    seed: Option<u64>,
    t: Option<usize>,
    d_s: Option<usize>,
    d_v: Option<usize>,
    name_a: Option<String>,
    name_b: Option<String>,
    dim_a: Option<usize>,
    dim_b: Option<usize>,
    t_full_a: Option<usize>,
    t_full_b: Option<usize>,
    train: Option<usize>,
    heldout: Option<usize>,
    sft: Option<usize>,
    patches: Option<usize>,
    noise_sigma: Option<f64>,
    mixture_k: Option<usize>,
}

impl TestbedPatch {
    fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(display(path), e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(display(path), e))
    }

    fn apply(&self, mut base: TestbedConfig) -> TestbedConfig {
        macro_rules! overlay {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() {
                    base.$field = v;
                })*
            };
        }
        overlay!(
            seed, t, d_s, d_v, name_a, name_b, dim_a, dim_b, t_full_a, t_full_b, train,
            heldout, sft, patches, noise_sigma, mixture_k
        );
        base
    }
}

#[derive(Debug, Args)]
struct TestbedGenArgs {
    /// Output directory for models, datasets, and the config echo.
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON config file; any flag below overrides its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shared vocabulary to bind into the models (stamps its fingerprint).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Root seed for every generator substream.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of shared tokens T.
    #[arg(long)]
    t: Option<usize>,
    /// Latent semantic dimension.
    #[arg(long)]
    d_s: Option<usize>,
    /// Visual feature dimension.
    #[arg(long)]
    d_v: Option<usize>,
    /// Name of the first toy model.
    #[arg(long)]
    name_a: Option<String>,
    /// Name of the second toy model.
    #[arg(long)]
    name_b: Option<String>,
    /// Embedding dimension of the first model.
    #[arg(long)]
    dim_a: Option<usize>,
    /// Embedding dimension of the second model.
    #[arg(long)]
    dim_b: Option<usize>,
    /// Full vocabulary size of the first model.
    #[arg(long)]
    t_full_a: Option<usize>,
    /// Full vocabulary size of the second model.
    #[arg(long)]
    t_full_b: Option<usize>,
    /// Training samples.
    #[arg(long)]
    train: Option<usize>,
    /// Held-out samples.
    #[arg(long)]
    heldout: Option<usize>,
    /// Fine-tuning samples (a second dataset; 0 skips it).
    #[arg(long)]
    sft: Option<usize>,
    /// Patches per sample.
    #[arg(long)]
    patches: Option<usize>,
    /// Feature noise scale.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Tokens mixed per patch (1 = pure planted tokens).
    #[arg(long)]
    mixture_k: Option<usize>,
}

fn cmd_testbed_gen(args: TestbedGenArgs) -> Result<CommandOutput> {
    if let Some(path) = &args.config {
        require_input(path)?;
    }
    if let Some(path) = &args.vocab {
        require_input(path)?;
    }
    prepare_out_dir(&args.out_dir)?;

    let mut config = TestbedConfig::default();
    if let Some(path) = &args.config {
        config = TestbedPatch::load(path)?.apply(config);
    }
    let flags = TestbedPatch {
        seed: args.seed,
        t: args.t,
        d_s: args.d_s,
        d_v: args.d_v,
        name_a: args.name_a.clone(),
        name_b: args.name_b.clone(),
        dim_a: args.dim_a,
        dim_b: args.dim_b,
        t_full_a: args.t_full_a,
        t_full_b: args.t_full_b,
        train: args.train,
        heldout: args.heldout,
        sft: args.sft,
        patches: args.patches,
        noise_sigma: args.noise_sigma,
        mixture_k: args.mixture_k,
    };
    let config = flags.apply(config);

    if config.name_a == config.name_b {
        return Err(Error::Contract(format!(
            "the two models need distinct names (both are {:?}): the name seeds the \
             derivation substream",
            config.name_a
        )));
    }

    let vocab = match &args.vocab {
        Some(path) => Some(SharedVocabulary::load(path)?),
        None => None,
    };
    if let Some(v) = &vocab {
        if v.len() != config.t {
            return Err(Error::Contract(format!(
                "the shared vocabulary has {} tokens but the testbed is configured for t = {}",
                v.len(),
                config.t
            )));
        }
    }
    let fingerprint = vocab.as_ref().map(|v| v.fingerprint());

    let latents = gen_latents(config.seed, config.t, config.d_s)?;
    let mut model_a = derive_model(
        &latents,
        &config.name_a,
        config.dim_a,
        config.t_full_a,
        config.seed,
    )?;
    let mut model_b = derive_model(
        &latents,
        &config.name_b,
        config.dim_b,
        config.t_full_b,
        config.seed,
    )?;
    model_a.vocab_fingerprint = fingerprint.clone();
    model_b.vocab_fingerprint = fingerprint.clone();
    let feature_map = gen_feature_map(config.seed, config.d_v, config.d_s)?;

    let data = gen_dataset(
        &latents,
        &feature_map,
        &DatasetConfig {
            train: config.train,
            heldout: config.heldout,
            patches: config.patches,
            noise_sigma: config.noise_sigma,
            mixture_k: config.mixture_k,
        },
        config.seed,
    )?;

    model_a.save(&args.out_dir.join("model_a.json"))?;
    model_b.save(&args.out_dir.join("model_b.json"))?;
    save_samples(&data.train, &args.out_dir.join("train.jsonl"))?;
    save_samples(&data.heldout, &args.out_dir.join("heldout.jsonl"))?;
    let mut files = vec!["model_a.json", "model_b.json", "train.jsonl", "heldout.jsonl"];

    if config.sft > 0 {
        // A second dataset under an independent seed, for the fine-tune stage.
        let sft_data = gen_dataset(
            &latents,
            &feature_map,
            &DatasetConfig {
                train: config.sft,
                heldout: 0,
                patches: config.patches,
                noise_sigma: config.noise_sigma,
                mixture_k: config.mixture_k,
            },
            child_seed(config.seed, "sft-data"),
        )?;
        save_samples(&sft_data.train, &args.out_dir.join("sft.jsonl"))?;
        files.push("sft.jsonl");
    }

    write_json_pretty(
        &args.out_dir.join("testbed.json"),
        &json!({
            "version": 1,
            "config": config,
            "vocab_fingerprint": fingerprint,
        }),
    )?;
    files.push("testbed.json");

    eprintln!(
        "generated {} ({}d) and {} ({}d) over {} shared tokens; {} train / {} held-out / {} sft samples",
        config.name_a,
        config.dim_a,
        config.name_b,
        config.dim_b,
        config.t,
        config.train,
        config.heldout,
        config.sft
    );
    ok(json!({
        "command": "testbed gen",
        "out_dir": display(&args.out_dir),
        "seed": config.seed,
        "t": config.t,
        "models": {
            &config.name_a: {"dim": config.dim_a, "file": "model_a.json"},
            &config.name_b: {"dim": config.dim_b, "file": "model_b.json"},
        },
        "train": config.train,
        "heldout": config.heldout,
        "sft": config.sft,
        "files": files,
        "vocab_fingerprint": fingerprint,
    }))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
struct TrainArgs {
    /// Pretraining dataset (JSONL).
    #[arg(long)]
    dataset: PathBuf,
    /// Model whose embedding table anchors training.
    #[arg(long)]
    model: PathBuf,
    /// Shared vocabulary the adapter is built against.
    #[arg(long)]
    vocab: PathBuf,
    /// Output directory for checkpoints, metrics, and the config echo.
    #[arg(long)]
    out_dir: PathBuf,
    /// Where to write the trained adapter (default: <out-dir>/adapter.json).
    #[arg(long)]
    adapter_out: Option<PathBuf>,

    /// Pretraining config JSON; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    warmup_ratio: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    total_steps: Option<u64>,
    /// Comma-separated checkpoint steps (e.g. 100,1000,2000).
    #[arg(long, value_delimiter = ',')]
    checkpoint_steps: Option<Vec<u64>>,
    /// Training seed (batch order).
    #[arg(long)]
    seed: Option<u64>,

    /// Adapter initialization seed.
    #[arg(long, default_value_t = 0)]
    adapter_seed: u64,
    /// Adapter hidden width.
    #[arg(long, default_value_t = AdapterConfig::default().hidden)]
    hidden: usize,
    /// Adapter projection dimension before the vocabulary head.
    #[arg(long, default_value_t = AdapterConfig::default().d_proj)]
    d_proj: usize,
    /// Softmax temperature of the probability head.
    #[arg(long, default_value_t = AdapterConfig::default().temperature)]
    temperature: f64,

    /// Fine-tuning dataset (JSONL); providing it enables the fine-tune stage.
    #[arg(long)]
    sft_dataset: Option<PathBuf>,
    /// Fine-tuning config JSON; the sft flags below override its fields.
    #[arg(long)]
    sft_config: Option<PathBuf>,
    #[arg(long)]
    sft_learning_rate: Option<f64>,
    #[arg(long)]
    sft_warmup_ratio: Option<f64>,
    #[arg(long)]
    sft_batch_size: Option<usize>,
    #[arg(long)]
    sft_total_steps: Option<u64>,
    /// Comma-separated fine-tune checkpoint steps.
    #[arg(long, value_delimiter = ',')]
    sft_checkpoint_steps: Option<Vec<u64>>,
    #[arg(long)]
    sft_seed: Option<u64>,
}

/// Lazily created per-phase metrics writers: metrics.jsonl for pretraining,
/// metrics-sft.jsonl for fine-tuning; flushed at every checkpoint.
struct MetricsWriters {
    out_dir: PathBuf,
    pretrain: Option<BufWriter<File>>,
    sft: Option<BufWriter<File>>,
}

impl MetricsWriters {
    fn new(out_dir: &Path) -> Self {
        MetricsWriters {
            out_dir: out_dir.to_path_buf(),
            pretrain: None,
            sft: None,
        }
    }

    fn writer(&mut self, phase: Phase) -> Result<&mut BufWriter<File>> {
        let (slot, name) = match phase {
            Phase::Pretrain => (&mut self.pretrain, "metrics.jsonl"),
            Phase::Sft => (&mut self.sft, "metrics-sft.jsonl"),
        };
        if slot.is_none() {
            let path = self.out_dir.join(name);
            let file = File::create(&path).map_err(|e| Error::io(display(&path), e))?;
            *slot = Some(BufWriter::new(file));
        }
        Ok(slot.as_mut().expect("just created"))
    }

    fn flush(&mut self) -> Result<()> {
        for slot in [&mut self.pretrain, &mut self.sft] {
            if let Some(w) = slot {
                w.flush()
                    .map_err(|e| Error::io(display(&self.out_dir), e))?;
            }
        }
        Ok(())
    }
}

fn cmd_train(args: TrainArgs) -> Result<CommandOutput> {
    require_input(&args.dataset)?;
    require_input(&args.model)?;
    require_input(&args.vocab)?;
    for path in [&args.config, &args.sft_config, &args.sft_dataset]
        .into_iter()
        .flatten()
    {
        require_input(path)?;
    }
    prepare_out_dir(&args.out_dir)?;

    let vocab = SharedVocabulary::load(&args.vocab)?;
    let model = ToyLanguageModel::load(&args.model)?;
    let train_data = load_samples(&args.dataset)?;
    if train_data.is_empty() {
        return Err(Error::Contract("the training dataset is empty".into()));
    }
    let d_v = train_data[0].features.cols();

    let mut pretrain = TrainConfig::pretrain_default();
    if let Some(path) = &args.config {
        pretrain = TrainConfigPatch::load(path)?.apply(pretrain);
    }
    pretrain = TrainConfigPatch {
        learning_rate: args.learning_rate,
        warmup_ratio: args.warmup_ratio,
        schedule: None,
        batch_size: args.batch_size,
        total_steps: args.total_steps,
        optimizer: None,
        checkpoint_steps: args.checkpoint_steps.clone(),
        seed: args.seed,
    }
    .apply(pretrain);

    let sft: Option<(Vec<SyntheticSample>, TrainConfig)> = match &args.sft_dataset {
        Some(path) => {
            let data = load_samples(path)?;
            if data.is_empty() {
                return Err(Error::Contract("the fine-tuning dataset is empty".into()));
            }
            let mut config = TrainConfig::sft_default();
            if let Some(p) = &args.sft_config {
                config = TrainConfigPatch::load(p)?.apply(config);
            }
            config = TrainConfigPatch {
                learning_rate: args.sft_learning_rate,
                warmup_ratio: args.sft_warmup_ratio,
                schedule: None,
                batch_size: args.sft_batch_size,
                total_steps: args.sft_total_steps,
                optimizer: None,
                checkpoint_steps: args.sft_checkpoint_steps.clone(),
                seed: args.sft_seed,
            }
            .apply(config);
            Some((data, config))
        }
        None => None,
    };

    let adapter_config = AdapterConfig {
        d_v,
        hidden: args.hidden,
        d_proj: args.d_proj,
        t: vocab.len(),
        temperature: args.temperature,
    };
    let adapter = init(&adapter_config, args.adapter_seed, vocab.fingerprint())?;

    let mut writers = MetricsWriters::new(&args.out_dir);
    let mut checkpoint_labels: Vec<String> = Vec::new();
    let out_dir = args.out_dir.clone();
    let outcome = train_pipeline(
        adapter,
        &model,
        &vocab,
        &train_data,
        &pretrain,
        sft.as_ref().map(|(data, config)| (data.as_slice(), config)),
        |event| match event {
            TrainEvent::Step(phase, metric) => {
                let writer = writers.writer(phase)?;
                let line = serde_json::to_string(metric)
                    .map_err(|e| Error::json("metrics", e))?;
                writeln!(writer, "{line}").map_err(|e| Error::io("metrics", e))
            }
            TrainEvent::Checkpoint(_, checkpoint) => {
                let name = format!("checkpoint-{}.json", checkpoint.metadata.stage);
                checkpoint.save(&out_dir.join(&name))?;
                checkpoint_labels.push(checkpoint.metadata.stage.clone());
                writers.flush()
            }
        },
    )?;
    writers.flush()?;

    let final_checkpoint = outcome
        .checkpoints
        .last()
        .expect("the last stage always emits a final checkpoint");
    let adapter_out = args
        .adapter_out
        .unwrap_or_else(|| args.out_dir.join("adapter.json"));
    prepare_out_file(&adapter_out)?;
    final_checkpoint.save(&adapter_out)?;

    write_json_pretty(
        &args.out_dir.join("train-config.json"),
        &json!({
            "version": 1,
            "adapter": {"config": adapter_config, "seed": args.adapter_seed},
            "pretrain": pretrain,
            "sft": sft.as_ref().map(|(_, config)| config),
            "model": model.name,
            "vocab_fingerprint": vocab.fingerprint(),
        }),
    )?;

    let final_loss = final_checkpoint.metadata.loss;
    eprintln!(
        "trained {} steps{} against {}; final loss {:?}",
        pretrain.total_steps,
        sft.as_ref()
            .map(|(_, c)| format!(" + {} fine-tune steps", c.total_steps))
            .unwrap_or_default(),
        model.name,
        final_loss
    );
    ok(json!({
        "command": "train",
        "out_dir": display(&args.out_dir),
        "adapter": display(&adapter_out),
        "checkpoints": checkpoint_labels,
        "pretrain_steps": pretrain.total_steps,
        "sft_steps": sft.as_ref().map(|(_, config)| config.total_steps),
        "final_loss": final_loss,
        "vocab_fingerprint": vocab.fingerprint(),
    }))
}

// ---------------------------------------------------------------------------
// attach
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
struct AttachArgs {
    /// Trained adapter checkpoint.
    #[arg(long)]
    adapter: PathBuf,
    /// Model to bind to.
    #[arg(long)]
    model: PathBuf,
    /// Shared vocabulary (must match the adapter's fingerprint).
    #[arg(long)]
    vocab: PathBuf,
    /// Output path for the binding artifact.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_attach(args: AttachArgs) -> Result<CommandOutput> {
    require_input(&args.adapter)?;
    require_input(&args.model)?;
    require_input(&args.vocab)?;
    prepare_out_file(&args.out)?;

    let checkpoint = AdapterCheckpoint::load(&args.adapter)?;
    let adapter = checkpoint.to_adapter()?;
    let model = ToyLanguageModel::load(&args.model)?;
    let vocab = SharedVocabulary::load(&args.vocab)?;
    let bound = attach(&adapter, &model, &vocab)?;

    write_json_pretty(
        &args.out,
        &json!({
            "version": 1,
            "binding": {
                "model": model.name,
                "dim": model.dim,
                "shared_tokens": vocab.len(),
                "vocab_fingerprint": vocab.fingerprint(),
            },
            "adapter": checkpoint,
        }),
    )?;

    eprintln!(
        "attached adapter (stage {:?}) to {} ({}d, {} shared tokens)",
        checkpoint.metadata.stage,
        model.name,
        model.dim,
        bound.shared_embeddings.rows()
    );
    ok(json!({
        "command": "attach",
        "model": model.name,
        "dim": model.dim,
        "shared_tokens": vocab.len(),
        "out": display(&args.out),
    }))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
struct EvalArgs {
    /// Adapter checkpoint to evaluate.
    #[arg(long)]
    adapter: PathBuf,
    /// Model to bind to.
    #[arg(long)]
    model: PathBuf,
    /// Shared vocabulary.
    #[arg(long)]
    vocab: PathBuf,
    /// Evaluation dataset (JSONL).
    #[arg(long)]
    dataset: PathBuf,
}

fn cmd_eval(args: EvalArgs) -> Result<CommandOutput> {
    require_input(&args.adapter)?;
    require_input(&args.model)?;
    require_input(&args.vocab)?;
    require_input(&args.dataset)?;

    let adapter = AdapterCheckpoint::load(&args.adapter)?.to_adapter()?;
    let model = ToyLanguageModel::load(&args.model)?;
    let vocab = SharedVocabulary::load(&args.vocab)?;
    let samples = load_samples(&args.dataset)?;
    if samples.is_empty() {
        return Err(Error::Contract("the evaluation dataset is empty".into()));
    }

    let bound = attach(&adapter, &model, &vocab)?;
    let recovery = recovery_accuracy(&bound, &samples)?;
    let refs: Vec<&SyntheticSample> = samples.iter().collect();
    let loss = caption_loss(&bound, &CaptionHead, &refs)?;
    let patches: usize = samples.iter().map(|s| s.features.rows()).sum();

    eprintln!(
        "evaluated {} samples ({} patches) on {}: recovery {:.4}, caption loss {:.4}",
        samples.len(),
        patches,
        model.name,
        recovery,
        loss
    );
    ok(json!({
        "command": "eval",
        "model": model.name,
        "dim": model.dim,
        "samples": samples.len(),
        "patches": patches,
        "recovery": recovery,
        "caption_loss": loss,
    }))
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Checkpoint file, in stage order; repeat for multiple stages.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Model whose embedding table scores the retrievals.
    #[arg(long)]
    model: PathBuf,
    /// Shared vocabulary.
    #[arg(long)]
    vocab: PathBuf,
    /// Dataset supplying the probe sample (JSONL).
    #[arg(long)]
    dataset: PathBuf,
    /// Index of the probe sample within the dataset.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Retrieved tokens per patch.
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// Output directory for analysis.json and analysis.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<CommandOutput> {
    for path in &args.checkpoints {
        require_input(path)?;
    }
    require_input(&args.model)?;
    require_input(&args.vocab)?;
    require_input(&args.dataset)?;
    prepare_out_dir(&args.out_dir)?;

    let checkpoints = args
        .checkpoints
        .iter()
        .map(|path| AdapterCheckpoint::load(path))
        .collect::<Result<Vec<_>>>()?;
    let model = ToyLanguageModel::load(&args.model)?;
    let vocab = SharedVocabulary::load(&args.vocab)?;
    let samples = load_samples(&args.dataset)?;
    let sample = samples.get(args.sample).ok_or(Error::Index {
        what: "probe sample",
        index: args.sample,
        size: samples.len(),
    })?;

    let report = alignment_trajectory(&checkpoints, sample, &model, &vocab, args.k)?;
    let out_json = args.out_dir.join("analysis.json");
    let out_csv = args.out_dir.join("analysis.csv");
    report.save(&out_json)?;
    report.save_csv(&out_csv)?;

    for stage in &report.stages {
        eprintln!(
            "stage {:>8}: top-1 recovery {:.4}",
            stage.checkpoint, stage.top1_recovery
        );
    }
    ok(json!({
        "command": "analyze",
        "k": report.k,
        "stages": report
            .stages
            .iter()
            .map(|s| json!({"checkpoint": s.checkpoint, "top1_recovery": s.top1_recovery}))
            .collect::<Vec<_>>(),
        "out_json": display(&out_json),
        "out_csv": display(&out_csv),
    }))
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Seed for the battery of adapter configurations.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<CommandOutput> {
    let report = gradient_check(args.seed)?;
    for config in &report.configs {
        eprintln!(
            "{}: {} entries, max relative error {:.3e}",
            config.description, config.entries_checked, config.max_rel
        );
    }
    let verdict = if report.passed { "pass" } else { "fail" };
    eprintln!(
        "gradient check {verdict}: max relative error {:.3e} (threshold {:.0e})",
        report.max_rel, report.threshold
    );
    Ok(CommandOutput {
        result: json!({
            "command": "gradcheck",
            "seed": args.seed,
            "verdict": verdict,
            "passed": report.passed,
            "max_rel": report.max_rel,
            "threshold": report.threshold,
            "configs": report.configs.len(),
        }),
        exit: if report.passed { 0 } else { 1 },
    })
}
