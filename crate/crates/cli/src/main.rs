use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use tdu_core::checkpoint::{load_checkpoint, save_checkpoint};
use tdu_core::data::{
    generate_synthetic_dataset, halve_contexts, preprocess_scenes, read_jsonl, read_samples, write_jsonl,
    write_samples, Sample, Scene, SyntheticSpec,
};
use tdu_core::model::{grad_check, grad_check_config, prepare, Example};
use tdu_core::tokenizer::{build_vocab, Vocab};
use tdu_core::train::{self, evaluate, predict_all, summarize, Splits, TrainLog, TrainState, DEFAULT_THRESHOLD};
use tdu_core::{Fusion, ModelConfig, ModelParams, TrainConfig};

mod config;

use config::{merge_model, merge_train, ConfigFile, ModelArgs, TrainArgs};

const SCENES_FILE: &str = "scenes.jsonl";
const VOCAB_FILE: &str = "vocab.txt";
const SPLIT_FILES: [(&str, &str); 3] = [("train", "train.jsonl"), ("val", "val.jsonl"), ("test", "test.jsonl")];
const TRAIN_CONFIG_FILE: &str = "train_config.json";

#[derive(Parser, Debug)]
#[command(name = "tdu", version, about = "Target-dependent region classifier for fetching instructions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes and the vocabulary.
    GenData(GenDataArgs),
    /// Label, balance and split scenes into sample files.
    Preprocess(PreprocessArgs),
    /// Masked-language-modelling and image-text-matching pretraining.
    Pretrain(PretrainArgs),
    /// Fine-tune and write the training log, checkpoints and summary.
    Train(TrainCmdArgs),
    /// Accuracy and confusion matrix of a checkpoint on one split.
    Eval(EvalArgs),
    /// Per-sample probabilities as JSON lines.
    Predict(EvalArgs),
    /// Fine-tune an ablated variant.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of a tiny model.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "TDU_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    train_scenes: usize,
    #[arg(long, default_value_t = 50)]
    val_scenes: usize,
    #[arg(long, default_value_t = 50)]
    test_scenes: usize,
    #[arg(long, default_value_t = 5)]
    objects_per_scene: usize,
    #[arg(long, default_value_t = 2)]
    instructions_per_scene: usize,
    /// Upper bound on whole-word vocabulary entries.
    #[arg(long, default_value_t = 4682)]
    vocab_size: usize,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Directory holding scenes.jsonl; split files are written here too.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "TDU_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct TrainCmdArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a pretrained checkpoint.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Halve every sample's contexts before scoring.
    #[arg(long)]
    few_contexts: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn file(self) -> &'static str {
        match self {
            SplitName::Train => SPLIT_FILES[0].1,
            SplitName::Val => SPLIT_FILES[1].1,
            SplitName::Test => SPLIT_FILES[2].1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Variant {
    LateFusion,
    FewContexts,
    NoPretraining,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum)]
    variant: Variant,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pretrained checkpoint for variants that keep pretraining.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, env = "TDU_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, value_enum, default_value_t = FusionArg::Early)]
    fusion: FusionArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum FusionArg {
    Early,
    Late,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Early => Fusion::Early,
            FusionArg::Late => Fusion::Late,
        }
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn load_vocab(data: &Path) -> Result<Vocab> {
    let path = data.join(VOCAB_FILE);
    Vocab::load(&path).with_context(|| format!("loading vocabulary from {}", path.display()))
}

fn load_split(data: &Path, file: &str, max_contexts: usize) -> Result<Vec<Sample>> {
    let path = data.join(file);
    read_samples(&path, max_contexts).with_context(|| format!("loading samples from {}", path.display()))
}

fn feature_dim(samples: &[Sample]) -> Result<usize> {
    samples
        .first()
        .map(|s| s.target.feat.len())
        .context("training split is empty")
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        train_scenes: args.train_scenes,
        val_scenes: args.val_scenes,
        test_scenes: args.test_scenes,
        objects_per_scene: args.objects_per_scene,
        instructions_per_scene: args.instructions_per_scene,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let (scenes, _) = generate_synthetic_dataset(&spec)?;
    let corpus: Vec<&str> = scenes
        .iter()
        .filter(|s| s.split == "train")
        .flat_map(|s| s.instructions.iter().map(|i| i.text.as_str()))
        .collect();
    let vocab = build_vocab(&corpus, args.vocab_size)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_jsonl(&args.out.join(SCENES_FILE), &scenes)?;
    vocab.save(&args.out.join(VOCAB_FILE))?;
    log::info!("wrote {} scenes and {} vocabulary entries", scenes.len(), vocab.len());
    print_json(&json!({ "scenes": scenes.len(), "vocab_size": vocab.len(), "feature_dim": spec.feature_dim() }))
}

fn preprocess(args: PreprocessArgs) -> Result<()> {
    let scenes: Vec<Scene> = read_jsonl(&args.data.join(SCENES_FILE))?;
    let split = preprocess_scenes(&scenes, args.seed)?;
    let out = args.out.unwrap_or(args.data);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let parts = [&split.train, &split.validation, &split.test];
    for ((_, file), samples) in SPLIT_FILES.iter().zip(parts) {
        write_samples(&out.join(file), samples)?;
    }
    print_json(&json!({
        "train": split.train.len(),
        "val": split.validation.len(),
        "test": split.test.len(),
    }))
}

struct Loaded {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vocab,
    samples: [Vec<Sample>; 3],
}

fn load_run(data: &Path, config: Option<&Path>, model: &ModelArgs, train: &TrainArgs, base_train: Option<TrainConfig>) -> Result<Loaded> {
    let file = match config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let vocab = load_vocab(data)?;
    let mut model_cfg = merge_model(&file, model)?;
    let train_cfg = merge_train(&file, train, base_train)?;
    model_cfg.vocab_size = vocab.len();
    model_cfg.dropout = train_cfg.dropout;
    let samples = [
        load_split(data, SPLIT_FILES[0].1, model_cfg.max_contexts)?,
        load_split(data, SPLIT_FILES[1].1, model_cfg.max_contexts)?,
        load_split(data, SPLIT_FILES[2].1, model_cfg.max_contexts)?,
    ];
    model_cfg.feat_dim = feature_dim(&samples[0])?;
    Ok(Loaded { model: model_cfg, train: train_cfg, vocab, samples })
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    // Pretraining never evaluates, so eval_every only needs to be valid.
    let defaults = TrainConfig { steps: 2000, eval_every: 1, ..TrainConfig::default() };
    let run = load_run(&args.data, args.config.as_deref(), &args.model, &args.train, Some(defaults))?;
    if run.model.fusion == Fusion::Late {
        bail!("pretraining is only defined for the early-fusion model");
    }
    let examples = prepare(&run.samples[0], &run.vocab, &run.model)?;
    let mut params: ModelParams<f32> = ModelParams::new(run.model.clone(), run.train.seed)?;
    let losses = train::pretrain(&mut params, &examples, &run.train)?;
    save_checkpoint(&args.out, &params, None, 0)?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    print_json(&json!({
        "steps": losses.len(),
        "first_loss": losses.first(),
        "final_loss": tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        "checkpoint": args.out,
    }))
}

/// Shared fine-tuning path for `train` and `ablate`.
fn fine_tune(
    run: Loaded,
    out: &Path,
    init: Option<&Path>,
    resume: bool,
    transform: Option<fn(&Sample) -> Sample>,
) -> Result<Value> {
    let Loaded { mut model, train: train_cfg, vocab, samples } = run;
    let samples: Vec<Vec<Sample>> = match transform {
        Some(f) => samples.iter().map(|s| s.iter().map(f).collect()).collect(),
        None => samples.to_vec(),
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let state = if resume {
        let ckpt = load_checkpoint(&out.join(train::LAST_CHECKPOINT))?;
        let log_path = out.join(train::LOG_FILE);
        let log = match std::fs::read_to_string(&log_path) {
            Ok(text) => TrainLog::from_jsonl(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => TrainLog::default(),
            Err(e) => return Err(e).with_context(|| format!("reading {}", log_path.display())),
        };
        model = ckpt.params.config.clone();
        log::info!("resuming at step {}", ckpt.step);
        TrainState::resume(ckpt, log)?
    } else if let Some(path) = init {
        let ckpt = load_checkpoint(path)?;
        let mut pretrained = ckpt.params;
        if pretrained.config.fusion != model.fusion {
            bail!("checkpoint {} uses a different fusion mode", path.display());
        }
        if pretrained.config.vocab_size != model.vocab_size || pretrained.config.feat_dim != model.feat_dim {
            bail!("checkpoint {} was built for different data dimensions", path.display());
        }
        pretrained.config.dropout = train_cfg.dropout;
        model = pretrained.config.clone();
        TrainState::fresh(pretrained)
    } else {
        TrainState::fresh(ModelParams::new(model.clone(), train_cfg.seed)?)
    };
    let examples = samples
        .iter()
        .map(|s| prepare(s, &vocab, &model))
        .collect::<tdu_core::Result<Vec<Vec<Example>>>>()?;
    let splits = Splits { train: &examples[0], validation: &examples[1], test: &examples[2] };
    std::fs::write(out.join(TRAIN_CONFIG_FILE), serde_json::to_string_pretty(&train_cfg)?)?;
    let state = train::train(state, splits, &train_cfg, Some(out))?;
    Ok(serde_json::to_value(summarize(&state.log)?)?)
}

fn train_cmd(args: TrainCmdArgs) -> Result<()> {
    let base = if args.resume {
        let path = args.out.join(TRAIN_CONFIG_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    } else {
        None
    };
    let run = load_run(&args.data, args.config.as_deref(), &args.model, &args.train, base)?;
    let summary = fine_tune(run, &args.out, args.init.as_deref(), args.resume, None)?;
    print_json(&summary)
}

fn ablate(args: AblateArgs) -> Result<()> {
    let mut model = args.model;
    let mut init = args.init.as_deref();
    let mut transform: Option<fn(&Sample) -> Sample> = None;
    match args.variant {
        Variant::LateFusion => {
            if init.is_some() {
                bail!("the late-fusion variant is trained without pretraining");
            }
            model.fusion = Some(FusionArg::Late);
        }
        Variant::FewContexts => transform = Some(halve_contexts),
        Variant::NoPretraining => init = None,
    }
    let run = load_run(&args.data, args.config.as_deref(), &model, &args.train, None)?;
    let mut summary = fine_tune(run, &args.out, init, false, transform)?;
    summary["variant"] = serde_json::to_value(args.variant)?;
    print_json(&summary)
}

fn scored(args: &EvalArgs) -> Result<(Vec<Example>, ModelParams<f32>)> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let params = ckpt.params;
    let vocab = load_vocab(&args.data)?;
    let mut samples = load_split(&args.data, args.split.file(), params.config.max_contexts)?;
    if args.few_contexts {
        samples = samples.iter().map(halve_contexts).collect();
    }
    let examples = prepare(&samples, &vocab, &params.config)?;
    Ok((examples, params))
}

fn eval(args: EvalArgs) -> Result<()> {
    let (examples, params) = scored(&args)?;
    print_json(&evaluate(&params, &examples, args.threshold)?)
}

fn predict(args: EvalArgs) -> Result<()> {
    let (examples, params) = scored(&args)?;
    let probs = predict_all(&params, &examples)?;
    for (e, p) in examples.iter().zip(probs) {
        print_json(&json!({
            "id": e.sample.id,
            "p": p[1],
            "prediction": u8::from(p[1] >= args.threshold),
            "label": e.sample.label,
        }))?;
    }
    Ok(())
}

fn grad_check_cmd(args: GradCheckArgs) -> Result<bool> {
    let config = ModelConfig { fusion: args.fusion.into(), ..grad_check_config() };
    let report = grad_check(&config, args.seed, args.step)?;
    let pass = report.max_relative_error < 1e-5;
    print_json(&json!({
        "max_relative_error": report.max_relative_error,
        "checked": report.checked,
        "worst": report.worst,
        "worst_values": [report.worst_values.0, report.worst_values.1],
        "pass": pass,
    }))?;
    Ok(pass)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Preprocess(a) => preprocess(a)?,
        Command::Pretrain(a) => pretrain(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Predict(a) => predict(a)?,
        Command::Ablate(a) => ablate(a)?,
        Command::GradCheck(a) => return grad_check_cmd(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
