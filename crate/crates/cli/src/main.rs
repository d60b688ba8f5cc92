//! `padapt`: pretrain a frozen backbone, generate synthetic data, train
//! adapters, and evaluate them. Every command prints one JSON object on
//! stdout; progress goes to stderr.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime failure, 3 check failure.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use padapt::adapter::{check_backbone_match, count_tunable, AdaptedModel, AdapterState, FusionMode};
use padapt::backbone::{pretrain_backbone, BackboneWeights};
use padapt::experts::{answer_with_expert, eval_vqa_with_expert, Expert, OracleExpert, SelfCaptionExpert};
use padapt::gradsuite::run_gradient_suite;
use padapt::synthworld::{
    caption_train_examples, eval_captions, eval_instructions, gen_caption_dataset, gen_corpus,
    gen_instruction_dataset, gen_instruction_eval_set, instruction_train_examples, read_jsonl, vqa_eval_images,
    write_jsonl, Answerer, Attribute, CaptionExample, InstructionExample, ModelAnswerer, Query, SynthImage,
    VisualEncoder,
};
use padapt::trainer::{Stream, TrainMode, TrainSession};
use serde_json::{json, Value};

use config::RunConfig;

/// Published tunable-parameter total of the 7B setup.
const REFERENCE_TOTAL_7B: usize = 14_000_000;

#[derive(Parser)]
#[command(name = "padapt", version, about = "Gated prefix adapters over a frozen toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone on a text corpus (one document per line) and freeze it.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Write a synthetic dataset: JSONL for caption/instruction sets, plain lines for the corpus.
    GenData {
        kind: DataKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train an adapter on a frozen backbone.
    Adapt {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        instructions: PathBuf,
        #[arg(long, default_value = "joint")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        /// Step log (JSON lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Score an adapter on one evaluation suite.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        suite: Suite,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Attribute asked about by the vqa suite.
        #[arg(long, default_value = "color")]
        attribute: AttributeArg,
        /// Expert context for the vqa suite: none, self, true, wrong or oracle:FILE.
        #[arg(long, default_value = "none")]
        expert: ExpertArg,
    },
    /// Answer one instruction, optionally about an image.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        input: Option<String>,
        /// "shape,color,size", e.g. "circle,red,small".
        #[arg(long)]
        image: Option<String>,
        /// none, self, true, wrong or oracle:FILE.
        #[arg(long, default_value = "none")]
        expert: ExpertArg,
        #[arg(long, default_value_t = 24)]
        max_new: usize,
    },
    /// Count learnable adapter parameters.
    Params {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_parser = ["desk", "llama7b"])]
    preset: Option<String>,
}

impl ConfigArg {
    fn check(&self) -> Result<()> {
        if let Some(p) = &self.config {
            require_file(p)?;
        }
        Ok(())
    }

    fn load(&self) -> Result<RunConfig> {
        match (&self.config, &self.preset) {
            (Some(p), _) => RunConfig::load(p),
            (None, Some(name)) => Ok(RunConfig::preset(name).expect("preset names are validated by clap")),
            (None, None) => Ok(RunConfig::desk()),
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    adapter: PathBuf,
    /// Fusion the adapter was trained with.
    #[arg(long, default_value = "early")]
    fusion: FusionArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Caption,
    Instruction,
    /// Held-out instruction evaluation set.
    InstructionEval,
    Corpus,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Vqa,
    Caption,
    Instruction,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Early,
    V1,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Early => FusionMode::Early,
            FusionArg::V1 => FusionMode::V1,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttributeArg {
    Color,
    Shape,
    Size,
}

impl From<AttributeArg> for Attribute {
    fn from(a: AttributeArg) -> Self {
        match a {
            AttributeArg::Color => Attribute::Color,
            AttributeArg::Shape => Attribute::Shape,
            AttributeArg::Size => Attribute::Size,
        }
    }
}

#[derive(Clone, Copy)]
struct ModeArg(TrainMode);

impl FromStr for ModeArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        TrainMode::parse(s).map(ModeArg).ok_or_else(|| {
            let names: Vec<&str> = TrainMode::ALL.iter().map(|m| m.as_str()).collect();
            format!("unknown mode {s:?}; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Clone)]
enum ExpertArg {
    None,
    SelfCaption,
    True,
    Wrong,
    Oracle(PathBuf),
}

impl FromStr for ExpertArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "self" => Ok(Self::SelfCaption),
            "true" => Ok(Self::True),
            "wrong" => Ok(Self::Wrong),
            _ => match s.strip_prefix("oracle:") {
                Some(p) if !p.is_empty() => Ok(Self::Oracle(PathBuf::from(p))),
                _ => Err(format!("unknown expert {s:?}; expected none, self, true, wrong or oracle:FILE")),
            },
        }
    }
}

impl ExpertArg {
    fn check(&self) -> Result<()> {
        if let Self::Oracle(p) = self {
            require_file(p)?;
        }
        Ok(())
    }

    fn build<'a>(&self, model: ModelAnswerer<'a>) -> Result<Option<Box<dyn Expert + 'a>>> {
        Ok(match self {
            Self::None => None,
            Self::SelfCaption => Some(Box::new(SelfCaptionExpert::new(model))),
            Self::True => Some(Box::new(OracleExpert::true_captions())),
            Self::Wrong => Some(Box::new(OracleExpert::wrong_colors())),
            Self::Oracle(p) => Some(Box::new(OracleExpert::load(p)?)),
        })
    }
}

/// Bad flags or paths, reported before any compute; exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{}: no such file", path.display())));
    }
    Ok(())
}

/// The output may be written: its directory exists and it is new, or
/// `force` is set.
fn require_writable(path: &Path, force: bool) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !dir.is_dir() {
        return Err(usage(format!("{}: directory does not exist", dir.display())));
    }
    if path.is_dir() {
        return Err(usage(format!("{}: is a directory", path.display())));
    }
    if path.exists() && !force {
        return Err(usage(format!("{}: already exists (pass --force to overwrite)", path.display())));
    }
    Ok(())
}

/// What a command reports besides its JSON output.
enum Outcome {
    Ok,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.downcast_ref::<UsageError>().is_some() { 1 } else { 2 })
        }
    }
}

fn emit(value: &Value) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Pretrain {
            config,
            corpus,
            out,
            seed,
            steps,
            force,
        } => {
            config.check()?;
            require_file(&corpus)?;
            require_writable(&out, force)?;
            let cfg = config.load()?;
            let mut pc = cfg.pretrain.clone();
            pc.seed = seed.unwrap_or(pc.seed);
            pc.steps = steps.unwrap_or(pc.steps);
            let text = std::fs::read_to_string(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
            let lines: Vec<String> = text.lines().map(str::to_string).collect();
            let t = Instant::now();
            let (weights, report) = pretrain_backbone(&cfg.backbone, &lines, &pc)?;
            weights.save(&out)?;
            emit(&json!({
                "command": "pretrain",
                "out": out,
                "steps": report.steps_run,
                "heldout_initial": report.heldout_initial,
                "heldout_final": report.heldout_final,
                "final_train_loss": report.losses.last(),
                "fingerprint": format!("{:016x}", weights.fingerprint()),
                "seconds": t.elapsed().as_secs_f64(),
            }))?;
        }
        Command::GenData {
            kind,
            n,
            seed,
            out,
            force,
        } => {
            require_writable(&out, force)?;
            let kind_name = match kind {
                DataKind::Caption => {
                    write_jsonl(&out, &gen_caption_dataset(n, seed)?)?;
                    "caption"
                }
                DataKind::Instruction => {
                    write_jsonl(&out, &gen_instruction_dataset(n, seed)?)?;
                    "instruction"
                }
                DataKind::InstructionEval => {
                    write_jsonl(&out, &gen_instruction_eval_set(n, seed)?)?;
                    "instruction-eval"
                }
                DataKind::Corpus => {
                    let mut text = gen_corpus(n, seed)?.join("\n");
                    text.push('\n');
                    std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
                    "corpus"
                }
            };
            emit(&json!({"command": "gen-data", "kind": kind_name, "n": n, "seed": seed, "out": out}))?;
        }
        Command::Adapt {
            config,
            backbone,
            captions,
            instructions,
            mode,
            out,
            log,
            seed,
            steps,
            force,
        } => {
            config.check()?;
            for p in [&backbone, &captions, &instructions] {
                require_file(p)?;
            }
            let log = log.unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".log.jsonl");
                PathBuf::from(s)
            });
            require_writable(&out, force)?;
            require_writable(&log, force)?;
            let cfg = config.load()?;
            let mut tc = cfg.train.clone();
            tc.seed = seed.unwrap_or(tc.seed);
            tc.steps = steps.unwrap_or(tc.steps);
            tc.validate()?;

            let bb = load_backbone(&backbone, &cfg)?;
            let max_len = cfg.backbone.max_seq_len;
            let encoder = VisualEncoder::new(cfg.adapter.feat_dim, cfg.encoder_seed)?;
            let caps: Vec<CaptionExample> = read_jsonl(&captions)?;
            let instr: Vec<InstructionExample> = read_jsonl(&instructions)?;
            let caps = caption_train_examples(&caps, &encoder, max_len)?;
            let instr = instruction_train_examples(&instr, max_len)?;
            let adapter = AdapterState::new(&bb, &cfg.adapter, tc.seed)?;

            let t = Instant::now();
            let mut session = TrainSession::new(&bb, adapter, &caps, &instr, mode.0, &tc)?;
            for i in 0..tc.steps {
                let r = session.step()?;
                if (i + 1) % 250 == 0 || i + 1 == tc.steps {
                    eprintln!("step {:>5} {:<11} loss {:.4}", r.step + 1, r.stream.as_str(), r.loss);
                }
            }
            let report = session.finish();
            report.adapter.save(&out)?;
            report.write_log(&log)?;
            let windows = |s: Stream| report.window_means(s, 0.1).map(|(a, b)| json!({"first": a, "last": b}));
            emit(&json!({
                "command": "adapt",
                "mode": mode.0.as_str(),
                "out": out,
                "log": log,
                "steps": report.records.len(),
                "loss_windows": {
                    "caption": windows(Stream::Caption),
                    "instruction": windows(Stream::Instruction),
                },
                "fingerprint": format!("{:016x}", report.adapter.fingerprint()),
                "seconds": t.elapsed().as_secs_f64(),
            }))?;
        }
        Command::Eval {
            model,
            suite,
            n,
            seed,
            attribute,
            expert,
        } => {
            model.config.check()?;
            require_file(&model.backbone)?;
            require_file(&model.adapter)?;
            expert.check()?;
            let cfg = model.config.load()?;
            let bb = load_backbone(&model.backbone, &cfg)?;
            let ad = AdapterState::load(&model.adapter, &bb.config)?;
            let encoder = VisualEncoder::new(ad.config.feat_dim, cfg.encoder_seed)?;
            let answerer = ModelAnswerer::new(AdaptedModel::new(&bb, &ad, model.fusion.into()), &encoder);
            let out = match suite {
                Suite::Vqa => {
                    let images = vqa_eval_images(n, seed);
                    let e = expert.build(answerer)?;
                    let r = eval_vqa_with_expert(&answerer, attribute.into(), &images, e.as_deref())?;
                    json!({
                        "suite": "vqa",
                        "attribute": r.attribute,
                        "n": n,
                        "seed": seed,
                        "accuracy": r.accuracy,
                        "predictions": r.predictions,
                    })
                }
                Suite::Caption => {
                    let r = eval_captions(&answerer)?;
                    let captions: Vec<Value> =
                        r.captions.iter().map(|(img, c)| json!({"image": img.to_string(), "caption": c})).collect();
                    json!({
                        "suite": "caption",
                        "color_shape_accuracy": r.color_shape_accuracy,
                        "exact_accuracy": r.exact_accuracy,
                        "captions": captions,
                    })
                }
                Suite::Instruction => {
                    let r = eval_instructions(&answerer, &gen_instruction_eval_set(n, seed)?)?;
                    json!({
                        "suite": "instruction",
                        "n": r.n,
                        "seed": seed,
                        "accuracy": r.accuracy,
                        "per_family": r.per_family,
                    })
                }
            };
            emit(&out)?;
        }
        Command::Generate {
            model,
            instruction,
            input,
            image,
            expert,
            max_new,
        } => {
            model.config.check()?;
            require_file(&model.backbone)?;
            require_file(&model.adapter)?;
            expert.check()?;
            let image: Option<SynthImage> = image
                .map(|s| s.parse().map_err(|e| usage(format!("--image: {e}"))))
                .transpose()?;
            if image.is_none() && !matches!(expert, ExpertArg::None) {
                bail!(usage("--expert needs --image".into()));
            }
            if image.is_some() && input.is_some() {
                bail!(usage("--input applies to text-only instructions".into()));
            }
            let cfg = model.config.load()?;
            let bb = load_backbone(&model.backbone, &cfg)?;
            let ad = AdapterState::load(&model.adapter, &bb.config)?;
            let encoder = VisualEncoder::new(ad.config.feat_dim, cfg.encoder_seed)?;
            let answerer = ModelAnswerer {
                max_new,
                ..ModelAnswerer::new(AdaptedModel::new(&bb, &ad, model.fusion.into()), &encoder)
            };
            let out = match image {
                Some(img) => {
                    let e = expert.build(answerer)?;
                    let a = answer_with_expert(&answerer, &img, &instruction, e.as_deref())?;
                    json!({
                        "instruction": instruction,
                        "image": img.to_string(),
                        "response": a.response,
                        "context": a.context,
                        "fell_back": a.fell_back,
                    })
                }
                None => {
                    let response = answerer.answer(&Query::text(&instruction, input.as_deref()))?;
                    json!({"instruction": instruction, "input": input, "response": response})
                }
            };
            emit(&out)?;
        }
        Command::Params { config } => {
            config.check()?;
            let cfg = config.load()?;
            let b = count_tunable(&cfg.backbone, &cfg.adapter)?;
            emit(&json!({
                "command": "params",
                "prompts": b.prompts,
                "gates": b.gates,
                "scale": b.scale,
                "bias": b.bias,
                "norms": b.norms,
                "visual_projection": b.visual_projection,
                "scale_bias_norm": b.scale_bias_norm(),
                "total": b.total,
                "tensor_count": b.tensor_count,
                "backbone_total": b.backbone_total,
                "fraction_of_backbone": b.fraction_of_backbone(),
                "scale_bias_norm_fraction": b.scale_bias_norm() as f64 / b.backbone_total as f64,
                "reference_total_7b": REFERENCE_TOTAL_7B,
                "total_over_reference": b.total as f64 / REFERENCE_TOTAL_7B as f64,
            }))?;
        }
        Command::Gradcheck { seed } => {
            let t = Instant::now();
            let report = run_gradient_suite(seed)?;
            let mut v = serde_json::to_value(&report)?;
            v["seconds"] = json!(t.elapsed().as_secs_f64());
            emit(&v)?;
            if !report.passed {
                return Ok(Outcome::CheckFailed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn load_backbone(path: &Path, cfg: &RunConfig) -> Result<BackboneWeights> {
    let bb = BackboneWeights::load(path).with_context(|| format!("loading {}", path.display()))?;
    check_backbone_match(&cfg.backbone, &bb.config)
        .with_context(|| format!("{} does not match the run configuration", path.display()))?;
    Ok(bb)
}
