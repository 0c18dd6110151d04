//! `coarl` command line: the three training phases, generation,
//! evaluation, reward scoring, data validation, and prompt rendering.
//!
//! Every subcommand reads `--config` (a strict-schema JSON run config;
//! omitted means paper defaults) plus targeted overrides. All randomness
//! descends from the single global seed. Failures print one
//! machine-parseable line `error[<category>]: <message>` and exit nonzero.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use coarl_core::config::{prepare_run_directory, ConfigError, RunConfig, RunDirs};
use coarl_core::data::{
    self, build_fewshot_prompt, bm25_select_exemplars, CSRecord, Intent, Split, TaskId,
    TemplateSet, ValidationReport,
};
use coarl_core::eval::{evaluate_run, load_generations_jsonl, EvalSource};
use coarl_core::lora::{attach, LoraAdapter};
use coarl_core::model::Seq2SeqModel;
use coarl_core::ppo::{train_phase3, CompositeRewardFn, RolloutPrompt};
use coarl_core::reward::{composite_reward, ScorerRegistry, ScorerSet};
use coarl_core::train::{train_phase1, train_phase2};

const DEFAULT_PREAMBLE: &str = include_str!("../../../fixtures/preamble.txt");

struct CliError {
    category: &'static str,
    message: String,
}

impl CliError {
    fn new(category: &'static str, message: impl Into<String>) -> Self {
        CliError {
            category,
            message: message.into(),
        }
    }
}

macro_rules! from_err {
    ($ty:ty, $cat:literal) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($cat, e.to_string())
            }
        }
    };
}

from_err!(ConfigError, "config");
from_err!(coarl_core::data::DataError, "data");
from_err!(coarl_core::model::ModelError, "model");
from_err!(coarl_core::lora::LoraError, "lora");
from_err!(coarl_core::train::TrainError, "train");
from_err!(coarl_core::ppo::PpoError, "ppo");
from_err!(coarl_core::reward::RewardError, "reward");
from_err!(coarl_core::eval::EvalError, "eval");
from_err!(std::io::Error, "io");

#[derive(Parser)]
#[command(name = "coarl", version, about = "Counterspeech generation training pipeline")]
struct Cli {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Cs,
    Explanations,
}

#[derive(Subcommand)]
enum Command {
    /// Phase 1: multi-task instruction tuning on explanation records.
    #[command(name = "phase1-train")]
    Phase1Train {
        #[arg(long)]
        out_dir: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Phase 2: LoRA adapter training on a frozen phase-1 checkpoint.
    #[command(name = "phase2-train")]
    Phase2Train {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
        /// Phase-1 model checkpoint (theta_m).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Phase 3: PPO against the composite reward.
    #[command(name = "phase3-ppo")]
    Phase3Ppo {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
        /// Phase-1 model checkpoint (theta_m).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Phase-2 adapter checkpoint (theta_SFT).
        #[arg(long)]
        adapter: PathBuf,
    },
    /// Decode one counterspeech for a hate speech statement.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        hs: String,
        /// INF, POS, QUE or DEN.
        #[arg(long)]
        intent: String,
        /// Sample instead of greedy decoding.
        #[arg(long)]
        sample: bool,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Score generations (from a file or a checkpoint) against a test set.
    Evaluate {
        /// Test set JSONL of counterspeech records.
        #[arg(long)]
        test: PathBuf,
        /// Prior generations JSONL {id, intent, generated}.
        #[arg(long)]
        generations: Option<PathBuf>,
        /// Model checkpoint to greedy-decode with instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Also write the report as CSV.
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Read JSONL {"x", "y"} pairs and emit composite reward breakdowns.
    #[command(name = "reward-score")]
    RewardScore {
        #[arg(long)]
        input: PathBuf,
        /// Output JSONL path; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Validate a JSONL dataset and report per-line errors.
    #[command(name = "validate-data")]
    ValidateData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "cs")]
        kind: DataKind,
    },
    /// Render an instruction template, or a BM25 few-shot prompt.
    #[command(name = "render-prompt")]
    RenderPrompt {
        /// Task id I1..I8 (template mode).
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        hs: String,
        /// Required for I8 and for --fewshot.
        #[arg(long)]
        intent: Option<String>,
        /// Few-shot mode: preamble + instruction + BM25 exemplars.
        #[arg(long)]
        fewshot: bool,
        /// Exemplar corpus JSONL (few-shot mode).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        exemplars: usize,
        /// Preamble text file; overrides the config path.
        #[arg(long)]
        preamble: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COARL_LOG", "error")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error[{}]: {}", e.category, e.message);
        std::process::exit(1);
    }
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let cfg = match cli_config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    Ok(cfg.resolve(seed))
}

fn load_templates(cfg: &RunConfig) -> Result<TemplateSet, CliError> {
    match &cfg.data.templates_path {
        Some(path) => Ok(TemplateSet::from_json_file(path)?),
        None => Ok(TemplateSet::default()),
    }
}

/// Load a dataset strictly: any per-line validation error aborts.
fn load_cs_strict(path: &Path) -> Result<Vec<CSRecord>, CliError> {
    let (records, report) = data::load_cs_jsonl(path)?;
    reject_invalid(path, &report)?;
    Ok(records)
}

fn reject_invalid(path: &Path, report: &ValidationReport) -> Result<(), CliError> {
    if let Some(first) = report.errors.first() {
        return Err(CliError::new(
            "data",
            format!(
                "{}: {} invalid lines (first: line {}: {})",
                path.display(),
                report.errors.len(),
                first.line,
                first.message
            ),
        ));
    }
    Ok(())
}

fn data_path(opt: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    opt.clone()
        .ok_or_else(|| CliError::new("config", format!("data.{key} is not set in the config")))
}

fn scorer_set(cfg: &RunConfig) -> Result<ScorerSet, CliError> {
    let registry = ScorerRegistry::builtin();
    Ok(ScorerSet::from_config(&registry, &cfg.reward)?)
}

fn parse_intent(s: &str) -> Result<Intent, CliError> {
    Intent::from_str(s).map_err(|e| CliError::new("data", e.to_string()))
}

fn prepare(out_dir: &Path, cfg: &RunConfig, force: bool) -> Result<RunDirs, CliError> {
    Ok(prepare_run_directory(out_dir, cfg, force)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::Phase1Train { out_dir, force } => {
            let templates = load_templates(&cfg)?;
            let train_path = data_path(&cfg.data.explanations_path, "explanations_path")?;
            let (records, report) = data::load_explanations_jsonl(&train_path)?;
            reject_invalid(&train_path, &report)?;
            let dev = match &cfg.data.explanations_dev_path {
                Some(p) => {
                    let (recs, report) = data::load_explanations_jsonl(p)?;
                    reject_invalid(p, &report)?;
                    Some(recs)
                }
                None => None,
            };
            let dirs = prepare(&out_dir, &cfg, force)?;
            let mut model = Seq2SeqModel::init(cfg.model.clone(), cfg.seed)?;
            let mut tc = cfg.phase1.clone();
            tc.checkpoint_dir = dirs.checkpoints.clone();
            tc.metrics_dir = Some(dirs.metrics.clone());
            let outcome = train_phase1(&mut model, &records, dev.as_deref(), &templates, &tc)?;
            println!(
                "phase1 done: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
                outcome.steps,
                outcome.loss_curve.first().copied().unwrap_or(f64::NAN),
                outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
                outcome.final_checkpoint.display()
            );
            Ok(())
        }
        Command::Phase2Train {
            out_dir,
            force,
            checkpoint,
        } => {
            let templates = load_templates(&cfg)?;
            let cs_path = data_path(&cfg.data.cs_path, "cs_path")?;
            let records = load_cs_strict(&cs_path)?;
            let train: Vec<CSRecord> = records
                .iter()
                .filter(|r| r.split == Split::Train)
                .cloned()
                .collect();
            let dev: Vec<CSRecord> = records
                .iter()
                .filter(|r| r.split == Split::Dev)
                .cloned()
                .collect();
            if train.is_empty() {
                return Err(CliError::new("data", "no records with split \"train\""));
            }
            let dirs = prepare(&out_dir, &cfg, force)?;
            let mut model = Seq2SeqModel::load(&checkpoint, "model")?;
            model.params.freeze_all(true);
            let mut adapter = attach(&mut model, cfg.lora.clone(), cfg.seed)?;
            let mut tc = cfg.phase2.clone();
            tc.checkpoint_dir = dirs.checkpoints.clone();
            tc.metrics_dir = Some(dirs.metrics.clone());
            let dev_opt = (!dev.is_empty()).then_some(dev.as_slice());
            let outcome = train_phase2(&model, &mut adapter, &train, dev_opt, &templates, &tc)?;
            println!(
                "phase2 done: {} steps, loss {:.4} -> {:.4}, adapter {}",
                outcome.steps,
                outcome.loss_curve.first().copied().unwrap_or(f64::NAN),
                outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
                outcome.final_checkpoint.display()
            );
            Ok(())
        }
        Command::Phase3Ppo {
            out_dir,
            force,
            checkpoint,
            adapter,
        } => {
            let templates = load_templates(&cfg)?;
            let cs_path = data_path(&cfg.data.cs_path, "cs_path")?;
            let records = load_cs_strict(&cs_path)?;
            let train: Vec<&CSRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
            if train.is_empty() {
                return Err(CliError::new("data", "no records with split \"train\""));
            }
            let dirs = prepare(&out_dir, &cfg, force)?;
            let mut model = Seq2SeqModel::load(&checkpoint, "model")?;
            model.params.freeze_all(true);
            let sft = LoraAdapter::load_for(&adapter, &model)?;
            let prompts: Vec<RolloutPrompt> = train
                .iter()
                .map(|r| {
                    let text = templates.render(TaskId::I8, &r.hate_speech, Some(r.intent))?;
                    Ok(RolloutPrompt {
                        topic: if cfg.reward.score_on_raw_hs {
                            r.hate_speech.clone()
                        } else {
                            text.clone()
                        },
                        text,
                    })
                })
                .collect::<Result<_, coarl_core::data::DataError>>()?;
            let reward_fn = CompositeRewardFn {
                scorers: scorer_set(&cfg)?,
            };
            let mut pc = cfg.ppo.clone();
            pc.checkpoint_dir = dirs.checkpoints.clone();
            pc.metrics_dir = Some(dirs.metrics.clone());
            let (_policy, outcome) = train_phase3(&model, &sft, &prompts, &reward_fn, &pc)?;
            println!(
                "phase3 done: {} batches, mean reward {:.4} -> {:.4}, policy {}",
                outcome.batches_run,
                outcome.reward_curve.first().copied().unwrap_or(f64::NAN),
                outcome.reward_curve.last().copied().unwrap_or(f64::NAN),
                outcome.final_checkpoint.display()
            );
            Ok(())
        }
        Command::Generate {
            checkpoint,
            adapter,
            hs,
            intent,
            sample,
            max_new_tokens,
        } => {
            let templates = load_templates(&cfg)?;
            let model = Seq2SeqModel::load(&checkpoint, "model")?;
            let adapter = match adapter {
                Some(p) => Some(LoraAdapter::load_for(&p, &model)?),
                None => None,
            };
            let intent = parse_intent(&intent)?;
            let prompt = templates.render(TaskId::I8, &hs, Some(intent))?;
            let ids = data::tokenize(&prompt, model.config.max_seq_len).ids;
            let mut sampling = cfg.sampling.clone();
            if sample {
                sampling.do_sample = true;
            }
            if let Some(m) = max_new_tokens {
                sampling.max_new_tokens = m;
            }
            let out = model.generate(&ids, &sampling, adapter.as_ref())?;
            println!("{}", data::detokenize(&out));
            Ok(())
        }
        Command::Evaluate {
            test,
            generations,
            checkpoint,
            adapter,
            csv_out,
        } => {
            let templates = load_templates(&cfg)?;
            let test_set = load_cs_strict(&test)?;
            let scorers = scorer_set(&cfg)?;
            let (model, adapter_loaded);
            let report = match (&generations, &checkpoint) {
                (Some(gen_path), _) => {
                    let gens = load_generations_jsonl(gen_path)?;
                    // The embedding model for cosine similarity: the
                    // checkpoint when given, else a seeded default model.
                    model = match checkpoint {
                        Some(p) => Seq2SeqModel::load(&p, "model")?,
                        None => Seq2SeqModel::init(cfg.model.clone(), cfg.seed)?,
                    };
                    evaluate_run(EvalSource::Generations(&gens), &test_set, &model, &scorers)?
                }
                (None, Some(ckpt)) => {
                    model = Seq2SeqModel::load(ckpt, "model")?;
                    adapter_loaded = match adapter {
                        Some(p) => Some(LoraAdapter::load_for(&p, &model)?),
                        None => None,
                    };
                    evaluate_run(
                        EvalSource::Model {
                            model: &model,
                            adapter: adapter_loaded.as_ref(),
                            templates: &templates,
                            max_new_tokens: cfg.eval.max_new_tokens,
                        },
                        &test_set,
                        &model,
                        &scorers,
                    )?
                }
                (None, None) => {
                    return Err(CliError::new(
                        "eval",
                        "pass --generations or --checkpoint to supply outputs",
                    ));
                }
            };
            print!("{}", report.render_table());
            if let Some(path) = csv_out {
                std::fs::write(&path, report.to_csv())?;
            }
            Ok(())
        }
        Command::RewardScore { input, output } => {
            let scorers = scorer_set(&cfg)?;
            let text = std::fs::read_to_string(&input)?;
            let mut out: Box<dyn Write> = match &output {
                Some(p) => Box::new(std::fs::File::create(p)?),
                None => Box::new(std::io::stdout().lock()),
            };
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let v: serde_json::Value = serde_json::from_str(line).map_err(|e| {
                    CliError::new("data", format!("{}:{}: {e}", input.display(), i + 1))
                })?;
                let (Some(x), Some(y)) = (v["x"].as_str(), v["y"].as_str()) else {
                    return Err(CliError::new(
                        "data",
                        format!("{}:{}: expected string fields \"x\" and \"y\"", input.display(), i + 1),
                    ));
                };
                let breakdown = composite_reward(x, y, &scorers)?;
                writeln!(out, "{}", serde_json::to_string(&breakdown).expect("breakdown json"))?;
            }
            Ok(())
        }
        Command::ValidateData { input, kind } => {
            let report = match kind {
                DataKind::Cs => data::load_cs_jsonl(&input)?.1,
                DataKind::Explanations => data::load_explanations_jsonl(&input)?.1,
            };
            println!("{report}");
            if report.is_clean() {
                Ok(())
            } else {
                Err(CliError::new(
                    "data",
                    format!("{} invalid lines in {}", report.errors.len(), input.display()),
                ))
            }
        }
        Command::RenderPrompt {
            task,
            hs,
            intent,
            fewshot,
            corpus,
            exemplars,
            preamble,
        } => {
            let templates = load_templates(&cfg)?;
            let intent_parsed = intent.as_deref().map(parse_intent).transpose()?;
            if fewshot {
                let intent = intent_parsed
                    .ok_or_else(|| CliError::new("data", "--fewshot requires --intent"))?;
                let corpus_path = corpus
                    .ok_or_else(|| CliError::new("data", "--fewshot requires --corpus"))?;
                // Exemplars must carry the requested intent.
                let pool: Vec<CSRecord> = load_cs_strict(&corpus_path)?
                    .into_iter()
                    .filter(|r| r.intent == intent)
                    .collect();
                let picked = bm25_select_exemplars(&hs, &pool, exemplars)?;
                let preamble_text = match preamble.or_else(|| cfg.data.preamble_path.clone()) {
                    Some(p) => std::fs::read_to_string(&p)?,
                    None => DEFAULT_PREAMBLE.to_string(),
                };
                println!("{}", build_fewshot_prompt(&hs, intent, &picked, &preamble_text));
            } else {
                let task_name = task
                    .ok_or_else(|| CliError::new("data", "--task is required (I1..I8)"))?;
                let task = TaskId::from_str(&task_name)?;
                println!("{}", templates.render(task, &hs, intent_parsed)?);
            }
            Ok(())
        }
    }
}
