//! gardiff: command-line driver for the try-on diffusion pipeline.
//!
//! Exit codes: 0 success, 2 config/schema error, 3 missing input,
//! 4 non-finite loss, 5 gradient-check failure, 1 other errors.
//! stdout carries machine-readable JSON; diagnostics go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gardiff_core::ablation::run_ablation;
use gardiff_core::checkpoint::{load_checkpoint, validate_shapes};
use gardiff_core::corpus::{build_corpus, CorpusSet};
use gardiff_core::diffusion::NoiseSchedule;
use gardiff_core::eval::{
    contact_sheet, eval_items, evaluate, DiffusionGenerator, EvalMode, Generator, OracleGenerator,
};
use gardiff_core::gradcheck::{gradcheck_items, gradient_check};
use gardiff_core::train::fit;
use gardiff_core::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "gardiff", version, about = "Garment-focused try-on diffusion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic try-on corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Override the corpus base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the denoising model on the corpus train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample images for test items from a checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for PNGs.
        #[arg(long)]
        out: PathBuf,
        /// Override the generation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint in the paired and unpaired settings.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to evaluate; optional when eval.oracle is set.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the evaluation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate the four ablation rows.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Test hook: corrupt the named parameter's gradient (expects failure).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn main() -> ExitCode {
    let threads = gardiff_core::init_threads();
    eprintln!("gardiff: using {threads} threads");
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::Missing(_) => 3,
                Error::NonFinite { .. } => 4,
                Error::GradCheck(_) => 5,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(
        cfg.diffusion.t_max,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )
}

fn open_corpus(cfg: &RunConfig) -> Result<CorpusSet> {
    CorpusSet::open(Path::new(&cfg.corpus.path))
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.corpus.base_seed = s;
            }
            let root = PathBuf::from(&cfg.corpus.path);
            let digest = build_corpus(&cfg.corpus, &root)?;
            println!(
                "{}",
                serde_json::json!({
                    "corpus": cfg.corpus.path,
                    "samples": cfg.corpus.train_count + cfg.corpus.test_count,
                    "digest": digest,
                    "config_digest": cfg.digest(),
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            checkpoint,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(p) = &checkpoint {
                if !p.exists() {
                    return Err(Error::Missing(format!("checkpoint {}", p.display())));
                }
            }
            let corpus = open_corpus(&cfg)?;
            let sched = schedule(&cfg)?;
            let out_dir = PathBuf::from(&cfg.out_root).join("train");
            let final_path = fit(
                &corpus,
                &cfg.model,
                &cfg.train,
                &sched,
                &out_dir,
                checkpoint.as_deref(),
            )?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": final_path,
                    "steps": cfg.train.steps,
                    "config_digest": cfg.digest(),
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sample {
            config,
            checkpoint,
            out,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            if !checkpoint.exists() {
                return Err(Error::Missing(format!(
                    "checkpoint {}",
                    checkpoint.display()
                )));
            }
            let corpus = open_corpus(&cfg)?;
            let sched = schedule(&cfg)?;
            let state = load_checkpoint(&checkpoint)?;
            validate_shapes(&state, &cfg.model)?;
            std::fs::create_dir_all(&out)?;
            let limit = Some(cfg.eval.items.unwrap_or(8));
            let items = eval_items(&corpus, EvalMode::Paired, limit, cfg.eval.seed)?;
            let gen = DiffusionGenerator {
                params: &state.params,
                model_cfg: &cfg.model,
                sched: &sched,
                sampler: cfg.sampler.clone(),
                use_gfa: cfg.train.use_gfa,
            };
            let images: Vec<_> = items
                .iter()
                .map(|item| gen.generate(item))
                .collect::<Result<_>>()?;
            for (item, img) in items.iter().zip(&images) {
                img.save_png(&out.join(format!("{:06}.png", item.id)))?;
            }
            contact_sheet(&items, &images, 16).save_png(&out.join("contact_sheet.png"))?;
            let digest = gardiff_core::digest::digest_tree(&out)?;
            println!(
                "{}",
                serde_json::json!({
                    "written": images.len(),
                    "out": out,
                    "digest": digest,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            config,
            checkpoint,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            let corpus = open_corpus(&cfg)?;
            let sched = schedule(&cfg)?;
            let limit = cfg.eval.items;
            // Keep the loaded state alive for the generator's lifetime.
            let mut loaded = None;
            let gen: Box<dyn Generator + '_> = if cfg.eval.oracle {
                Box::new(OracleGenerator)
            } else {
                let path = checkpoint
                    .as_ref()
                    .ok_or_else(|| Error::Missing("checkpoint (or set eval.oracle)".into()))?;
                if !path.exists() {
                    return Err(Error::Missing(format!("checkpoint {}", path.display())));
                }
                let state = load_checkpoint(path)?;
                validate_shapes(&state, &cfg.model)?;
                loaded = Some(state);
                Box::new(DiffusionGenerator {
                    params: &loaded.as_ref().expect("just set").params,
                    model_cfg: &cfg.model,
                    sched: &sched,
                    sampler: cfg.sampler.clone(),
                    use_gfa: cfg.train.use_gfa,
                })
            };
            let (paired, outputs) =
                evaluate(gen.as_ref(), &corpus, EvalMode::Paired, limit, cfg.eval.seed)?;
            let (unpaired, _) =
                evaluate(gen.as_ref(), &corpus, EvalMode::Unpaired, limit, cfg.eval.seed)?;
            drop(gen);
            let _ = loaded;
            let mut report = paired.merge(unpaired);
            report.config_digest = cfg.digest();
            report.corpus_digest = corpus.digest()?;
            let out_dir = PathBuf::from(&cfg.out_root);
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(
                out_dir.join("eval_report.json"),
                serde_json::to_string_pretty(&report).expect("report"),
            )?;
            if cfg.eval.contact_sheet {
                let items = eval_items(&corpus, EvalMode::Paired, limit, cfg.eval.seed)?;
                contact_sheet(&items, &outputs, 16)
                    .save_png(&out_dir.join("contact_sheet.png"))?;
            }
            println!("{}", serde_json::to_string(&report).expect("report"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { config } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = open_corpus(&cfg)?;
            let out_dir = PathBuf::from(&cfg.out_root).join("ablation");
            std::fs::create_dir_all(&out_dir)?;
            let table = run_ablation(&corpus, &cfg, &out_dir)?;
            println!("{}", serde_json::to_string(&table).expect("table"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { config, corrupt } => {
            let cfg = RunConfig::load(&config)?;
            let sched = schedule(&cfg)?;
            let items = gradcheck_items(&cfg.model, cfg.gradcheck.batch, cfg.gradcheck.seed)?;
            let report = gradient_check(
                &cfg.model,
                &sched,
                &cfg.train,
                &items,
                &cfg.gradcheck,
                corrupt.as_deref(),
            )?;
            println!("{}", serde_json::to_string(&report).expect("report"));
            if report.passed() {
                eprintln!(
                    "gradcheck: {} parameters checked, worst relative error {:.3e} ({})",
                    report.checked, report.worst_rel, report.worst_param
                );
                Ok(ExitCode::SUCCESS)
            } else {
                let names: Vec<&str> = report.failures.iter().map(|f| f.name.as_str()).collect();
                eprintln!("gradcheck failed for: {}", names.join(", "));
                Ok(ExitCode::from(5))
            }
        }
    }
}
