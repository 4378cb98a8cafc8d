//! Command-line driver. Every stage reads and writes checkpoints under the
//! output root, so the pipeline can run end to end (`run-all`) or one
//! resumable stage at a time.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 stage failure
//! (including missing upstream artifacts), 3 invariant violation (frozen
//! weights drifted, checkpoint fingerprints do not match).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use intapt_core::accent::train_am;
use intapt_core::backbone::pretrain;
use intapt_core::config::ExperimentConfig;
use intapt_core::error::{Error, Result};
use intapt_core::pipeline::{
    accent_path, backbone_path, corpus_cache_path, eval_seed_dir, load_accent_stage,
    load_backbone_stage, load_or_build_corpus, render_text, report_from_dirs, resolve_output_root,
    run_experiment, seed_dir,
};
use intapt_core::trainer::{train_finetune, train_intapt, train_prompt_ctc, Regime};
use intapt_core::Real;

mod overrides;
use overrides::Overrides;

#[derive(Parser)]
#[command(
    name = "intapt",
    version,
    about = "Accent-invariant prompt tuning on synthetic speech features",
    after_help = "Artifacts land under --output-root (or $INTAPT_OUTPUT_ROOT, default runs/)."
)]
struct Cli {
    /// JSON experiment configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Artifact directory; beats the INTAPT_OUTPUT_ROOT environment variable.
    #[arg(long, global = true, value_name = "DIR")]
    output_root: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the synthetic corpus cache (reused when the hash matches).
    GenData,
    /// Pretrain the backbone for one seed.
    Pretrain(SeedArg),
    /// Train the accent module against a pretrained backbone.
    TrainAm(SeedArg),
    /// Train one regime for one seed.
    Train(TrainArgs),
    /// Recompute a seed's evaluation from its persisted checkpoints.
    Eval(SeedArg),
    /// Aggregate the per-seed evaluations into the final report.
    Report,
    /// Everything: corpus, every seed through all regimes, eval, report.
    RunAll,
}

#[derive(Args)]
struct SeedArg {
    /// Training seed; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self, cfg: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(cfg.seeds[0])
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    seed: SeedArg,

    /// finetune, prompt_ctc, or intapt.
    #[arg(long)]
    regime: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // clap defaults to exit code 2; usage mistakes are config errors
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(help) => {
            print!("{help}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 1,
        Error::FrozenDrift(_) | Error::BadCheckpoint(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    let root = resolve_output_root(cli.output_root.as_deref());

    match &cli.cmd {
        Cmd::GenData => {
            let path = corpus_cache_path(&root, &cfg);
            let cached = path.exists();
            let corpus = load_or_build_corpus(&root, &cfg)?;
            println!(
                "{} corpus at {} ({} utterances)",
                if cached { "reused" } else { "built" },
                path.display(),
                corpus.utterances.len()
            );
        }
        Cmd::Pretrain(arg) => {
            let seed = arg.resolve(&cfg);
            let corpus = load_or_build_corpus(&root, &cfg)?;
            let dir = seed_dir(&root, seed);
            std::fs::create_dir_all(&dir)?;
            let (bb, stats) = pretrain::<Real>(&corpus, &cfg, seed)?;
            bb.save(&backbone_path(&dir), &stats)?;
            println!(
                "pretrained seed {seed}: dev wer {:.4} at epoch {}, saved {}",
                stats.dev_wer,
                stats.chosen_epoch,
                backbone_path(&dir).display()
            );
        }
        Cmd::TrainAm(arg) => {
            let seed = arg.resolve(&cfg);
            let corpus = load_or_build_corpus(&root, &cfg)?;
            let dir = seed_dir(&root, seed);
            let (bb, _) = load_backbone_stage::<Real>(&dir, "train-am")?;
            let (am, stats) = train_am(&corpus, &bb, &cfg, seed)?;
            am.save(&accent_path(&dir), &stats)?;
            println!(
                "accent module seed {seed}: dev accuracy {:.4}, intensity correlation {:.4}, saved {}",
                stats.dev_accuracy,
                stats.intensity_correlation,
                accent_path(&dir).display()
            );
        }
        Cmd::Train(args) => {
            let regime = Regime::from_tag(&args.regime).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown regime {:?} (expected finetune, prompt_ctc, or intapt)",
                    args.regime
                ))
            })?;
            let seed = args.seed.resolve(&cfg);
            let corpus = load_or_build_corpus(&root, &cfg)?;
            let dir = seed_dir(&root, seed);
            let (bb, _) = load_backbone_stage::<Real>(&dir, "train")?;
            let run = match regime {
                Regime::Finetune => train_finetune(&corpus, &bb, &cfg, seed)?,
                Regime::PromptCtc => train_prompt_ctc(&corpus, &bb, &cfg, seed)?,
                Regime::Intapt => {
                    let (am, _) = load_accent_stage::<Real>(&dir, "train")?;
                    train_intapt(&corpus, &bb, &am, &cfg, seed)?
                }
            };
            let out = dir.join(regime.tag());
            run.save(&out, &cfg)?;
            println!(
                "{regime} seed {seed}: dev wer {:.4} at epoch {}, saved {}",
                run.stats.dev_wer,
                run.stats.chosen_epoch,
                out.display()
            );
        }
        Cmd::Eval(arg) => {
            let seed = arg.resolve(&cfg);
            let corpus = load_or_build_corpus(&root, &cfg)?;
            let dir = seed_dir(&root, seed);
            let report = eval_seed_dir::<Real>(&cfg, &corpus, seed, &dir)?;
            println!("seed {seed} evaluation, saved {}", dir.join("eval.json").display());
            println!("  backbone   L2 {:.4}  L1 {:.4}", report.baseline_l2.all, report.baseline_l1_wer);
            for r in &report.regimes {
                println!(
                    "  {:<10} L2 {:.4}  L1 {:.4} (drift {:+.4})",
                    r.regime.tag(),
                    r.l2_test.all,
                    r.l1_wer,
                    r.l1_delta
                );
            }
        }
        Cmd::Report => {
            let report = report_from_dirs(&cfg, &root)?;
            println!("saved {} and report.txt", root.join("report.json").display());
            println!("\n{}", render_text(&report));
        }
        Cmd::RunAll => {
            let report = run_experiment::<Real>(&cfg, &root)?;
            println!("artifacts under {}", root.display());
            println!("\n{}", render_text(&report));
        }
    }
    Ok(())
}
