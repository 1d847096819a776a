use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvfuse::config::{FusionMode, NoiseMode, RunConfig};
use mvfuse::datagen;
use mvfuse::trainer::{self, Checkpoint, EvalMode, Net};
use mvfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "mvfuse", version, about = "Gated two-view fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-view corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. `--set data.seed=3`.
        #[arg(long = "set", value_name = "KEY=JSON")]
        sets: Vec<String>,
    },
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        mode: Option<FusionMode>,
        #[arg(long)]
        noise: Option<NoiseMode>,
        /// Run directory of a baseline to compute the speedup against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=JSON")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint; prints JSON on stdout.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        partition: String,
        /// Sample branches with the last stage's thresholds.
        #[arg(long)]
        paper_inference: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a run's gradient and gate logs.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        svg: bool,
    },
}

fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=JSON, got {s:?}")))?;
        let value = serde_json::from_str(v.trim())
            .map_err(|e| Error::Config(format!("--set {k}: value is not JSON: {e}")))?;
        cfg.set(k.trim(), value)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, sets } => {
            let cfg = load_config(config.as_deref(), &sets)?;
            let corpus = datagen::generate_corpus(&cfg.data)?;
            datagen::save_corpus(&corpus, &out)?;
            let (lo, hi) = corpus.unit_range;
            log::info!(
                "wrote {}: train {} valid {} test {}, codebook distortion {:.6}, unit range [{lo}, {hi}]",
                out.display(),
                corpus.train.len(),
                corpus.valid.len(),
                corpus.test.len(),
                corpus.codebook_distortion
            );
        }
        Command::Train {
            config,
            data,
            out,
            init_from,
            mode,
            noise,
            baseline,
            sets,
        } => {
            let mut cfg = load_config(config.as_deref(), &sets)?;
            if let Some(m) = mode {
                cfg.train.fusion_mode = m;
            }
            if noise.is_some() {
                cfg.train.noise = noise;
            }
            let corpus = datagen::load_corpus(&data)?;
            let init = init_from.as_deref().map(Checkpoint::load).transpose()?;
            let s = trainer::run_training(cfg, corpus, &out, init.as_ref(), baseline.as_deref())?;
            log::info!(
                "{}: {} epochs, best valid accuracy {:?} at epoch {:?}, test accuracy {:.4}",
                s.fusion_mode,
                s.epochs_trained,
                s.best_valid_accuracy,
                s.epochs_to_best,
                s.test_accuracy
            );
            if let Some(b) = &s.baseline {
                log::info!(
                    "speedup ratio vs {}: {:.3}",
                    b.baseline_dir.display(),
                    b.speedup_ratio
                );
            }
        }
        Command::Eval {
            ckpt,
            data,
            partition,
            paper_inference,
            seed,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let corpus = datagen::load_corpus(&data)?;
            let m = &ck.meta.model;
            if m.fbank_dim != corpus.fbank_dim()
                || m.unit_dim != corpus.unit_dim()
                || m.vocab_size != corpus.spec.vocab_size
            {
                return Err(Error::Incompatible(format!(
                    "{} was trained on a corpus with different widths",
                    ckpt.display()
                )));
            }
            let net = Net {
                model: m,
                gate: &ck.meta.config.gsgn,
                mode: ck.meta.config.train.fusion_mode,
            };
            let mode = if paper_inference {
                EvalMode::PaperInference { seed }
            } else {
                EvalMode::Deterministic
            };
            let r = trainer::evaluate(
                &ck.params,
                &net,
                corpus.partition(&partition)?,
                ck.meta.config.train.batch_size,
                mode,
                &ck.meta.config.schedule.stages,
            )?;
            println!("{}", serde_json::to_string(&r).expect("result serializes"));
        }
        Command::Report { run, svg } => {
            let (rows, written) = mvfuse::report::write_report(&run, svg)?;
            log::info!("{} report rows; wrote {}", rows.len(), written.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
