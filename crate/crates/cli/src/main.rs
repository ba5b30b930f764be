use std::path::PathBuf;

use accentvc::corpus::Accent;
use accentvc::kernel::gradcheck::LayerKind;
use accentvc::pipeline::{self, Config, Options, OUT_ENV};
use accentvc::SystemId;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

/// Voice and accent conversion experiments on a synthetic accented-speech
/// world.
#[derive(Parser, Debug)]
#[command(name = "accentvc", version)]
struct Cli {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; each seed gets its own `seed-N` directory.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the world and all corpus splits.
    GenCorpus,
    /// Train the speaker-independent recognizer on accent-M data.
    TrainRecognizer,
    /// Fine-tune the recognizer on the accent-T target speaker.
    FinetuneRecognizer,
    /// Train or resume one system's conversion model.
    TrainVc {
        #[arg(long)]
        system: SystemId,
    },
    /// Convert the source set to the target speakers and accents.
    Convert {
        #[arg(long)]
        system: SystemId,
        /// Target id such as `s1`; all targets when omitted.
        #[arg(long)]
        target: Option<String>,
        /// M or T; both when omitted.
        #[arg(long)]
        accent: Option<Accent>,
    },
    /// Score every trained system of the seed.
    Eval,
    /// Run every stage for every system and seed, then report across seeds.
    Ablation {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// Finite-difference gradient checks of the autodiff primitives.
    GradCheck {
        /// One layer tag; every layer when omitted.
        #[arg(long)]
        layer: Option<LayerKind>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write the 2-D PCA projection of encoder outputs on the parallel set.
    Project {
        #[arg(long)]
        system: SystemId,
    },
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(p) => Some(Config::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let opts = Options {
        out: cli.out.clone(),
        seed: cli.seed,
        force: cli.force,
        config,
        progress,
    };
    match cli.command {
        Command::GenCorpus => {
            let run = pipeline::gen_corpus(&opts)?;
            println!("corpus written to {}", run.dir.display());
            println!("manifest {}", run.manifest.hash);
        }
        Command::TrainRecognizer => {
            let p = pipeline::train_recognizer(&opts)?;
            println!("wrote {}", p.display());
        }
        Command::FinetuneRecognizer => {
            let p = pipeline::finetune_recognizer(&opts)?;
            println!("wrote {}", p.display());
        }
        Command::TrainVc { system } => {
            let o = pipeline::train_vc(&opts, system)?;
            if o.epochs_run == 0 {
                println!("{} already complete", o.checkpoint.display());
            } else {
                println!("ran {} epochs; wrote {} and {}", o.epochs_run, o.checkpoint.display(), o.log.display());
            }
        }
        Command::Convert { system, target, accent } => {
            let p = pipeline::convert(&opts, system, target.as_deref(), accent)?;
            println!("wrote {}", p.display());
        }
        Command::Eval => {
            let o = pipeline::eval(&opts)?;
            print!("{}", o.report.to_tsv());
        }
        Command::Ablation { seeds } => {
            let report = pipeline::ablation(&opts, &seeds)?;
            print!("{}", report.to_tsv());
        }
        Command::GradCheck { layer, trials, tol } => {
            let reports = pipeline::grad_checks(layer, trials, tol, cli.seed)?;
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "pass" } else { "FAIL" };
                println!("{:<16} {status}  max rel err {:.3e}", r.layer.tag(), r.max_error());
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!("{failed} layer(s) failed the gradient check");
            }
        }
        Command::Project { system } => {
            let p = pipeline::project(&opts, system)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
