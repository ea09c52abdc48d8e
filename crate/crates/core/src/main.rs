use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use aovr::dataset::generate_synthetic;
use aovr::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "aovr", version, about = "Active open-vocabulary recognition lab")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed and the synthetic-world seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world into the output directory.
    Synth,
    /// Validate an AOVR1 container and copy it into the output directory.
    Ingest {
        #[arg(long)]
        /// AOVR1 container to validate
        input: PathBuf,
    },
    /// Viewpoint-sensitivity, random-vs-best and occlusion studies.
    Investigate,
    /// Train fusion and policy; writes checkpoints and curves.
    Train,
    /// Evaluate every configured agent from the saved checkpoints.
    Eval,
    /// Write per-episode JSON lines from the saved checkpoints.
    Trace,
    /// Merge evaluation CSVs into a summary.
    Report,
    /// Run every stage in order.
    Run,
    /// Print the effective configuration as TOML.
    Config,
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global().context("starting thread pool")?;
    let out = cfg.out.clone();

    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::Synth => {
            let ds = generate_synthetic(&cfg.synth).map_err(|e| e.in_stage("ingest"))?;
            let s = harness::stage_ingest(&ds, "synthetic", &cfg, &out)?;
            println!("wrote {} ({} objects, sha256 {})", out.join(harness::DATASET_FILE).display(), s.objects, s.sha256);
        }
        Command::Ingest { input } => {
            let s = harness::ingest_file(&input, &cfg, &out)?;
            println!("validated {} ({} objects, sha256 {})", input.display(), s.objects, s.sha256);
        }
        Command::Investigate => {
            let (ds, _) = harness::resolve_dataset(&cfg, &out)?;
            harness::stage_investigate(&ds, &cfg, &out)?;
            println!("wrote {}", out.join("investigate").display());
        }
        Command::Train => {
            let (ds, _) = harness::resolve_dataset(&cfg, &out)?;
            let agent = harness::stage_train(&ds, &cfg, &out)?;
            if let Some(u) = agent.updates.last() {
                println!("trained {} updates, final mean reward {:.4}", u.update, u.mean_reward);
            }
        }
        Command::Eval | Command::Trace => {
            let (ds, _) = harness::resolve_dataset(&cfg, &out)?;
            let stage = if matches!(cli.command, Command::Eval) { "eval" } else { "trace" };
            let (fusion, policy) = harness::load_models(&out).map_err(|e| e.in_stage(stage))?;
            if stage == "eval" {
                for r in harness::stage_eval(&ds, &fusion, &policy, &cfg, &out)? {
                    let top1 = r.final_top1(harness::Predictor::Attention, aovr::classifier::Subset::Open);
                    println!("{}: final open top-1 {}", r.agent, top1.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into()));
                }
            } else {
                println!("wrote {}", harness::stage_trace(&ds, &fusion, &policy, &cfg, &out)?.display());
            }
        }
        Command::Report => {
            harness::stage_report(&out)?;
            println!("wrote {}", out.join("summary.json").display());
        }
        Command::Run => {
            harness::run_experiment(&cfg)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
