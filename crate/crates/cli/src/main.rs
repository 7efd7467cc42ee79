use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pointadapt::acquisition::{AcquisitionConfig, Strategy};
use pointadapt::pipeline::{run_plan, ExperimentPlan, OracleDriver, SimulatedOracle};
use pointadapt_cli as cmd;
use pointadapt_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "pointadapt", version, about = "Cross-domain segmentation with actively selected point labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ToyShapes-DA dataset.
    Generate {
        /// Flat key=value dataset config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: adversarial entropy adaptation.
    TrainUda {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root with source/ and target_train/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write probability and entropy maps for a target split.
    ExportMaps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select patches and sample point requests from entropy maps.
    Acquire {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        grid_m: usize,
        #[arg(long, default_value_t = 8)]
        grid_n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer manifests from ground-truth labels (simulated oracle).
    Oracle {
        #[arg(long)]
        manifests: PathBuf,
        /// Split directory whose labels/ hold the ground truth.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge answered manifests with pseudo labels into weak label maps.
    Merge {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        manifests: PathBuf,
        #[command(flatten)]
        pseudo: PseudoArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the annotation queue (PADAPT_DATA_DIR, PADAPT_PORT, PADAPT_ALLOW_SIM_ORACLE).
    Serve,
    /// Stage 2: training on weak target labels.
    TrainWeakDa {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weak_labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU on a labeled split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Table and panels from a finished plan output.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to <results>/report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-seed experiment plans.
    Plan {
        #[command(subcommand)]
        action: PlanAction,
    },
}

#[derive(Args)]
struct PseudoArgs {
    /// Pseudo labels only at sampled points instead of whole patches.
    #[arg(long)]
    pseudo_points: bool,
    #[arg(long, default_value_t = 5)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum PlanAction {
    Run {
        plan: PathBuf,
        /// Collect answers through the annotation service instead of the
        /// built-in simulated oracle.
        #[arg(long)]
        human: bool,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Per-arm limit for a human session.
        #[arg(long, default_value_t = 86_400)]
        timeout_secs: u64,
        /// Expose POST /v1/oracle/run during human sessions.
        #[arg(long)]
        allow_sim_oracle: bool,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    match Cli::parse().command {
        Command::Generate { config, out } => {
            let cfg = cmd::generate(config.as_deref(), &out)?;
            println!("wrote {}/{}/{} images to {}", cfg.n_source, cfg.n_target, cfg.n_val, out.display());
        }
        Command::TrainUda { config, data, out } => {
            cmd::train_uda_cmd(&config, &data, &out)?;
            println!("checkpoint in {}", out.display());
        }
        Command::ExportMaps { ckpt, data, out } => {
            let n = cmd::export_maps(&ckpt, &data, &out)?;
            println!("exported maps for {n} images to {}", out.display());
        }
        Command::Acquire { maps, strategy, k, points, seed, grid_m, grid_n, out } => {
            let cfg = AcquisitionConfig { strategy, k, points_per_patch: points, seed, grid_m, grid_n, pseudo_dense: true };
            let manifests = cmd::acquire(&maps, &cfg, &out)?;
            let requests: usize = manifests.iter().map(|m| m.points.len()).sum();
            println!("{} manifests, {requests} requests in {}", manifests.len(), out.display());
        }
        Command::Oracle { manifests, truth, out } => {
            let n = cmd::oracle(&manifests, &truth, &out)?;
            println!("answered {n} requests into {}", out.display());
        }
        Command::Merge { maps, manifests, pseudo, out } => {
            let cfg = AcquisitionConfig {
                points_per_patch: pseudo.points,
                seed: pseudo.seed,
                pseudo_dense: !pseudo.pseudo_points,
                ..Default::default()
            };
            let n = cmd::merge(&maps, &manifests, &cfg, &out)?;
            println!("wrote weak labels for {n} images to {}", out.display());
        }
        Command::Serve => {
            let cfg = ServiceConfig::from_env()?;
            let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
            rt.block_on(pointadapt_service::serve(cfg))?;
        }
        Command::TrainWeakDa { config, data, weak_labels, out } => {
            cmd::train_weak_da_cmd(&config, &data, &weak_labels, &out)?;
            println!("checkpoint in {}", out.display());
        }
        Command::Eval { ckpt, data, out } => {
            let s = cmd::eval(&ckpt, &data, &out)?;
            println!("mIoU {:.4} (all-zero convention {:.4})", s.miou, s.miou_all_zero_convention);
        }
        Command::Report { results, out } => {
            let out = out.unwrap_or_else(|| cmd::report_dir(&results));
            let files = cmd::report(&results, &out)?;
            print!("{}", std::fs::read_to_string(&files.table_txt)?);
            for m in &files.missing {
                println!("missing: {m}");
            }
        }
        Command::Plan { action: PlanAction::Run { plan, human, bind, timeout_secs, allow_sim_oracle } } => {
            let plan = ExperimentPlan::load(&plan)?;
            let mut oracle: Box<dyn OracleDriver> = if human {
                let mut s = cmd::HumanSession::new(bind, Duration::from_secs(timeout_secs));
                s.allow_sim_oracle = allow_sim_oracle;
                Box::new(s)
            } else {
                if allow_sim_oracle {
                    bail!("--allow-sim-oracle only applies together with --human");
                }
                Box::new(SimulatedOracle)
            };
            let start = Instant::now();
            let results = run_plan(&plan, oracle.as_mut(), &mut |msg| {
                eprintln!("[{:>6.0}s] {msg}", start.elapsed().as_secs_f64())
            })?;
            for s in &results.summary {
                match (s.median, s.mean) {
                    (Some(med), Some(mean)) => {
                        println!("{:<12} median {:.4}  mean {:.4}  ({} runs)", s.arm, med, mean, s.completed)
                    }
                    _ => println!("{:<12} no completed runs", s.arm),
                }
            }
            let failed = results.runs.iter().filter(|r| r.error.is_some()).count();
            cmd::report(&plan.output, &cmd::report_dir(&plan.output))?;
            println!("results in {}", plan.output.display());
            if failed > 0 {
                bail!("{failed} runs failed; see results.json");
            }
        }
    }
    Ok(())
}
