use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lfd_cli::commands;
use lfd_cli::serve::{serve, ServeOptions};
use lfd_cli::{Config, Resolved};
use lfd_core::nn::Architecture;
use lfd_core::sim::TaskKind;
use lfd_core::wire::to_line;

#[derive(Parser)]
#[command(name = "lfd", version, about = "Learn manipulation controllers from demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations.
    GenDemos {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        task: Option<TaskKind>,
    },
    /// Apply the task's augmentation chain to a raw dataset.
    Augment {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
    },
    /// Train one controller architecture.
    Train {
        #[command(flatten)]
        common: Common,
        dataset: PathBuf,
        #[arg(long)]
        arch: Option<Architecture>,
    },
    /// Evaluate checkpoints on seeded trials.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Re-run a recorded demonstration or controller trace.
    Replay {
        #[command(flatten)]
        common: Common,
        trace: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Serve the teleoperation protocol for recording demonstrations.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        task: Option<TaskKind>,
    },
}

fn resolve(common: &Common) -> Result<Resolved> {
    let mut r = Resolved::new(Config::load_or_default(common.config.as_deref())?);
    r.set("seed", common.seed, |c, v| c.seed = v);
    Ok(r)
}

fn set_task(r: &mut Resolved, task: Option<TaskKind>) {
    r.set("task", task, |c, v| {
        if c.scene.as_ref().is_some_and(|s| s.kind != v) {
            c.scene = None;
        }
        c.task = v;
    });
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenDemos { common, count, task } => {
            let mut r = resolve(&common)?;
            r.set("demos.count", count, |c, v| c.demos.count = v);
            set_task(&mut r, task);
            let out = common.out.unwrap_or_else(|| PathBuf::from(format!("{}-raw.jsonl", r.config.task)));
            let report = commands::gen_demos(&r, &out)?;
            println!("{}", to_line(&report)?);
        }
        Command::Augment { common, input } => {
            let r = resolve(&common)?;
            let out = common.out.unwrap_or_else(|| input.with_extension("augmented.jsonl"));
            let report = commands::augment(&r, &input, &out)?;
            println!("{}", to_line(&report)?);
        }
        Command::Train { common, dataset, arch } => {
            let mut r = resolve(&common)?;
            r.set("training.seed", common.seed, |c, v| c.training.seed = v);
            let arch = arch.unwrap_or(r.config.eval.architecture);
            let out = common.out.unwrap_or_else(|| PathBuf::from(format!("{arch}.ckpt")));
            let report = commands::train(&r, &dataset, arch, &out, &mut std::io::stderr())?;
            let stats_path = out.with_extension("stats.json");
            std::fs::write(&stats_path, to_line(&report)? + "\n").with_context(|| format!("writing {}", stats_path.display()))?;
            println!("{}", to_line(&report)?);
        }
        Command::Eval { common, checkpoints, trials } => {
            let mut r = resolve(&common)?;
            r.set("eval.trials", trials, |c, v| c.eval.trials = v);
            let reports = checkpoints
                .iter()
                .map(|p| commands::eval_checkpoint(&r, p))
                .collect::<Result<Vec<_>>>()?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("eval-report.jsonl"));
            let mut file = std::fs::File::create(&out).with_context(|| format!("writing {}", out.display()))?;
            for rep in &reports {
                file.write_all(rep.to_jsonl()?.as_bytes())?;
            }
            print!("{}", commands::table(&reports));
            for rep in &reports {
                for t in rep.results.iter().filter(|t| !t.success) {
                    eprintln!("{} {} seed {}: {:?}", rep.controller, rep.task, t.seed, t.failure);
                }
            }
        }
        Command::Replay { common, trace, index } => {
            print!("{}", commands::replay(&trace, index, common.out.as_deref())?);
        }
        Command::Serve { common, port, task } => {
            let mut r = resolve(&common)?;
            r.set("serve.port", port, |c, v| c.serve.port = v);
            r.set("serve.out", common.out.as_ref().map(|p| p.display().to_string()), |c, v| c.serve.out = v.into());
            set_task(&mut r, task);
            r.config.validate()?;
            let c = r.config;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind(("127.0.0.1", c.serve.port)).await?;
                eprintln!("serving {} on ws://{}/, saving to {}", c.task, listener.local_addr()?, c.serve.out.display());
                serve(
                    listener,
                    ServeOptions {
                        task: c.scene(),
                        out: c.serve.out.clone(),
                        seed: c.seed,
                    },
                )
                .await
            })?;
        }
    }
    Ok(())
}
