use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use segloop_core::harness::{self, HarnessConfig, HarnessError, PolicyBinding};
use segloop_core::policy::Teacher;

#[derive(Parser)]
#[command(name = "segloop", version, about = "Synthetic interactive segmentation environment and training harness")]
struct Cli {
    /// JSON config file; falls back to $SEGLOOP_CONFIG, then defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a reproducible scene corpus.
    GenScenes {
        #[arg(long)]
        n: usize,
    },
    /// Run a policy over a task set and score every episode.
    Run {
        /// Scripted teacher name, `stdio:CMD ARGS` or `tcp:HOST:PORT`.
        #[arg(long)]
        policy: PolicyBinding,
        /// Scene directory from gen-scenes; generated from the config when absent.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Score one trajectory log against a ground-truth mask.
    Score {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Curate a run directory into an SFT dataset.
    Filter {
        #[arg(long)]
        run: PathBuf,
    },
    /// Train the toy policy on the prompt-selection bandit.
    TrainToy,
    /// gIoU and cIoU of trajectory logs against ground-truth masks.
    Eval {
        /// Directory of NAME.jsonl logs.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of NAME.json masks.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Answer observation frames on stdin, or on a TCP socket with --listen.
    ServePolicy {
        #[arg(long)]
        policy: Teacher,
        #[arg(long)]
        listen: Option<String>,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = HarnessConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let out = cfg.out.clone();
    match cli.cmd {
        Cmd::GenScenes { n } => {
            let m = harness::gen_scenes(n, &cfg, &out)?;
            eprintln!("wrote {} scenes to {}", m.n, out.display());
        }
        Cmd::Run { policy, scenes, tasks } => {
            if let Some(n) = tasks {
                cfg.tasks = n;
            }
            let scenes = match scenes {
                Some(dir) => harness::load_scenes(&dir)?,
                None => harness::make_scenes(cfg.tasks, cfg.scenes, cfg.seed, &cfg)?,
            };
            let tasks = harness::tasks_for(scenes, cfg.seed)?;
            print_json(&harness::run(&policy, &tasks, &cfg, &out)?);
        }
        Cmd::Score { log, gt } => {
            println!("{}", harness::score(&log, &gt, &cfg)?.to_json());
        }
        Cmd::Filter { run } => {
            print_json(&harness::filter(&run, &cfg, &out)?.manifest);
        }
        Cmd::TrainToy => print_json(&harness::train(&cfg, &out)?),
        Cmd::Eval { pred, gt } => print_json(&harness::eval(&pred, &gt)?),
        Cmd::ServePolicy { policy, listen } => match listen {
            Some(addr) => harness::serve_tcp(&addr, policy, cfg.seed, |a| eprintln!("listening on {a}"))?,
            None => {
                let stdin = io::stdin();
                harness::serve(BufReader::new(stdin.lock()), io::stdout().lock(), policy, cfg.seed)?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("segloop: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
