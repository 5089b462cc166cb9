//! `flimsel`: serve the workbench API, synthesize data, replay the
//! selection loop, train, infer and evaluate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flim_core::dataset::{Dataset, Split};
use flim_core::io::{
    load_checkpoint, read_volume, save_checkpoint, synth_dataset, write_labels, SynthConfig,
};
use flim_core::session::{evaluate_split, Session, SessionConfig};
use flim_core::simulate::{
    simulate, SimConfig, Strategy, DEFAULT_LABEL_THRESHOLD, DEFAULT_MARKERS_PER_CLASS,
    DEFAULT_SIM_EPOCHS,
};
use flim_core::sunet::ArchSpec;
use flim_core::train::TrainConfig;

#[derive(Parser)]
#[command(name = "flimsel", version, about = "Interactive FLIM workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the HTTP API.
    Serve {
        #[arg(long, default_value = ".")]
        data_root: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Write a synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        cases: usize,
        /// One extent for a cube, or a comma-separated list of 2 or 3.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long)]
        test_fraction: Option<f64>,
    },
    /// Replay the selection loop with oracle markers and automatic labels.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 8)]
        budget: usize,
        #[arg(long, default_value = "interactive", value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Decoder epochs per evaluation; 0 runs selection only.
        #[arg(long, default_value_t = DEFAULT_SIM_EPOCHS)]
        epochs: usize,
        /// Numbers of selected images after which to train and evaluate.
        #[arg(long, value_delimiter = ',')]
        eval_steps: Option<Vec<usize>>,
        /// Per-step score tables.
        #[arg(long)]
        scores_out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LABEL_THRESHOLD)]
        label_threshold: f64,
        #[arg(long, default_value_t = DEFAULT_MARKERS_PER_CLASS)]
        markers_per_class: usize,
        #[command(flatten)]
        arch: ArchArg,
    },
    /// Train the decoder of a checkpoint whose encoders are complete.
    TrainDecoder {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 2.5e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the trained checkpoint; defaults to overwriting.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch loss CSV.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Predict a label volume for one case.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Case id from `--manifest`.
        #[arg(long, requires = "manifest", conflicts_with_all = ["flair", "t1gd"])]
        case: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "t1gd")]
        flair: Option<PathBuf>,
        #[arg(long, requires = "flair")]
        t1gd: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice per region on a split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
}

#[derive(Args)]
struct ArchArg {
    /// JSON architecture description; defaults to the standard network.
    #[arg(long)]
    arch: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: flim_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown split {s:?}"))
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<flim_core::Error> for Failure {
    fn from(e: flim_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_arch(a: &ArchArg) -> Result<ArchSpec, Failure> {
    let Some(p) = &a.arch else {
        return Ok(ArchSpec::default());
    };
    let text =
        std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
    let arch: ArchSpec =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
    arch.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(arch)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Serve {
            data_root,
            host,
            port,
        } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .map_err(|e| Failure::Runtime(format!("bind {host}:{port}: {e}")))?;
                log::info!("listening on {}", listener.local_addr()?);
                eprintln!("listening on {}", listener.local_addr()?);
                let state = flim_service::AppState::new(data_root);
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                    eprintln!("shutting down; cancelling running jobs");
                };
                flim_service::serve(listener, state, shutdown).await?;
                Ok(())
            })
        }
        Command::Synth {
            cases,
            dims,
            seed,
            out,
            val_fraction,
            test_fraction,
        } => {
            let dims = if dims.len() == 1 {
                vec![dims[0]; 3]
            } else {
                dims
            };
            let mut cfg = SynthConfig::new(cases, dims, seed);
            if let Some(v) = val_fraction {
                cfg.val_fraction = v;
            }
            if let Some(t) = test_fraction {
                cfg.test_fraction = t;
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let m = synth_dataset(&cfg, &out)?;
            println!(
                "wrote {} cases and {}",
                m.cases.len(),
                out.join("manifest.json").display()
            );
            Ok(())
        }
        Command::Simulate {
            manifest,
            budget,
            strategy,
            seeds,
            out,
            epochs,
            eval_steps,
            scores_out,
            label_threshold,
            markers_per_class,
            arch,
        } => {
            if budget == 0 {
                return Err(Failure::Usage("--budget must be at least 1".into()));
            }
            let mut cfg = SimConfig::new(strategy, budget, seeds);
            cfg.label_threshold = label_threshold;
            cfg.markers_per_class = markers_per_class;
            cfg.arch = load_arch(&arch)?;
            cfg.eval_steps = eval_steps;
            cfg.train = (epochs > 0).then(|| TrainConfig {
                epochs,
                ..TrainConfig::default()
            });
            let ds = Dataset::load(&manifest)?;
            let res = simulate(&ds, &cfg)?;
            write_file(&out, &res.to_csv())?;
            if let Some(p) = scores_out {
                write_file(&p, &res.scores_csv())?;
            }
            print!("{}", res.to_csv());
            Ok(())
        }
        Command::TrainDecoder {
            manifest,
            checkpoint,
            epochs,
            lr,
            seed,
            out,
            loss_log,
        } => {
            let cfg = TrainConfig {
                epochs,
                lr0: lr,
                seed,
                ..TrainConfig::default()
            };
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let ds = Dataset::load(&manifest)?;
            let mut session =
                Session::restore(SessionConfig::default(), load_checkpoint(&checkpoint)?)?;
            let log = session
                .train_decoder(&ds, &cfg, &mut |e, _| {
                    log::info!("epoch {} loss {:.6} lr {:.3e}", e.epoch, e.mean_loss, e.lr);
                    true
                })?
                .clone();
            let target = out.unwrap_or(checkpoint);
            save_checkpoint(&session.checkpoint(), &target)?;
            if let Some(p) = loss_log {
                write_file(&p, &log.to_csv())?;
            }
            if let Some(last) = log.epochs.last() {
                println!(
                    "trained {} epochs, final loss {:.6}",
                    log.epochs.len(),
                    last.mean_loss
                );
            }
            println!("wrote {}", target.display());
            Ok(())
        }
        Command::Infer {
            checkpoint,
            case,
            manifest,
            flair,
            t1gd,
            out,
        } => {
            let net = load_checkpoint(&checkpoint)?.to_net()?;
            let labels = match (case, manifest, flair, t1gd) {
                (Some(id), Some(m), _, _) => {
                    let ds = Dataset::load(&m)?;
                    let c = ds.get(&id)?;
                    net.predict(&c.flair, &c.t1gd)?
                }
                (None, _, Some(f), Some(t)) => net.predict(&read_volume(&f)?, &read_volume(&t)?)?,
                _ => {
                    return Err(Failure::Usage(
                        "give --case with --manifest, or --flair with --t1gd".into(),
                    ))
                }
            };
            write_labels(&labels, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval {
            manifest,
            checkpoint,
            out,
            split,
        } => {
            let net = load_checkpoint(&checkpoint)?.to_net()?;
            let ds = Dataset::load(&manifest)?;
            let report = evaluate_split(&net, &ds, split)?;
            write_file(&out, &report.to_csv())?;
            print!("{}", report.pretty());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
