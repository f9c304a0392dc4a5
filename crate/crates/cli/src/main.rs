//! `dualproc`: train, generate data, evaluate, sweep, analyze and plot.

mod plot;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand};
use serde_json::json;

use dualproc::analysis::{embedding_report, Stratum};
use dualproc::grammar::{build_eval_set, EvalKind, Lexicon, SeenPairs, UnseenSpec};
use dualproc::numerics::Rng;
use dualproc::trainer::{
    evaluate_checkpoint, load_checkpoint, plan_sweep, read_metrics, resume_experiment,
    run_experiment, write_manifest, ExperimentConfig, ManifestEntry, SweepGrid, CONFIG_FILE,
    METRICS_FILE,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "dualproc",
    version,
    about = "In-context vs in-weights learning lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model from a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Emit examples as JSON lines.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "validation")]
        kind: String,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a checkpoint into <out>/eval.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a parameter grid, one child process per cell.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// PCA coordinates and POS probes of a checkpoint's embeddings.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "head,tail,unseen")]
        strata: Vec<String>,
    },
    /// Per-metric CSV series and SVG line charts from metrics files.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// One label per metrics file; defaults to the parent directory name.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<dualproc::Error> for Failure {
    fn from(e: dualproc::Error) -> Self {
        match e {
            dualproc::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(config)?;
    let rec = match resume {
        Some(ck) => resume_experiment(&cfg, ck, out)?,
        None => run_experiment(&cfg, out)?,
    };
    println!(
        "{}",
        serde_json::to_string(&rec).expect("record serializes")
    );
    Ok(())
}

fn gen(config: &Path, n: usize, kind: &str, out: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(config)?;
    let kind: EvalKind = kind
        .parse()
        .map_err(|e: dualproc::Error| Failure::Usage(e.to_string()))?;
    let lex = Lexicon::new(&cfg.grammar)?;
    let spec = UnseenSpec {
        count: cfg.unseen_count,
        dist: cfg.unseen_dist,
        dim: cfg.model.d_model,
        init_std: cfg.model.init_std,
    };
    let mut rng = Rng::new(cfg.seed).split("gen").split(kind.name());
    let set = build_eval_set(kind, n, &lex, &SeenPairs::new(), &spec, &mut rng)?;
    let mut text = String::new();
    for (i, ex) in set.examples.iter().enumerate() {
        let mut line = json!({
            "kind": kind.name(),
            "tokens": ex.tokens,
            "targets": ex.targets,
            "meta": ex.meta,
        });
        if kind.is_switch() {
            line["ic_targets"] = json!(set.ic_targets[i]);
            line["iw_targets"] = json!(set.iw_targets[i]);
        }
        text.push_str(&line.to_string());
        text.push('\n');
    }
    match out {
        Some(path) => fs::write(path, text)
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display()))),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Runtime(e.to_string())),
    }
}

fn eval(checkpoint: &Path, out: &Path) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint).map_err(|e| Failure::Runtime(e.to_string()))?;
    let rec = evaluate_checkpoint(&ck).map_err(|e| Failure::Runtime(e.to_string()))?;
    create_out(out)?;
    let path = out.join("eval.json");
    let text = serde_json::to_string(&rec).expect("record serializes") + "\n";
    fs::write(&path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn analyze(checkpoint: &Path, out: &Path, strata: &[String]) -> CliResult<()> {
    let strata: Vec<Stratum> = strata
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|e: dualproc::Error| Failure::Usage(e.to_string()))
        })
        .collect::<CliResult<_>>()?;
    let ck = load_checkpoint(checkpoint).map_err(|e| Failure::Runtime(e.to_string()))?;
    let results =
        embedding_report(&ck, &strata, out).map_err(|e| Failure::Runtime(e.to_string()))?;
    for r in results {
        println!(
            "{}: heldout {:.4} (train {:.4})",
            r.stratum, r.heldout_acc, r.train_acc
        );
    }
    Ok(())
}

fn sweep(config: &Path, grid: &Path, out: &Path, jobs: usize) -> CliResult<()> {
    let base = load_config(config)?;
    let text = fs::read_to_string(grid)
        .map_err(|e| Failure::Usage(format!("cannot read grid {}: {e}", grid.display())))?;
    let grid: SweepGrid = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", grid.display())))?;
    let cells = plan_sweep(&base, &grid)?;
    create_out(out)?;
    let exe = std::env::current_exe().map_err(|e| Failure::Runtime(e.to_string()))?;

    let mut entries: Vec<ManifestEntry> = cells
        .iter()
        .map(|c| ManifestEntry {
            cell: c.params.clone(),
            directory: c.directory.clone(),
            status: "pending".into(),
            error: None,
            final_metrics: None,
        })
        .collect();
    let mut runnable = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        match &cell.config {
            Err(msg) => {
                entries[i].status = "config_error".into();
                entries[i].error = Some(msg.clone());
            }
            Ok(cfg) => {
                let dir = out.join(&cell.directory);
                create_out(&dir)?;
                let path = dir.join(CONFIG_FILE);
                let text = serde_json::to_string_pretty(cfg).expect("config serializes");
                fs::write(&path, text + "\n")
                    .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
                runnable.push(i);
            }
        }
    }
    write_manifest(out, &entries)?;

    for batch in runnable.chunks(jobs.max(1)) {
        let children: Vec<_> = batch
            .iter()
            .map(|&i| {
                let dir = out.join(&cells[i].directory);
                let child = Command::new(&exe)
                    .arg("train")
                    .arg("--config")
                    .arg(dir.join(CONFIG_FILE))
                    .arg("--out")
                    .arg(&dir)
                    .stdout(std::process::Stdio::null())
                    .stderr(std::process::Stdio::piped())
                    .spawn();
                (i, child)
            })
            .collect();
        for (i, child) in children {
            let e = &mut entries[i];
            let output = child.and_then(|c| c.wait_with_output());
            match output {
                Ok(o) if o.status.success() => {
                    let metrics = out.join(&e.directory).join(METRICS_FILE);
                    e.status = "ok".into();
                    e.final_metrics = read_metrics(&metrics).ok().and_then(|m| m.last().cloned());
                }
                Ok(o) => {
                    e.status = "failed".into();
                    e.error = Some(String::from_utf8_lossy(&o.stderr).trim().to_string());
                }
                Err(err) => {
                    e.status = "failed".into();
                    e.error = Some(err.to_string());
                }
            }
        }
        write_manifest(out, &entries)?;
    }
    let failed = entries.iter().filter(|e| e.status != "ok").count();
    println!("{} cells, {failed} not ok", entries.len());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Cmd::Train {
            config,
            out,
            resume,
        } => train(&config, &out, resume.as_deref()),
        Cmd::Gen {
            config,
            n,
            kind,
            out,
        } => gen(&config, n, &kind, out.as_deref()),
        Cmd::Eval { checkpoint, out } => eval(&checkpoint, &out),
        Cmd::Sweep {
            config,
            grid,
            out,
            jobs,
        } => sweep(&config, &grid, &out, jobs),
        Cmd::Analyze {
            checkpoint,
            out,
            strata,
        } => analyze(&checkpoint, &out, &strata),
        Cmd::Plot {
            metrics,
            out,
            labels,
        } => plot::run(&metrics, &labels, &out).map_err(Failure::Runtime),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
