use std::path::PathBuf;
use std::process::ExitCode;

use amava_core::classifier::{save_model, train, LabeledDataset, LabeledRow, TrainConfig};
use amava_core::corpus::{separable_dataset, synthetic_clips, ClipSpec};
use amava_core::features::{extract_features, FlowParams};
use amava_core::metrics::{analyze_file, export};
use amava_gateway::config::ServerConfig;
use anyhow::Context;
use clap::{Parser, Subcommand};
use tracing::info;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "amava", version, about = "Motion-aware video-to-audio server and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the WebSocket server.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the motion classifier from a feature CSV.
    Train {
        /// CSV with columns frame_diff,flow_mag,label.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        wd: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Summarize a session event log into a metrics CSV.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a labelled feature CSV from synthetic clips.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample features directly from separated class regions instead of
        /// rendering clips.
        #[arg(long)]
        separable: bool,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config } => return serve(config),
        Command::Train {
            data,
            out,
            seed,
            lr,
            wd,
            batch,
            patience,
            max_epochs,
        } => {
            let d = TrainConfig::default();
            let cfg = TrainConfig {
                learning_rate: lr.unwrap_or(d.learning_rate),
                weight_decay: wd.unwrap_or(d.weight_decay),
                batch_size: batch.unwrap_or(d.batch_size),
                patience: patience.unwrap_or(d.patience),
                max_epochs: max_epochs.unwrap_or(d.max_epochs),
                seed,
            };
            run_train(&data, &out, &cfg)
        }
        Command::Analyze { log, out } => run_analyze(&log, &out),
        Command::Corpus {
            out,
            per_class,
            seed,
            separable,
        } => run_corpus(&out, per_class, seed, separable),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn serve(config: PathBuf) -> ExitCode {
    let resolved = match ServerConfig::load(&config).and_then(ServerConfig::resolve) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}: {e}", config.display());
            return ExitCode::from(2);
        }
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: starting runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    let result: anyhow::Result<()> = rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(resolved.config.listen)
            .await
            .with_context(|| format!("binding {}", resolved.config.listen))?;
        info!(addr = %listener.local_addr()?, "listening on /ws");
        tokio::select! {
            r = amava_gateway::server::serve(listener, resolved) => r.context("server")?,
            _ = tokio::signal::ctrl_c() => info!("shutting down"),
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run_train(data: &std::path::Path, out: &std::path::Path, cfg: &TrainConfig) -> anyhow::Result<()> {
    let dataset = LabeledDataset::read_csv(data).with_context(|| format!("reading {}", data.display()))?;
    let trained = train(&dataset, cfg)?;
    save_model(&trained.params, &trained.scaler, out).with_context(|| format!("writing {}", out.display()))?;
    let r = &trained.report;
    println!(
        "rows {} (train {}, val {}, test {}), epochs {}, test accuracy {:.4}",
        dataset.rows().len(),
        r.split_sizes[0],
        r.split_sizes[1],
        r.split_sizes[2],
        r.epochs_run(),
        r.test_accuracy
    );
    Ok(())
}

fn run_analyze(log: &std::path::Path, out: &std::path::Path) -> anyhow::Result<()> {
    let report = analyze_file(log)?;
    export(&report, out)?;
    println!(
        "events {}, played {}, drops {}, latency mean {:.1} ms p95 {:.1} ms, reordering {:.4}",
        report.events, report.played, report.drops, report.latency_mean_ms, report.latency_p95_ms, report.reordering_rate
    );
    Ok(())
}

fn run_corpus(out: &std::path::Path, per_class: usize, seed: u64, separable: bool) -> anyhow::Result<()> {
    anyhow::ensure!(per_class > 0, "--per-class must be positive");
    let dataset = if separable {
        separable_dataset(per_class * 3, seed)
    } else {
        let params = FlowParams::default();
        let mut rows = Vec::new();
        for clip in synthetic_clips(&ClipSpec::default(), per_class, seed) {
            rows.push(LabeledRow {
                features: extract_features(&clip.batch, &params)?,
                label: clip.label,
            });
        }
        LabeledDataset::new(rows)
    };
    dataset.write_csv(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} rows to {}", dataset.rows().len(), out.display());
    Ok(())
}
