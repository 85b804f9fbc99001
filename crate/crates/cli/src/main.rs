use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lazy_attention::model::Model;
use lazy_attention::training::{tokenize, TrainConfig};
use lazy_attention::{checkpoint, corpus, diagnostics, par, training};

#[derive(Parser)]
#[command(name = "lazyattn", version, about = "Train and probe toy Lazy Attention language models")]
struct Cli {
    /// Run the batch/head loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a flat key-value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Perplexity at one or more evaluation lengths (non-overlapping windows).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: PathBuf,
        /// Comma-separated lengths; defaults to n_ctx, 2·n_ctx, 4·n_ctx.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated-token probe: per-head translation-invariance scores.
    ProbeRepeat {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Token id to repeat (default: the byte of "t").
        #[arg(long, default_value_t = b't' as usize)]
        token: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the captured weights (layer, head, i, j, alpha).
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Value-vector and hidden-state norm/variance for the first 15 positions.
    StatsSink {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learned distance biases (layer, head, distance, bias).
    ExportBias {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learned offsets (layer, head, tau).
    ExportOffsets {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention density and sink ratio per head.
    MeasureDensity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: PathBuf,
        /// Limit on n_ctx-token windows read from the text.
        #[arg(long)]
        windows: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention weights of the first n_ctx tokens of a text.
    ExportWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a deterministic synthetic English-like corpus.
    GenCorpus {
        #[arg(long, default_value_t = 2_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(dir: &Path) -> Result<Model<f32>> {
    let (model, _) = checkpoint::load::<f32>(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok(model)
}

fn read_text(path: &Path) -> Result<Vec<u16>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.is_empty() {
        bail!("{} is empty", path.display());
    }
    Ok(tokenize(&bytes))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(cli: Cli) -> Result<()> {
    if cli.sequential {
        par::set_parallel(false);
    }
    match cli.command {
        Command::Train { config } => {
            let cfg = TrainConfig::from_file(&config)?;
            let s = training::train(cfg)?;
            println!(
                "trained {} steps in {:.1}s: train loss {:.4}, eval loss {:.4}; checkpoint at {}",
                s.steps,
                s.seconds,
                s.final_loss,
                s.eval_loss,
                s.checkpoint.display()
            );
        }
        Command::Eval { checkpoint, text, lengths, out } => {
            let model = load(&checkpoint)?;
            let n = model.config.n_ctx;
            let lengths = if lengths.is_empty() { vec![n, 2 * n, 4 * n] } else { lengths };
            let rows = diagnostics::eval_ppl(&model, &read_text(&text)?, &lengths)?;
            diagnostics::write_ppl_csv(&rows, create(&out)?)?;
        }
        Command::ProbeRepeat { checkpoint, token, n, out, weights_out } => {
            let model = load(&checkpoint)?;
            let report = diagnostics::probe_repeated(&model, token, n)?;
            report.write_csv(create(&out)?)?;
            if let Some(w) = weights_out {
                report.capture.write_csv(create(&w)?)?;
            }
            println!("weight invariance {:.3e}, score invariance {:.3e}", report.weight_score(), report.score_score());
        }
        Command::StatsSink { checkpoint, text, out } => {
            let model = load(&checkpoint)?;
            let tokens: Vec<usize> = read_text(&text)?.into_iter().map(usize::from).collect();
            let rows = diagnostics::sink_variance_report(&model, &tokens)?;
            diagnostics::write_sink_csv(&rows, create(&out)?)?;
        }
        Command::ExportBias { checkpoint, out } => {
            diagnostics::export_bias(&load(&checkpoint)?, create(&out)?)?;
        }
        Command::ExportOffsets { checkpoint, out } => {
            diagnostics::export_offsets(&load(&checkpoint)?, create(&out)?)?;
        }
        Command::MeasureDensity { checkpoint, text, windows, out } => {
            let model = load(&checkpoint)?;
            let stats = diagnostics::measure_density(&model, &read_text(&text)?, windows)?;
            diagnostics::write_density_csv(&stats, create(&out)?)?;
            println!("density {:.2}%, sink {:.2}%", stats.density_pct, stats.sink_pct);
        }
        Command::ExportWeights { checkpoint, text, out } => {
            let model = load(&checkpoint)?;
            let capture = diagnostics::capture_windows(&model, &read_text(&text)?, Some(1))?;
            capture.write_csv(create(&out)?)?;
        }
        Command::GenCorpus { bytes, seed, out } => {
            if bytes == 0 {
                bail!("--bytes must be positive");
            }
            fs::write(&out, corpus::synthetic_text(bytes, seed))
                .with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
