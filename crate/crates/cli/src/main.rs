use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use repcnn::data::{generate_synthetic_dataset, SynthSpec};
use repcnn::eval::BenchConfig;
use repcnn::experiment::{self, ExperimentSpec, DEFAULT_FA};

#[derive(Parser)]
#[command(name = "repcnn", version, about = "Train, fuse, stream and evaluate RepCNN wake-word models")]
struct Cli {
    /// Worker threads for data and evaluation work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed from an experiment spec.
    Train {
        #[arg(long)]
        spec: PathBuf,
        /// Train this seed only, overriding the spec's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding the spec's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-parameterize a training model into its inference graph.
    Fuse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment spec whose validation split calibrates the clip bounds.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Score the test splits and write det.csv and summary.csv.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Experiment spec naming the manifest.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_FA)]
        fa_target: f64,
    },
    /// Train every branch count and compare final validation losses.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        /// Comma-separated branch counts.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5])]
        branches: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_FA)]
        fa_target: f64,
    },
    /// Time streaming and windowed inference for a model and its fusion.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seconds of audio streamed per timing run.
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
    },
    /// Generate the synthetic keyword corpus and its manifest.
    Synth {
        /// JSON synthesis settings; defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_spec(path: &Path, out: Option<PathBuf>) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(path)?;
    if let Some(o) = out {
        spec.output_dir = o;
    }
    Ok(spec)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    match cli.command {
        Command::Train { spec, seed, out } => {
            let mut spec = load_spec(&spec, out)?;
            if let Some(s) = seed {
                spec.seeds = Some(vec![s]);
            }
            let outcome = experiment::run_train(&spec)?;
            for (path, curve) in outcome.model_paths.iter().zip(&outcome.curves) {
                let val = curve.final_val_loss().map_or("n/a".to_string(), |v| format!("{v:.5}"));
                println!("{}  final val loss {val}", path.display());
            }
            println!("{}", outcome.curves_path.display());
        }
        Command::Fuse { model, out, spec } => {
            let manifest = match spec {
                Some(p) => Some(ExperimentSpec::load(&p)?.manifest),
                None => None,
            };
            let report = experiment::run_fuse(&model, &out, manifest.as_deref())?;
            info!("wrote {}", out.display());
            print_json(&report)?;
        }
        Command::Eval {
            model,
            spec,
            out,
            fa_target,
        } => {
            let spec = load_spec(&spec, None)?;
            let out = out.unwrap_or_else(|| spec.output_dir.join("eval"));
            let summary = experiment::run_eval(&model, &spec.manifest, &out, fa_target)?;
            print_json(&summary)?;
        }
        Command::Ablate {
            spec,
            branches,
            out,
            fa_target,
        } => {
            let spec = load_spec(&spec, out)?;
            let rows = experiment::run_ablation(&spec, &branches, fa_target)?;
            for r in &rows {
                let frr = r.mean_frr_at_target.map_or("n/a".to_string(), |v| format!("{v:.2}%"));
                println!("n={}  mean val loss {:.5}  FRR@{fa_target} FA/hr {frr}", r.branches, r.mean_val_loss);
            }
            println!("{}", spec.output_dir.join("ablation.csv").display());
        }
        Command::Bench {
            model,
            out,
            seed,
            seconds,
        } => {
            let cfg = BenchConfig {
                seed,
                ..BenchConfig::default()
            };
            let report = experiment::run_bench(&model, &out, seconds, &cfg)?;
            for r in &report.rows {
                println!(
                    "{:>5}  stream median {:.1} us  window median {:.1} us  peak {} B  params {} B",
                    r.graph, r.stream_median_us, r.window_median_us, r.peak_activation_bytes, r.param_bytes
                );
            }
        }
        Command::Synth { spec, out, seed } => {
            let synth: SynthSpec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("{} is not a valid synth spec", p.display()))?
                }
                None => SynthSpec::default(),
            };
            let manifest = generate_synthetic_dataset(&synth, seed, &out)?;
            println!("{} utterances, manifest {}", manifest.entries.len(), out.join("manifest.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REPCNN_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("repcnn: {msg}");
            ExitCode::FAILURE
        }
    }
}
