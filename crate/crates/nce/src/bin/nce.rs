use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nce::analysis::{self, GradSource, SweepRow};
use nce::arch::ArchDesc;
use nce::config::{self, ResolvedConfig};
use nce::costmodel::exact_cost;
use nce::data::{generate, DataBundle};
use nce::error::{Error, Result};
use nce::pipeline::{
    self, metrics_csv, ExperimentState, RunOutcome, SearchMode,
};
use nce::rundir::{self, RunDir};
use nce::supernet::SuperNet;

#[derive(Parser)]
#[command(name = "nce", version, about = "Channel-count architecture search under low-bit quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full search pipeline: warm-up, search, derive, retrain.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Output run directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from the run directory's checkpoint if present.
        #[arg(long)]
        resume: bool,
    },
    /// Train a fixed architecture file under the config's quantization.
    Retrain {
        #[arg(long)]
        config: PathBuf,
        /// Architecture preset name or JSON file (overrides the config).
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a comparison baseline: fixed, random, prune-only, width-multiplier.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        /// Mode override (fixed | random | prune-only | width-multiplier).
        #[arg(long)]
        mode: String,
        /// Width multiplier for width-multiplier mode.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export diagnostics CSVs from a finished or checkpointed run directory.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        /// Probe batch count for the signal profile.
        #[arg(long, default_value_t = 64)]
        probes: usize,
    },
    /// Per-layer FLOPs (MACs) and PARAMs accounting for an architecture.
    Cost {
        /// Preset name or architecture JSON file.
        #[arg(long)]
        arch: String,
        /// Input resolution override.
        #[arg(long)]
        input_size: Option<usize>,
    },
    /// Write the built-in architecture presets as JSON files.
    ExportArch {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Accuracy-vs-cost trade-off table over width multipliers.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated width multipliers.
        #[arg(long, default_value = "0.75,1.0,1.25")]
        gammas: String,
        /// Seeds per point.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Also run the config's own (search) mode as a sweep point.
        #[arg(long)]
        with_search: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e);
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Search { config, out, seed, resume } => {
            let resolved = load_resolved(&config, seed, None)?;
            if !resolved.pipeline.mode.searches() {
                return Err(Error::Usage(format!(
                    "search requires mode nce or prune-only, got {:?}; use `baseline`",
                    resolved.pipeline.mode
                )));
            }
            run_to_dir(&resolved, out, resume)
        }
        Command::Retrain { config, arch, seed, out } => {
            let mut resolved = load_resolved(&config, seed, Some(SearchMode::Fixed))?;
            if let Some(a) = arch {
                resolved.arch = config::load_arch(&a)?;
            }
            run_to_dir(&resolved, out, false)
        }
        Command::Baseline { config, mode, gamma, seed, out } => {
            let mode = parse_mode(&mode)?;
            let mut resolved = load_resolved(&config, seed, Some(mode))?;
            if let Some(g) = gamma {
                resolved.pipeline.gamma = g;
                resolved.file.search.gamma = g;
            }
            run_to_dir(&resolved, out, false)
        }
        Command::Analyze { run, probes } => analyze(&run, probes),
        Command::Cost { arch, input_size } => {
            let desc = config::load_arch(&arch)?;
            let size = input_size.unwrap_or(desc.input_size);
            let report = exact_cost(&desc, size)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::ExportArch { dir } => {
            std::fs::create_dir_all(&dir)?;
            for name in nce::arch::PRESET_NAMES {
                let desc = nce::arch::preset(name).expect("preset list is authoritative");
                let path = dir.join(format!("{name}.json"));
                desc.save(&path)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Sweep { config, gammas, seeds, with_search, out } => {
            sweep(&config, &gammas, seeds, with_search, out)
        }
    }
}

fn parse_mode(s: &str) -> Result<SearchMode> {
    match s {
        "fixed" => Ok(SearchMode::Fixed),
        "random" => Ok(SearchMode::Random),
        "prune-only" => Ok(SearchMode::PruneOnly),
        "width-multiplier" => Ok(SearchMode::WidthMultiplier),
        "nce" => Ok(SearchMode::Nce),
        other => Err(Error::Config(format!(
            "unknown baseline mode '{other}' (fixed | random | prune-only | width-multiplier)"
        ))),
    }
}

fn load_resolved(
    path: &Path,
    seed: Option<u64>,
    mode: Option<SearchMode>,
) -> Result<ResolvedConfig> {
    let mut file = config::parse_config(path)?;
    if let Some(s) = seed {
        file.run.seed = s;
    }
    if let Some(m) = mode {
        file.run.mode = m;
    }
    let resolved = config::resolve(file)?;
    nce::par::set_thread_count(resolved.file.run.threads);
    Ok(resolved)
}

fn default_out_dir(resolved: &ResolvedConfig) -> PathBuf {
    if let Some(d) = &resolved.file.run.out_dir {
        return PathBuf::from(d);
    }
    let mode = format!("{:?}", resolved.pipeline.mode).to_lowercase();
    PathBuf::from(format!(
        "runs/{}-{}-seed{}",
        resolved.arch.name, mode, resolved.pipeline.seed
    ))
}

fn run_to_dir(resolved: &ResolvedConfig, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let root = out.unwrap_or_else(|| default_out_dir(resolved));
    let dir = RunDir::create(&root, &config::to_toml(&resolved.file)?)?;
    let data = generate(&resolved.file.dataset, resolved.pipeline.seed)?;
    let ckpt = dir.path(rundir::CHECKPOINT_FILE);

    let (net, outcome) = if resume && ckpt.exists() {
        let state = ExperimentState::load(&ckpt)?;
        pipeline::resume_experiment(state, &data, Some(&ckpt))?
    } else if resolved.pipeline.mode.searches() {
        pipeline::run_experiment(&resolved.pipeline, &resolved.arch, &data, Some(&ckpt))?
    } else {
        pipeline::run_experiment(&resolved.pipeline, &resolved.arch, &data, None)?
    };
    let _ = net;
    write_outcome(&dir, &outcome)?;
    dir.mark_complete()?;
    println!(
        "run {} complete: arch {} accuracy {:.4} macs {} params {}",
        dir.root().display(),
        outcome.report.arch.name,
        outcome.report.test_accuracy,
        outcome.report.cost.total_macs(),
        outcome.report.cost.total_params(),
    );
    Ok(())
}

fn write_outcome(dir: &RunDir, outcome: &RunOutcome) -> Result<()> {
    dir.write(rundir::METRICS_FILE, &metrics_csv(&outcome.metrics))?;
    if let Some(trace) = &outcome.trace {
        dir.write(rundir::TRACE_FILE, &trace.to_csv())?;
    }
    let arch_path = dir.path(rundir::DERIVED_ARCH_FILE);
    outcome.report.arch.save(&arch_path)?;
    let report = serde_json::to_string_pretty(&outcome.report)
        .map_err(|e| Error::Format(format!("report encode: {e}")))?;
    dir.write(rundir::REPORT_FILE, &report)?;
    Ok(())
}

fn analyze(run: &Path, probes: usize) -> Result<()> {
    let dir = RunDir::open(run)?;
    let file = config::parse_config_str(&dir.read(rundir::CONFIG_FILE)?)?;
    let resolved = config::resolve(file)?;
    let state = ExperimentState::load(&dir.path(rundir::CHECKPOINT_FILE))?;
    let mut net: SuperNet = state.net;

    let quantized = resolved.pipeline.quant.any_quantized();
    let groups = net.searchable_group_indices();
    let kendall = analysis::kendall_report(&state.trace, &groups, GradSource::CeOnly, quantized);
    std::fs::write(dir.path("kendall.csv"), kendall.to_csv())?;
    std::fs::write(dir.path("grad_trace.csv"), state.trace.to_csv())?;

    let data: DataBundle = generate(&resolved.file.dataset, resolved.pipeline.seed)?;
    let n = probes.min(data.test.images.len());
    let rows = analysis::layer_signal_profile(
        &mut net,
        &data.test.images[..n],
        resolved.pipeline.batch_size,
    )?;
    std::fs::write(dir.path("signal.csv"), analysis::signal_csv(&rows))?;
    println!(
        "analyze {}: kendall mean {:.4} over {} layers; wrote kendall.csv, grad_trace.csv, signal.csv",
        run.display(),
        kendall.mean,
        kendall.per_group.len()
    );
    Ok(())
}

fn sweep(
    config_path: &Path,
    gammas: &str,
    seeds: u64,
    with_search: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let base = config::parse_config(config_path)?;
    let mut rows: Vec<SweepRow> = Vec::new();
    let gammas: Vec<f64> = gammas
        .split(',')
        .map(|g| {
            g.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad width multiplier '{g}'")))
        })
        .collect::<Result<_>>()?;

    for &g in &gammas {
        let mut file = base.clone();
        file.run.mode = SearchMode::WidthMultiplier;
        file.search.gamma = g;
        let point = sweep_point(file, seeds, &format!("width-x{g}"))?;
        rows.push(point);
    }
    if with_search {
        let point = sweep_point(base.clone(), seeds, "search")?;
        rows.push(point);
    }
    let csv = analysis::sweep_csv(&rows);
    match out {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn sweep_point(file: config::ConfigFile, seeds: u64, label: &str) -> Result<SweepRow> {
    let mut accs = Vec::new();
    let mut arch: Option<ArchDesc> = None;
    let base_seed = file.run.seed;
    for s in 0..seeds.max(1) {
        let mut f = file.clone();
        f.run.seed = base_seed + s;
        let resolved = config::resolve(f)?;
        let data = generate(&resolved.file.dataset, resolved.pipeline.seed)?;
        let (_, outcome) =
            pipeline::run_experiment(&resolved.pipeline, &resolved.arch, &data, None)?;
        accs.push(outcome.report.test_accuracy);
        arch = Some(outcome.report.arch.clone());
    }
    let arch = arch.expect("at least one seed");
    let cost = exact_cost(&arch, arch.input_size)?;
    let (mean, std) = analysis::mean_and_stddev(&accs);
    Ok(SweepRow {
        label: label.to_string(),
        params: cost.total_params(),
        flops: cost.total_macs(),
        mean_accuracy: mean,
        stddev_accuracy: std,
    })
}
