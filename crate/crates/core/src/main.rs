use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recall_core::diagnostics::{measure_scaling, scaling_csv, ScalingCell, ScalingProtocol, ScalingTerm};
use recall_core::error::{Error, Result};
use recall_core::harness::config::RunManifest;
use recall_core::harness::fit::{fit_line_data, fit_thresholds, heatmap_data};
use recall_core::harness::sweep::resolve_workers;
use recall_core::harness::{run_cell, run_sweep, task_seed, Cell, RunConfig, ResultTable, TrainerSpec};
use recall_core::model::{accuracy_on, LayerNormConfig};
use recall_core::taskgen::{build_task, sample_fresh, Arch, TaskConfig};

#[derive(Parser)]
#[command(name = "recall-lab", version, about = "Factual-recall scaling laboratory")]
struct Cli {
    /// Worker threads (overrides RECALL_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct CellArg {
    #[arg(long = "vocab", short = 'V')]
    v: usize,
    #[arg(long = "dim", short = 'd')]
    d: usize,
    /// Seed repetition index within the cell.
    #[arg(long, default_value_t = 0)]
    rep: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration with all defaults filled in.
    ShowConfig {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run a (V, d) sweep and write results, manifest, fit and plot data.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// List cells and the cost estimate without running anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train one cell and print its trace summary.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        cell: CellArg,
        /// Write the three-step trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Include full iterates in the trace.
        #[arg(long)]
        debug_matrices: bool,
    },
    /// Re-run one cell and print its result rows as CSV.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        cell: CellArg,
    },
    /// Measure one signal or noise term across a grid.
    Diagnose {
        #[command(flatten)]
        config: ConfigArg,
        /// signal, grad_noise, mean_bias or mlp_noise.
        #[arg(long)]
        term: String,
        /// Embedding dimension for every cell.
        #[arg(long = "dim", short = 'd', default_value_t = 32)]
        d: usize,
        /// Widths for mlp_noise (swept at the first V of the grid).
        #[arg(long, value_delimiter = ',', default_values_t = vec![64, 256, 1024])]
        m_grid: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 8)]
        n_fresh: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the capacity slope of a results table.
    Fit {
        #[arg(long)]
        table: PathBuf,
        #[arg(long, default_value = "attention_only")]
        arch: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.125, 0.15])]
        levels: Vec<f64>,
        /// Snapshot epoch for Adam tables.
        #[arg(long)]
        epoch: Option<usize>,
        #[arg(long)]
        paper_reference: Option<f64>,
        /// Also write plot data here.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
}

fn parse_arch(s: &str) -> Result<Arch> {
    match s {
        "attention_only" => Ok(Arch::AttentionOnly),
        "attention_mlp" => Ok(Arch::AttentionMlp),
        _ => Err(Error::InvalidArgument(format!("unknown arch `{s}`"))),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn fit_epoch(cfg: &RunConfig, table: &ResultTable) -> Option<usize> {
    cfg.fit_epoch.or_else(|| table.epochs().into_iter().flatten().max())
}

fn cell_of(cfg: &RunConfig, v: usize, d: usize) -> Cell {
    let p = &cfg.protocol;
    Cell { v, l: p.seq_len(v), n: p.n_samples(v), d, m: p.mlp_width(d) }
}

fn sweep(cfg: RunConfig, out: &Path, dry_run: bool) -> Result<()> {
    cfg.validate()?;
    let p = &cfg.protocol;
    if dry_run {
        println!("# {} seeds_per_cell={} n_eval={}", p.describe(), p.seeds_per_cell, p.n_eval);
        println!("V L N d m cost");
        for c in p.cells() {
            println!("{} {} {} {} {} {}", c.v, c.l, c.n, c.d, c.m, c.cost() * p.seeds_per_cell as u128);
        }
        println!("# total cost {} (budget {})", p.total_cost(), cfg.options.budget);
        return Ok(());
    }
    let table = run_sweep(p, cfg.master_seed, &cfg.options)?;
    fs::create_dir_all(out)?;
    write(&out.join("results.csv"), &table.to_csv())?;
    let manifest = RunManifest::build(&cfg, &table);
    write(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    write(&out.join("config.json"), &cfg.to_json_pretty())?;
    let epoch = fit_epoch(&cfg, &table);
    write(&out.join("heatmap.dat"), &heatmap_data(&table, epoch))?;
    match fit_thresholds(&table, &cfg.levels, p.arch, epoch, &p.describe(), cfg.paper_reference) {
        Ok(fit) => {
            write(&out.join("fit.json"), &serde_json::to_string_pretty(&fit)?)?;
            write(&out.join("fit_line.dat"), &fit_line_data(&fit, 50))?;
            println!("slope {} (stderr {}) from {} points", fit.slope, fit.stderr_slope, fit.points.len());
        }
        Err(e) => println!("no fit: {e}"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn train(cfg: RunConfig, cell: &CellArg, trace: Option<&Path>, debug: bool) -> Result<()> {
    let p = &cfg.protocol;
    p.validate()?;
    let c = cell_of(&cfg, cell.v, cell.d);
    let seed = task_seed(cfg.master_seed, c.v, cell.rep);
    match p.trainer {
        TrainerSpec::ThreeStep { .. } => {
            let task = TaskConfig::new(c.v, c.l, c.n, c.d, c.m).with_seed(seed);
            let data = build_task(&task, false)?;
            let emb = recall_core::embed::embeddings_for(&task)?;
            let act = (p.arch == Arch::AttentionMlp).then(recall_core::activation::build_paper_activation);
            let hyper = p.trainer.three_step_hyper(c.v, c.l).expect("three-step");
            let run = recall_core::trainer::three_step_train(&data, &emb, act.as_ref(), &hyper, p.arch)?;
            let fresh = sample_fresh(&task, &data.perm, p.n_eval, task.eval_seed())?;
            let est = accuracy_on(&fresh, &run.params, &emb, act.as_ref(), &LayerNormConfig::disabled())?;
            let mut summary = run.trace.to_json(false);
            summary["accuracy"] = serde_json::json!(est.accuracy);
            summary["stderr"] = serde_json::json!(est.stderr);
            summary["task"] = serde_json::to_value(task.manifest_entry())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if let Some(path) = trace {
                write(path, &serde_json::to_string_pretty(&run.trace.to_json(debug))?)?;
            }
        }
        TrainerSpec::Adam { .. } => {
            let rows = run_cell(p, &c, seed, &cfg.options)?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
    }
    Ok(())
}

fn eval(cfg: RunConfig, cell: &CellArg) -> Result<()> {
    cfg.protocol.validate()?;
    let c = cell_of(&cfg, cell.v, cell.d);
    let rows = run_cell(&cfg.protocol, &c, task_seed(cfg.master_seed, c.v, cell.rep), &cfg.options)?;
    print!("{}", ResultTable { rows }.to_csv());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn diagnose(cfg: RunConfig, term: &str, d: usize, m_grid: &[usize], seeds: u64, n_fresh: usize, out: Option<&Path>) -> Result<()> {
    let term = ScalingTerm::parse(term)?;
    let p = &cfg.protocol;
    let (x_name, cells) = if term == ScalingTerm::MlpNoise {
        let v = p.v_grid[0];
        let cells = m_grid
            .iter()
            .map(|&m| ScalingCell { x: m as f64, task: TaskConfig::new(v, p.seq_len(v), p.n_samples(v), d, m) })
            .collect();
        ("m", cells)
    } else {
        let cells = p
            .v_grid
            .iter()
            .map(|&v| ScalingCell { x: v as f64, task: TaskConfig::new(v, p.seq_len(v), p.n_samples(v), d, 0) })
            .collect();
        ("V", cells)
    };
    let proto = ScalingProtocol {
        x_name: x_name.into(),
        cells,
        seeds: (0..seeds).map(|s| cfg.master_seed.wrapping_add(s)).collect(),
        n_fresh,
    };
    let points = measure_scaling(term, &proto)?;
    let csv = scaling_csv(&points);
    match out {
        Some(path) => write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn fit(table: &Path, arch: &str, levels: &[f64], epoch: Option<usize>, reference: Option<f64>, plot: Option<&Path>) -> Result<()> {
    let arch = parse_arch(arch)?;
    let table = ResultTable::from_csv(&fs::read_to_string(table)?)?;
    let epoch = epoch.or_else(|| table.epochs().into_iter().flatten().max());
    let fit = fit_thresholds(&table, levels, arch, epoch, arch.name(), reference)?;
    println!("{}", serde_json::to_string_pretty(&fit)?);
    if let Some(dir) = plot {
        fs::create_dir_all(dir)?;
        write(&dir.join("heatmap.dat"), &heatmap_data(&table, epoch))?;
        write(&dir.join("fit_line.dat"), &fit_line_data(&fit, 50))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let workers = resolve_workers(cli.workers);
    rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().ok();
    match cli.command {
        Command::ShowConfig { config } => {
            println!("{}", config.load()?.to_json_pretty());
            Ok(())
        }
        Command::Sweep { config, out, dry_run } => {
            let mut cfg = config.load()?;
            cfg.options.workers = Some(workers);
            sweep(cfg, &out, dry_run)
        }
        Command::Train { config, cell, trace, debug_matrices } => train(config.load()?, &cell, trace.as_deref(), debug_matrices),
        Command::Eval { config, cell } => eval(config.load()?, &cell),
        Command::Diagnose { config, term, d, m_grid, seeds, n_fresh, out } => {
            diagnose(config.load()?, &term, d, &m_grid, seeds, n_fresh, out.as_deref())
        }
        Command::Fit { table, arch, levels, epoch, paper_reference, plot_dir } => {
            fit(&table, &arch, &levels, epoch, paper_reference, plot_dir.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
