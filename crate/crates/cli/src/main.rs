use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcmap_core::error::{Error, Result};
use dcmap_core::graph::write_edge_list;
use dcmap_core::io::{counts_csv, population_csv};
use dcmap_core::pipeline::{run_pipeline, PipelineConfig, Stage};
use dcmap_core::simulator::{
    labels_csv, log_uniform_expected, make_lattice, meta_csv, quadrant_labels, simulate_panel, suppress, truth_csv,
    SimulationSpec,
};
use dcmap_core::structures::{HyperParams, InteractionType};

#[derive(Parser, Debug)]
#[command(name = "dcmap", version, about = "Spatio-temporal disease mapping on areal counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Replace suppressed counts with per-year spatial model predictions.
    Impute(RunArgs),
    /// Fit one spatio-temporal model; writes risks, criteria and trends.
    Fit(RunArgs),
    /// Fit all eight prior and interaction combinations and tabulate criteria.
    Compare(RunArgs),
    /// Population-weighted risk trends by region and urbanicity.
    Trends(RunArgs),
    /// High, low and uncertain risk classes for one year.
    Classify(RunArgs),
    /// Write a synthetic lattice panel with known risks.
    Simulate(SimArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    counts: Option<PathBuf>,
    #[arg(long)]
    population: Option<PathBuf>,
    /// Tab-separated edge list.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Area metadata CSV (`area_id,state,region,urbanicity_pop`).
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["icar", "bym2"])]
    prior: Option<String>,
    #[arg(long, value_parser = ["1", "2", "3", "4"])]
    interaction: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, overrides_with = "no_truncate")]
    truncate: bool,
    #[arg(long, overrides_with = "truncate")]
    no_truncate: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// `area_id,label` file assigning areas to subdomains.
    #[arg(long)]
    partition_labels: Option<PathBuf>,
    /// `from_label,to_label` file merging subdomains.
    #[arg(long)]
    merge_map: Option<PathBuf>,
    /// Posterior draws used for the criteria.
    #[arg(long)]
    draws: Option<usize>,
    /// Year reported by `classify`.
    #[arg(long)]
    year: Option<i32>,
    /// Run every model comparison combination (the default for `compare`).
    #[arg(long)]
    all: bool,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    rows: usize,
    #[arg(long, default_value_t = 10)]
    cols: usize,
    #[arg(long, default_value_t = 10)]
    years: usize,
    #[arg(long, default_value = "2", value_parser = ["1", "2", "3", "4"])]
    interaction: String,
    #[arg(long, default_value_t = 0.3)]
    sd_spatial: f64,
    #[arg(long, default_value_t = 0.2)]
    sd_temporal: f64,
    #[arg(long, default_value_t = 0.15)]
    sd_interaction: f64,
    /// Range of the log-uniform per-area expected counts.
    #[arg(long, default_value_t = 6.0)]
    expected_min: f64,
    #[arg(long, default_value_t = 200.0)]
    expected_max: f64,
    /// Withhold counts below this value; 0 keeps every count.
    #[arg(long, default_value_t = 10)]
    suppress_below: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn config_for(args: &RunArgs, stages: Vec<Stage>) -> Result<PipelineConfig> {
    let mut c = match &args.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    c.stages = stages;
    let set_path = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            slot.clone_from(v);
        }
    };
    set_path(&mut c.counts, &args.counts);
    set_path(&mut c.population, &args.population);
    set_path(&mut c.graph, &args.graph);
    set_path(&mut c.area_meta, &args.meta);
    set_path(&mut c.partition_labels, &args.partition_labels);
    set_path(&mut c.merge_map, &args.merge_map);
    if let Some(o) = &args.out {
        c.output.clone_from(o);
    }
    if let Some(p) = &args.prior {
        c.prior.clone_from(p);
    }
    if let Some(i) = &args.interaction {
        c.interaction.clone_from(i);
    }
    if let Some(k) = args.k {
        c.k = k;
    }
    if args.truncate {
        c.truncate = true;
    }
    if args.no_truncate {
        c.truncate = false;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(w) = args.workers {
        c.workers = w;
    }
    if let Some(d) = args.draws {
        c.n_draws = d;
    }
    if args.year.is_some() {
        c.classify_year = args.year;
    }
    Ok(c)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn simulate(args: &SimArgs) -> Result<()> {
    let graph = make_lattice(args.rows, args.cols)?;
    let hyper = HyperParams {
        sigma2_spatial: args.sd_spatial.powi(2),
        sigma2_temporal: args.sd_temporal.powi(2),
        sigma2_interaction: args.sd_interaction.powi(2),
        lambda: 1.0,
    };
    hyper.validate()?;
    let spec = SimulationSpec {
        t: args.years,
        hyper,
        interaction: args.interaction.parse::<InteractionType>()?,
        base_expected: log_uniform_expected(graph.n_areas(), args.expected_min, args.expected_max, args.seed),
        alpha0: 0.0,
        seed: args.seed,
    };
    let (full, truth) = simulate_panel(&graph, &spec)?;
    let panel = if args.suppress_below > 0 {
        let (masked, fraction) = suppress(&full, args.suppress_below);
        log::info!("withheld {:.1}% of cells", 100.0 * fraction);
        masked
    } else {
        full
    };
    let labels = quadrant_labels(args.rows, args.cols);
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    write(&args.out, "counts.csv", &counts_csv(&panel)?)?;
    write(&args.out, "population.csv", &population_csv(&panel)?)?;
    write(&args.out, "graph.tsv", &write_edge_list(&graph))?;
    write(&args.out, "truth.csv", &truth_csv(&panel, &truth)?)?;
    write(&args.out, "area_meta.csv", &meta_csv(&panel, &labels)?)?;
    write(&args.out, "partition_labels.csv", &labels_csv(&panel, &labels)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (args, stages) = match &cli.command {
        Command::Simulate(a) => return simulate(a),
        Command::Impute(a) => (a, vec![Stage::Impute]),
        Command::Fit(a) => (a, vec![Stage::Impute, Stage::Describe, Stage::Fit, Stage::Trends]),
        Command::Compare(a) => (a, vec![Stage::Impute, Stage::Compare]),
        Command::Trends(a) => (a, vec![Stage::Impute, Stage::Trends]),
        Command::Classify(a) => (a, vec![Stage::Impute, Stage::Classify]),
    };
    let config = config_for(args, stages)?;
    let manifest = run_pipeline(&config)?;
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    println!("wrote {} files to {}", manifest.outputs.len(), config.output.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(4),
    }
}
