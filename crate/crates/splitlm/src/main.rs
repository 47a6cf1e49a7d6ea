use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use splitlm::io::{read_json, write_json, write_scenario};
use splitlm::sweep::{success_fraction, write_aggregate_csv, write_results_csv};
use splitlm::{aggregate, read_scenario, run_sweep, solve_method, Method, SweepConfig, SweepRow};
use splitlm_core::ao::AoOptions;
use splitlm_core::scenario::generate_scenario;
use splitlm_core::ScenarioParams;

const EXIT_INVALID: u8 = 2;
const EXIT_BEST_EFFORT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "splitlm",
    version,
    about = "Split LLM inference planner for vehicles and roadside units"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SPLITLM_THREADS")]
    threads: Option<usize>,
    /// Scenario seed for `generate`; baseline seed elsewhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random scenario file and print its digest.
    Generate(GenerateArgs),
    /// Solve one scenario with one method.
    Solve(SolveArgs),
    /// Run an ω_t sweep and write results and aggregated CSVs.
    Sweep(SweepArgs),
    /// Run every method on one scenario and print a table.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON file with scenario parameters; flags override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    vehicles: Option<usize>,
    #[arg(long)]
    rsus: Option<usize>,
    /// Arena side, metres.
    #[arg(long)]
    arena: Option<f64>,
    /// Shadow fading standard deviation, dB.
    #[arg(long)]
    shadow_db: Option<f64>,
    #[arg(long)]
    layers: Option<u32>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    scenario: PathBuf,
    /// Delay weight ω_t in [0, 1].
    #[arg(long)]
    wt: f64,
    #[arg(long, value_enum, default_value_t = Method::Proposed)]
    method: Method,
    /// Report file; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep configuration; flags override it.
    config: Option<PathBuf>,
    /// Comma-separated delay weights.
    #[arg(long, value_delimiter = ',')]
    wt: Option<Vec<f64>>,
    /// Comma-separated scenario seeds, or a range `a..b`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    vehicles: Option<usize>,
    #[arg(long)]
    rsus: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    scenario: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
    wt: Vec<f64>,
    /// Also write the rows in the sweep results format.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
    }
    let result = match cli.command {
        Command::Generate(args) => generate(args, cli.seed),
        Command::Solve(args) => solve(args, cli.seed.unwrap_or(0)),
        Command::Sweep(args) => sweep(args, cli.seed),
        Command::Compare(args) => compare(args, cli.seed.unwrap_or(0)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}

fn generate(args: GenerateArgs, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let mut params: ScenarioParams = match &args.params {
        Some(path) => read_json(path)?,
        None => ScenarioParams::default(),
    };
    if let Some(v) = args.vehicles {
        params.vehicles = v;
    }
    if let Some(r) = args.rsus {
        params.rsus = r;
    }
    if let Some(a) = args.arena {
        params.arena_side_m = a;
    }
    if let Some(s) = args.shadow_db {
        params.shadow_std_db = s;
    }
    if let Some(l) = args.layers {
        params.llm.layer_count = l;
    }
    if let Some(s) = seed {
        params.seed = s;
    }
    let scenario = generate_scenario(&params)?;
    let digest = write_scenario(&args.output, &scenario)?;
    println!("{digest}  {}", args.output.display());
    Ok(ExitCode::SUCCESS)
}

fn solve(args: SolveArgs, seed: u64) -> anyhow::Result<ExitCode> {
    let scenario = read_scenario(&args.scenario)?;
    let report = solve_method(&scenario, args.wt, args.method, seed, &AoOptions::default())?;
    match &args.output {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if report.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "warning: best effort result, {}",
            report.note.as_deref().unwrap_or("not converged")
        );
        Ok(ExitCode::from(EXIT_BEST_EFFORT))
    }
}

fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {text}");
        }
        return Ok((a..b).collect());
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("bad seed {s:?}"))
        })
        .collect()
}

fn sweep(args: SweepArgs, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let mut config: SweepConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SweepConfig::default(),
    };
    if let Some(wt) = args.wt {
        config.weights_time = wt;
    }
    if let Some(s) = &args.seeds {
        config.seeds = parse_seeds(s)?;
    }
    if let Some(m) = args.methods {
        config.methods = m;
    }
    if let Some(v) = args.vehicles {
        config.params.vehicles = v;
    }
    if let Some(r) = args.rsus {
        config.params.rsus = r;
    }
    if let Some(s) = seed {
        config.baseline_seed = s;
    }
    if let Some(dir) = args.out_dir {
        config.output_dir = Some(dir);
    }
    let dir = config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    let rows = run_sweep(&config, &AoOptions::default())?;
    let agg = aggregate(&rows);
    write_results_csv(&dir.join("results.csv"), &rows)?;
    write_aggregate_csv(&dir.join("aggregate.csv"), &agg)?;
    let ok = success_fraction(&rows);
    println!(
        "{} rows, {:.1}% succeeded, written to {}",
        rows.len(),
        100.0 * ok,
        dir.display()
    );
    Ok(if ok >= 0.9 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_BEST_EFFORT)
    })
}

fn compare(args: CompareArgs, seed: u64) -> anyhow::Result<ExitCode> {
    let scenario = read_scenario(&args.scenario)?;
    let options = AoOptions::default();
    let mut rows = Vec::new();
    println!(
        "{:>5} {:>9} {:>16} {:>16} {:>16} {:>16}",
        "wt", "method", "weighted_total", "objective_time_s", "end_to_end_s", "energy_J"
    );
    for &wt in &args.wt {
        for method in Method::ALL {
            let report = solve_method(&scenario, wt, method, seed, &options)?;
            println!(
                "{:>5.2} {:>9} {:>16.6e} {:>16.6e} {:>16.6e} {:>16.6e}",
                wt,
                method,
                report.cost.weighted_total,
                report.completion.objective_time,
                report.completion.end_to_end,
                report.cost.total_energy()
            );
            rows.push(SweepRow::from_report(scenario.seed, &report));
        }
    }
    if let Some(path) = &args.output {
        write_results_csv(path, &rows)?;
    }
    Ok(ExitCode::SUCCESS)
}
