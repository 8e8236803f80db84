use std::io::{Read, Write};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unitflow::bench::{run_bench, summarize, BenchConfig};
use unitflow::graph::{parse_dimacs, Problem};
use unitflow::oracle::Status;
use unitflow::solve::{solve, solve_verified, Method, RunReport, SolveConfig};

/// Unit-capacity minimum-cost flow by interior point methods.
///
/// Reads a DIMACS min-cost-flow instance (every arc capacity 1) from
/// --input or stdin. Exit status: 0 optimal, 1 infeasible, 2 error.
#[derive(Parser)]
#[command(version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    solve: SolveArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance (the default).
    Solve(SolveArgs),
    /// Run random instances per size and print JSON lines.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct MethodArgs {
    /// vanilla, eleven8, four3 or oracle.
    #[arg(long, default_value = "vanilla")]
    method: Method,
    /// Target duality gap before repair [default: m^-3].
    #[arg(long)]
    epsilon: Option<f64>,
    /// Multiplies the step-size schedule of the accelerated methods.
    #[arg(long, default_value_t = 1.0)]
    delta_scale: f64,
    /// Regularization constant of the accelerated methods.
    #[arg(long, default_value_t = 100.0)]
    reg_scale: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iters: usize,
    /// Bit-scale costs above this bound [default: m^3].
    #[arg(long)]
    scaling_threshold: Option<i64>,
}

impl MethodArgs {
    fn config(&self) -> SolveConfig {
        SolveConfig {
            method: self.method,
            epsilon: self.epsilon,
            delta_scale: self.delta_scale,
            reg_scale: self.reg_scale,
            max_iters: self.max_iters,
            scaling_threshold: self.scaling_threshold,
        }
    }
}

#[derive(Args, Clone)]
struct SolveArgs {
    #[command(flatten)]
    method: MethodArgs,
    /// DIMACS file; stdin when absent.
    #[arg(long)]
    input: Option<String>,
    /// Solve a random feasible instance with N vertices and M arcs instead.
    #[arg(long, value_name = "N,M", conflicts_with = "input")]
    generate: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compare against the exact oracle.
    #[arg(long)]
    verify: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    method: MethodArgs,
    /// Comma-separated arc counts.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    sizes: Vec<usize>,
    /// Instances per size.
    #[arg(long, default_value_t = 3)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    max_cost: i64,
}

fn read_problem(args: &SolveArgs) -> Result<Problem> {
    if let Some(spec) = &args.generate {
        let (n, m) = spec.split_once(',').context("--generate expects N,M")?;
        let (n, m): (usize, usize) = (n.trim().parse()?, m.trim().parse()?);
        if n < 2 || m + 1 < n {
            bail!("--generate needs n >= 2 and m >= n - 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        return Ok(unitflow::gen::random_feasible(&mut rng, n, m, 20));
    }
    let text = match &args.input {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
            s
        }
    };
    Ok(parse_dimacs(&text)?)
}

fn print_report(r: &RunReport, json: bool) -> Result<()> {
    let mut out = std::io::stdout().lock();
    if json {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
        return Ok(());
    }
    let status = match r.status {
        Status::Optimal => "optimal",
        Status::Infeasible => "infeasible",
    };
    writeln!(out, "instance    n={} m={} W={}", r.n, r.m, r.max_cost)?;
    writeln!(out, "method      {}", r.method)?;
    writeln!(out, "status      {status}")?;
    if let Some(c) = r.cost {
        writeln!(out, "cost        {c}")?;
    }
    if let Some(c) = r.oracle_cost {
        writeln!(out, "oracle      {c}")?;
    }
    writeln!(out, "iterations  {}", r.iterations)?;
    writeln!(out, "final gap   {:.3e}", r.final_gap)?;
    writeln!(out, "perturbed   {:.3}", r.demand_perturbation)?;
    writeln!(out, "stages      {}", r.scaling_stages)?;
    writeln!(out, "time        {:.1} ms", r.timings.total_ms)?;
    for v in &r.violations {
        writeln!(out, "VIOLATION   {v}")?;
    }
    Ok(())
}

fn run_solve(args: &SolveArgs) -> Result<ExitCode> {
    let p = read_problem(args)?;
    let cfg = args.method.config();
    let report = if args.verify { solve_verified(&p, &cfg) } else { solve(&p, &cfg) }?;
    print_report(&report, args.json)?;
    Ok(if !report.violations.is_empty() {
        ExitCode::from(2)
    } else if report.status == Status::Infeasible {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn run_bench_cmd(args: &BenchArgs) -> Result<ExitCode> {
    let cfg = BenchConfig {
        sizes: args.sizes.clone(),
        count: args.count,
        seed: args.seed,
        max_cost: args.max_cost,
        solve: args.method.config(),
    };
    let records = run_bench(&cfg);
    for r in &records {
        println!("{}", serde_json::to_string(r)?);
    }
    for s in summarize(&records) {
        println!("{}", serde_json::to_string(&serde_json::json!({ "summary": s }))?);
    }
    let failed = records.iter().any(|r| r.error.is_some() || !r.violations.is_empty());
    Ok(if failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Some(Command::Bench(b)) => run_bench_cmd(b),
        Some(Command::Solve(s)) => run_solve(s),
        None => run_solve(&cli.solve),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
