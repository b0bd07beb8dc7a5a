//! Command-line front end: dataset generation, training, evaluation,
//! latency benchmarking, and single-instance solving.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.
//! `TOPFORGE_THREADS` caps the evaluation worker count.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use topforge::baselines::{exhaustive_optimal, greedy_heuristic, random_rollout, ORACLE_MAX_N};
use topforge::gen::{generate_item, load_dataset, parse_line, save_dataset, DatasetItem, GenConfig, PrizeScheme};
use topforge::policy::{NetConfig, Policy};
use topforge::sim::{rollout, SelectMode, SolutionDump};
use topforge::top::{total_reward, Instance, Solution};
use topforge::train::{self, load_checkpoint, Adam, TrainConfig};

#[derive(Parser)]
#[command(name = "topforge", version, about = "Team orienteering with a learned fleet policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSON-lines instance dataset
    Gen(GenArgs),
    /// Train the policy with Reinforce and a greedy baseline
    Train(TrainArgs),
    /// Compare solvers over a dataset and emit a results CSV
    Eval(EvalArgs),
    /// Measure greedy-rollout latency at small/medium/large scales
    Bench(BenchArgs),
    /// Solve one instance and print the solution as JSON
    Solve(SolveArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of regions per instance
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Fleet size recorded with each instance
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    m: u64,
    /// Per-agent time budget
    #[arg(long)]
    tmax: f64,
    /// Instances to generate
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    /// Base seed; instance i uses stream i
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prize scheme: constant, uniform, or distance
    #[arg(long, default_value = "constant")]
    prize_scheme: PrizeScheme,
    /// Place the end depot away from the start depot
    #[arg(long)]
    two_depot: bool,
    /// Output path for the JSON-lines file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file mirroring the train config (required unless resuming)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path to write (and resume from)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-epoch stats CSV path
    #[arg(long)]
    stats: PathBuf,
    /// Continue from the checkpoint instead of starting fresh
    #[arg(long)]
    resume: bool,
    /// Seed for fresh parameter initialization
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON-lines dataset to evaluate on
    #[arg(long)]
    dataset: PathBuf,
    /// Policy checkpoint; omit to skip the transformer row
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Label for the dataset's prize scheme column
    #[arg(long, default_value = "constant")]
    prize_scheme: PrizeScheme,
    /// Seed for the random-policy solver
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluation workers (capped by TOPFORGE_THREADS)
    #[arg(long)]
    workers: Option<usize>,
    /// Results CSV path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Policy checkpoint; omit to time a freshly initialized net
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Instances per scale
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    /// Seed for instance generation and fresh weights
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Latency CSV path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverKind {
    Policy,
    Greedy,
    Random,
    Oracle,
}

#[derive(Args)]
struct SolveArgs {
    /// File holding one instance as a dataset JSON line
    #[arg(long)]
    instance: PathBuf,
    /// Which solver to run
    #[arg(long, value_enum, default_value_t = SolverKind::Greedy)]
    solver: SolverKind,
    /// Policy checkpoint (required for --solver policy)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed for the random solver
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Solve(args) => cmd_solve(args),
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let config = GenConfig {
        n: args.n as usize,
        m: args.m as usize,
        t_max: args.tmax,
        prize_scheme: args.prize_scheme,
        single_depot: !args.two_depot,
        seed: args.seed,
    };
    config.validate().map_err(|e| anyhow!(e))?;
    let items: Vec<DatasetItem> =
        (0..args.count).map(|i| generate_item(&config, i)).collect();
    save_dataset(&items, &args.out)?;
    println!(
        "wrote {} instances (n={}, m={}, t_max={}, prizes={}) to {}",
        items.len(),
        config.n,
        config.m,
        config.t_max,
        config.prize_scheme,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (mut policy, mut adam, config, start_epoch) = if args.resume {
        let (policy, adam, config, epoch) = load_checkpoint(&args.checkpoint)
            .with_context(|| format!("resuming from {}", args.checkpoint.display()))?;
        println!("resuming from epoch {epoch}");
        (policy, adam, config, epoch)
    } else {
        let path = args
            .config
            .as_ref()
            .ok_or_else(|| anyhow!("--config is required unless --resume is given"))?;
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let config: TrainConfig = toml::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        let policy = Policy::init(config.net.clone(), args.init_seed)?;
        let adam = Adam::new(config.learning_rate);
        (policy, adam, config, 0)
    };

    train::run(
        &mut policy,
        &mut adam,
        &config,
        start_epoch,
        &args.checkpoint,
        &args.stats,
        |stats, validation| {
            let val = validation
                .map(|v| format!("  val {v:.4}"))
                .unwrap_or_default();
            println!(
                "epoch {:>4}  sampled {:.4}  greedy {:.4}  loss {:+.5}  grad {:.4}  {:.1}s{}",
                stats.epoch,
                stats.mean_sampled,
                stats.mean_greedy,
                stats.loss,
                stats.grad_norm,
                stats.seconds,
                val
            );
        },
    )?;
    println!("checkpoint written to {}", args.checkpoint.display());
    Ok(())
}

/// A solved instance: reward, regions visited, wall time.
struct SolveOutcome {
    reward: f64,
    nodes: usize,
    millis: f64,
}

fn outcome(solution: &Solution, instance: &Instance, millis: f64) -> Result<SolveOutcome> {
    Ok(SolveOutcome {
        reward: total_reward(solution, instance)?,
        nodes: solution.visited_regions(instance).len(),
        millis,
    })
}

fn solver_row(name: &str, items: &[DatasetItem], outcomes: &[SolveOutcome]) -> String {
    let count = outcomes.len() as f64;
    let mean_reward = outcomes.iter().map(|o| o.reward).sum::<f64>() / count;
    let mean_nodes = outcomes.iter().map(|o| o.nodes as f64).sum::<f64>() / count;
    let mut times: Vec<f64> = outcomes.iter().map(|o| o.millis).collect();
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let pct = |p: f64| times[((times.len() - 1) as f64 * p).round() as usize];
    let first = &items[0];
    format!(
        "{},{},{},{},{{scheme}},{},{},{:.3},{:.3}",
        name,
        first.instance.n(),
        first.m,
        first.instance.t_max(),
        mean_reward,
        mean_nodes,
        pct(0.50),
        pct(0.95)
    )
}

fn worker_count(requested: Option<usize>) -> usize {
    let default = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut workers = requested.unwrap_or(default).max(1);
    if let Ok(cap) = std::env::var("TOPFORGE_THREADS") {
        if let Ok(cap) = cap.trim().parse::<usize>() {
            workers = workers.min(cap.max(1));
        }
    }
    workers
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let items = load_dataset(&args.dataset)
        .with_context(|| format!("loading {}", args.dataset.display()))?;
    if items.is_empty() {
        bail!("dataset {} is empty", args.dataset.display());
    }
    let first = &items[0];
    let uniform = items.iter().all(|it| {
        it.instance.n() == first.instance.n()
            && it.m == first.m
            && it.instance.t_max() == first.instance.t_max()
    });
    if !uniform {
        bail!("eval expects a homogeneous dataset (uniform n, m, t_max)");
    }

    let policy = args
        .checkpoint
        .as_ref()
        .map(|p| Policy::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(args.workers))
        .build()
        .context("building worker pool")?;

    let mut rows = vec![
        "solver,n,m,tmax,prize_scheme,mean_reward,mean_nodes,p50_ms,p95_ms".to_string(),
    ];
    let solve_all = |f: &(dyn Fn(usize, &DatasetItem) -> Result<SolveOutcome> + Sync)| {
        pool.install(|| {
            items
                .par_iter()
                .enumerate()
                .map(|(i, item)| f(i, item))
                .collect::<Result<Vec<_>>>()
        })
    };

    if let Some(policy) = &policy {
        let outcomes = solve_all(&|_, item| {
            let started = Instant::now();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let r = rollout(policy, &item.instance, item.m, SelectMode::Greedy, &mut rng)?;
            outcome(&r.solution, &item.instance, started.elapsed().as_secs_f64() * 1e3)
        })?;
        rows.push(solver_row("transformer", &items, &outcomes));
    }

    let outcomes = solve_all(&|_, item| {
        let started = Instant::now();
        let solution = greedy_heuristic(&item.instance, item.m);
        outcome(&solution, &item.instance, started.elapsed().as_secs_f64() * 1e3)
    })?;
    rows.push(solver_row("greedy", &items, &outcomes));

    let seed = args.seed;
    let outcomes = solve_all(&|i, item| {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let r = random_rollout(&item.instance, item.m, &mut rng)?;
        outcome(&r.solution, &item.instance, started.elapsed().as_secs_f64() * 1e3)
    })?;
    rows.push(solver_row("random", &items, &outcomes));

    if first.instance.n() <= ORACLE_MAX_N {
        let outcomes = solve_all(&|_, item| {
            let started = Instant::now();
            let solution = exhaustive_optimal(&item.instance, item.m)?;
            outcome(&solution, &item.instance, started.elapsed().as_secs_f64() * 1e3)
        })?;
        rows.push(solver_row("oracle", &items, &outcomes));
    }

    let text = rows
        .join("\n")
        .replace("{scheme}", &args.prize_scheme.to_string())
        + "\n";
    emit(args.out.as_deref(), &text)
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let policy = match &args.checkpoint {
        Some(p) => Policy::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Policy::init(NetConfig::default(), args.seed)?,
    };
    let scales = [("small", 20usize, 2usize), ("medium", 50, 3), ("large", 100, 5)];
    let count = args.count as usize;
    let mut rows = vec!["config,n,m,batch,instances,mean_ms,p50_ms,p95_ms".to_string()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for (label, n, m) in scales {
        let gen = GenConfig {
            n,
            m,
            t_max: 2.0,
            prize_scheme: PrizeScheme::Constant,
            single_depot: true,
            seed: args.seed,
        };
        let items: Vec<DatasetItem> = (0..count).map(|i| generate_item(&gen, i as u64)).collect();

        // warm caches before measuring
        rollout(&policy, &items[0].instance, m, SelectMode::Greedy, &mut rng)?;

        let mut times = Vec::with_capacity(count);
        for item in &items {
            let started = Instant::now();
            rollout(&policy, &item.instance, item.m, SelectMode::Greedy, &mut rng)?;
            times.push(started.elapsed().as_secs_f64() * 1e3);
        }
        let mean: f64 = times.iter().sum::<f64>() / count as f64;
        let mut sorted = times.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let pct = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
        rows.push(format!(
            "{label},{n},{m},1,{count},{mean:.3},{:.3},{:.3}",
            pct(0.50),
            pct(0.95)
        ));

        let started = Instant::now();
        for item in &items {
            rollout(&policy, &item.instance, item.m, SelectMode::Greedy, &mut rng)?;
        }
        let amortized = started.elapsed().as_secs_f64() * 1e3 / count as f64;
        rows.push(format!(
            "{label},{n},{m},{count},{count},{amortized:.3},{amortized:.3},{amortized:.3}"
        ));
    }
    emit(args.out.as_deref(), &(rows.join("\n") + "\n"))
}

fn cmd_solve(args: SolveArgs) -> Result<()> {
    let text = fs::read_to_string(&args.instance)
        .with_context(|| format!("reading {}", args.instance.display()))?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| anyhow!("{} holds no instance", args.instance.display()))?;
    let item = parse_line(line, 1)?;

    let solution = match args.solver {
        SolverKind::Greedy => greedy_heuristic(&item.instance, item.m),
        SolverKind::Oracle => exhaustive_optimal(&item.instance, item.m)?,
        SolverKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            random_rollout(&item.instance, item.m, &mut rng)?.solution
        }
        SolverKind::Policy => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| anyhow!("--solver policy needs --checkpoint"))?;
            let policy = Policy::load(path).with_context(|| format!("loading {}", path.display()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            rollout(&policy, &item.instance, item.m, SelectMode::Greedy, &mut rng)?.solution
        }
    };
    let dump = SolutionDump::new(&solution, &item.instance)?;
    println!("{}", serde_json::to_string(&dump)?);
    Ok(())
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            eprintln!("wrote {}", p.display());
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
        }
    }
    Ok(())
}
