use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use jje::analysis::{
    corrupted_count, default_fraction_grid, emit_figure2_data, exact_corruption_probability,
    rational_to_f64, search_parameters, Model, DEFAULT_PAIRS,
};
use jje::sim::{monte_carlo_unlock_without_honest, run_scenario, World, WorldConfig, SCENARIOS};

#[derive(Parser)]
#[command(
    name = "jje",
    version,
    about = "Exceptional-access analysis and simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact corruption probability at one parameter point.
    Analyze {
        #[command(flatten)]
        point: Point,
        /// Also print the exact rational values.
        #[arg(long)]
        exact: bool,
    },
    /// Probability curves over corruption fractions as CSV.
    Sweep {
        /// Single curve instead of the default five.
        #[arg(long, requires = "threshold")]
        delegation: Option<u64>,
        #[arg(long, requires = "delegation")]
        threshold: Option<u64>,
        /// Grid spacing for fractions in [0, 1].
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Smallest delegation size, then smallest threshold, meeting a target probability.
    Search {
        #[arg(long)]
        devices: u64,
        #[arg(long)]
        corrupted_fraction: f64,
        #[arg(long)]
        target: f64,
        #[arg(long, default_value_t = 64)]
        max_delegation: u64,
        #[arg(long, value_enum, default_value_t = ModelArg::Hypergeometric)]
        model: ModelArg,
    },
    /// Run a world for some epochs, optionally with a Monte Carlo estimate.
    Simulate {
        /// Key-value world config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        devices: Option<u64>,
        #[arg(long)]
        corrupted_fraction: Option<f64>,
        #[arg(long)]
        delegation: Option<usize>,
        #[arg(long)]
        threshold: Option<usize>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Monte Carlo trials of the no-honest-delegate unlock experiment.
        #[arg(long)]
        trials: Option<u64>,
        /// Transcript destination (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named scenario script, or `all`.
    Scenario {
        name: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Transcript destination (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Point {
    #[arg(long)]
    devices: u64,
    #[arg(long)]
    corrupted_fraction: f64,
    #[arg(long)]
    delegation: u64,
    #[arg(long)]
    threshold: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Binomial,
    Hypergeometric,
}

impl From<ModelArg> for Model {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Binomial => Model::Binomial,
            ModelArg::Hypergeometric => Model::Hypergeometric,
        }
    }
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn invalid(e: impl ToString) -> Failure {
    Failure::Invalid(e.to_string())
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn check_fraction(f: f64) -> Result<(), Failure> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Failure::Invalid(format!(
            "corrupted fraction {f} outside [0, 1]"
        )))
    }
}

fn analyze(p: Point, exact: bool) -> Result<(), Failure> {
    check_fraction(p.corrupted_fraction)?;
    let c = corrupted_count(p.devices, p.corrupted_fraction);
    println!(
        "N={} C={} D={} t={}",
        p.devices, c, p.delegation, p.threshold
    );
    for model in [Model::Binomial, Model::Hypergeometric] {
        let point = exact_corruption_probability(p.devices, c, p.delegation, p.threshold, model)
            .map_err(invalid)?;
        let name = match model {
            Model::Binomial => "binomial",
            Model::Hypergeometric => "hypergeometric",
        };
        println!("p_{name} = {:e}", point.p_f64());
        if exact {
            println!("p_{name}_exact = {}", point.p);
        }
    }
    Ok(())
}

fn sweep(pair: Option<(u64, u64)>, step: f64, out: &Option<PathBuf>) -> Result<(), Failure> {
    let pairs: Vec<(u64, u64)> = pair.map_or_else(|| DEFAULT_PAIRS.to_vec(), |p| vec![p]);
    let grid = if (step - 0.05).abs() < 1e-12 {
        default_fraction_grid()
    } else {
        if !(step > 0.0 && step <= 1.0) {
            return Err(Failure::Invalid(format!("step {step} outside (0, 1]")));
        }
        let n = (1.0 / step + 1e-9).floor() as u64;
        let mut g: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
        if g.last().is_some_and(|&x| x < 1.0) {
            g.push(1.0);
        }
        g
    };
    for &(d, t) in &pairs {
        exact_corruption_probability(d, 0, d, t, Model::Binomial).map_err(invalid)?;
    }
    let mut w = output(out)?;
    emit_figure2_data(&pairs, &grid, &mut w)?;
    w.flush()?;
    Ok(())
}

fn search(
    devices: u64,
    fraction: f64,
    target: f64,
    d_max: u64,
    model: Model,
) -> Result<(), Failure> {
    check_fraction(fraction)?;
    let c = corrupted_count(devices, fraction);
    match search_parameters(devices, c, target, d_max, model).map_err(invalid)? {
        Some((d, t)) => {
            let p = exact_corruption_probability(devices, c, d, t, model).map_err(invalid)?;
            println!("D={d} t={t} p={:e}", rational_to_f64(&p.p));
        }
        None => println!("none: no D ≤ {d_max} reaches p ≤ {target}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    config: Option<PathBuf>,
    devices: Option<u64>,
    fraction: Option<f64>,
    delegation: Option<usize>,
    threshold: Option<usize>,
    epochs: Option<u64>,
    seed: Option<u64>,
    trials: Option<u64>,
    out: &Option<PathBuf>,
) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(path) => std::fs::read_to_string(&path)?
            .parse::<WorldConfig>()
            .map_err(invalid)?,
        None => WorldConfig::default(),
    };
    if let Some(v) = devices {
        cfg.devices = v;
    }
    if let Some(v) = fraction {
        cfg.corruption_fraction = v;
    }
    if let Some(v) = delegation {
        cfg.delegation = v;
    }
    if let Some(v) = threshold {
        cfg.threshold = v;
    }
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(invalid)?;
    if trials == Some(0) {
        return Err(Failure::Invalid("trials must be at least 1".into()));
    }

    let mut world = World::new(cfg.clone()).map_err(invalid)?;
    for _ in 0..cfg.epochs {
        let r = world.run_epoch_cycle();
        println!(
            "epoch {} step {}: published={} entries={} updated={} frozen={} inactive={}",
            r.epoch, r.step, r.published, r.entries, r.updated, r.frozen, r.inactive
        );
        for reason in &r.reasons {
            println!("  {reason}");
        }
    }
    if let Some(trials) = trials {
        let est = monte_carlo_unlock_without_honest(&cfg, trials);
        let exact = exact_corruption_probability(
            cfg.devices,
            cfg.corrupted_count(),
            cfg.delegation as u64,
            cfg.threshold as u64,
            Model::Hypergeometric,
        )
        .map_err(invalid)?;
        println!(
            "monte carlo: {}/{} = {:e} (exact {:e})",
            est.successes,
            est.trials,
            est.p_hat(),
            exact.p_f64()
        );
    }
    if out.is_some() {
        let mut w = output(out)?;
        w.write_all(world.transcript().to_jsonl().as_bytes())?;
        w.flush()?;
    }
    Ok(())
}

fn scenario(name: &str, seed: u64, out: &Option<PathBuf>) -> Result<bool, Failure> {
    let names: Vec<&str> = if name == "all" {
        SCENARIOS.to_vec()
    } else {
        vec![name]
    };
    if let Some(bad) = names.iter().find(|n| !SCENARIOS.contains(n)) {
        return Err(Failure::Invalid(format!(
            "unknown scenario {bad:?}; known: {}",
            SCENARIOS.join(", ")
        )));
    }
    let mut all_passed = true;
    let mut transcript = String::new();
    for n in names {
        let report = run_scenario(n, seed).map_err(|e| Failure::Runtime(e.to_string()))?;
        println!(
            "{} [{}]",
            report.name,
            if report.passed() { "pass" } else { "FAIL" }
        );
        for a in &report.assertions {
            println!(
                "  {} {}{}",
                if a.passed { "ok  " } else { "FAIL" },
                a.name,
                if a.detail.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", a.detail)
                }
            );
        }
        all_passed &= report.passed();
        transcript.push_str(&report.transcript.to_jsonl());
    }
    if out.is_some() {
        let mut w = output(out)?;
        w.write_all(transcript.as_bytes())?;
        w.flush()?;
    }
    Ok(all_passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze { point, exact } => analyze(point, exact).map(|_| true),
        Command::Sweep {
            delegation,
            threshold,
            step,
            out,
        } => sweep(delegation.zip(threshold), step, &out).map(|_| true),
        Command::Search {
            devices,
            corrupted_fraction,
            target,
            max_delegation,
            model,
        } => search(
            devices,
            corrupted_fraction,
            target,
            max_delegation,
            model.into(),
        )
        .map(|_| true),
        Command::Simulate {
            config,
            devices,
            corrupted_fraction,
            delegation,
            threshold,
            epochs,
            seed,
            trials,
            out,
        } => simulate(
            config,
            devices,
            corrupted_fraction,
            delegation,
            threshold,
            epochs,
            seed,
            trials,
            &out,
        )
        .map(|_| true),
        Command::Scenario { name, seed, out } => scenario(&name, seed, &out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
