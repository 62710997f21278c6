use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use framesync::distributed::{self, ProtocolConfig, StepSize, Variant};
use framesync::harness::instance::{instance_from_json, instance_to_json};
use framesync::harness::{self, verify, ExperimentConfig, InstanceSpec, NoiseModel, OutputFormat, TransformClass};
use framesync::sync_direct::Method;
use framesync::{Result, SyncError};

#[derive(Parser)]
#[command(name = "framesync", version, about = "Synchronization of pairwise frame transformations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over seeded random instances.
    Run(RunArgs),
    /// Optimality-gap experiment for projected H-method solutions.
    Gap(GapArgs),
    /// Run the invariant suite.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write one random instance as JSON.
    Instance {
        #[command(flatten)]
        inst: InstanceArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve an instance JSON file and print the metrics.
    Solve {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate the distributed protocol and write its trace as CSV.
    Protocol {
        #[command(flatten)]
        inst: InstanceArgs,
        #[arg(long, value_parser = ["z", "h"], default_value = "z")]
        variant: String,
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long, default_value_t = 5000)]
        rounds: usize,
        #[arg(long, default_value_t = 100)]
        trace_every: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct InstanceArgs {
    #[arg(long, default_value_t = 30)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, value_parser = parse_class, default_value = "orthogonal")]
    class: TransformClass,
    /// gauss-proj, gauss-raw or geodesic; defaults by class.
    #[arg(long)]
    noise: Option<String>,
    /// Geodesic noise radius.
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_4)]
    radius: f64,
    /// Use a complete graph minus this many random off-tree edges.
    #[arg(long)]
    missing: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl InstanceArgs {
    fn spec(&self) -> Result<InstanceSpec> {
        let mut spec = InstanceSpec::new(self.n, self.d, self.sigma, self.rho, self.class, self.seed);
        spec.missing_edges = self.missing;
        if let Some(name) = &self.noise {
            spec.noise = match name.as_str() {
                "gauss-proj" => NoiseModel::GaussProj,
                "gauss-raw" => NoiseModel::GaussRaw,
                "geodesic" => NoiseModel::Geodesic { radius: self.radius },
                other => return Err(SyncError::InvalidInput(format!("unknown noise model {other:?}"))),
            };
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[command(flatten)]
    inst: InstanceArgs,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 5000)]
    rounds: usize,
    #[arg(long, default_value_t = 5)]
    max_iters: usize,
    /// Affine and Euclidean methods: stop after the closed-form steps.
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format, default_value = "csv")]
    format: OutputFormat,
}

#[derive(Args)]
struct GapArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_4)]
    radius: f64,
    #[arg(long, default_value_t = 100)]
    missing: usize,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format, default_value = "csv")]
    format: OutputFormat,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: SyncError| e.to_string())
}

fn parse_class(s: &str) -> std::result::Result<TransformClass, String> {
    s.parse().map_err(|e: SyncError| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<OutputFormat, String> {
    s.parse().map_err(|e: SyncError| e.to_string())
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_result(result: &harness::ExperimentResult, format: OutputFormat, out: &Option<PathBuf>) -> Result<()> {
    let mut w = output(out)?;
    match format {
        OutputFormat::Csv => harness::write_csv(result, &mut w)?,
        OutputFormat::Json => harness::write_json(result, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn summarize(result: &harness::ExperimentResult) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6e}"));
    eprintln!(
        "{}: {} trials, {} failed, mean g' {}, mean h {}",
        result.config.method,
        result.trials.len(),
        result.failures(),
        fmt(result.mean_g_prime()),
        fmt(result.mean_h())
    );
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(a) => {
            let cfg = ExperimentConfig {
                spec: a.inst.spec()?,
                method: a.method,
                trials: a.trials,
                epsilon: a.epsilon,
                rounds: a.rounds,
                max_iters: a.max_iters,
                refine: !a.no_refine,
            };
            let result = harness::run_experiment(&cfg)?;
            write_result(&result, a.format, &a.out)?;
            summarize(&result);
        }
        Command::Gap(a) => {
            let mut spec = InstanceSpec::new(a.n, a.d, 0.0, 1.0, TransformClass::Orthogonal, a.seed);
            spec.noise = NoiseModel::Geodesic { radius: a.radius };
            spec.missing_edges = Some(a.missing);
            let result = harness::run_experiment(&ExperimentConfig::new(spec, Method::H, a.trials))?;
            write_result(&result, a.format, &a.out)?;
            summarize(&result);
        }
        Command::Verify { seed } => {
            let checks = verify::run_all(seed)?;
            for c in &checks {
                println!("{}", c.line());
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::Instance { inst, out } => {
            let instance = harness::make_instance(&inst.spec()?)?;
            let mut w = output(&out)?;
            serde_json::to_writer_pretty(&mut w, &instance_to_json(&instance))?;
            writeln!(w)?;
            w.flush()?;
        }
        Command::Solve { input, method, seed } => {
            let doc: serde_json::Value = serde_json::from_reader(io::BufReader::new(File::open(&input)?))?;
            let inst = instance_from_json(&doc)?;
            let cfg = ExperimentConfig::new(inst.spec.clone(), method, 1);
            cfg.validate()?;
            let record = harness::experiment::run_on_instance(&cfg, &inst, seed);
            println!("{}", serde_json::to_string_pretty(&record)?);
            return Ok(record.status.is_ok());
        }
        Command::Protocol { inst, variant, epsilon, rounds, trace_every, out } => {
            let spec = inst.spec()?;
            let instance = harness::make_instance(&spec)?;
            let cfg = ProtocolConfig {
                variant: if variant == "h" { Variant::H } else { Variant::Z },
                epsilon: StepSize::Fixed(epsilon),
                rounds,
                seed: spec.seed,
                trace_every,
                project: spec.class == TransformClass::Orthogonal,
                parallel: false,
            };
            let run = distributed::simulate(&instance.graph, &instance.transforms, &cfg)?;
            let mut w = output(&out)?;
            distributed::write_trace_csv(&run.trace, &mut w)?;
            w.flush()?;
            eprintln!("{} rounds, {} messages, epsilon {}", rounds, run.messages, run.epsilon);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
