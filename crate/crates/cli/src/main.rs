#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fluid_core::analysis::{
    empirical_variance_oracle, expected_second_moment, keep_probabilities_with,
    probability_mass_bound_with, random_gradient, rate_from_slack, trial_variance, VarianceModel,
};
use fluid_core::dropout::Strategy;
use fluid_core::experiment::{
    run_experiment, sweep_straggler_ratio, sweep_threshold, ExperimentConfig, OUT_DIR_ENV,
};
use fluid_core::nn::{Matrix, Model};
use fluid_core::rng::{rng_for, Stream};
use fluid_core::FluidError;

const DEFAULT_OUT_DIR: &str = "results";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "fluid", version, about = "Federated learning with invariant dropout, simulated")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Path to a `section.key = value` config file.
    config: PathBuf,
    /// Replace the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides FLUID_OUT_DIR and output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the strategy list (none, random, ordered, invariant).
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Force every straggler to this sub-model rate.
    #[arg(long)]
    rate: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, rate, seed) cell of a config.
    Run(RunArgs),
    /// Pin the drop threshold to each value and report invariant fraction and accuracy.
    SweepThreshold {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        th: Vec<f64>,
    },
    /// Vary the fraction of clients treated as stragglers.
    SweepRatio {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
    },
    /// Check the retained-probability bound on random sparse gradients.
    BoundCheck {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random gradients to check.
        #[arg(long, default_value_t = 1)]
        instances: usize,
        /// Use p = r|g| and second moment sum g^2/p.
        #[arg(long)]
        alt_model: bool,
    },
    /// Compare backpropagation with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "6,8,5,3")]
        layout: Vec<usize>,
    },
}

/// Errors the user can fix by editing the command line or config.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(e: impl Into<anyhow::Error>) -> anyhow::Error {
    ConfigError(e.into()).into()
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))
        .map_err(config_error)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(s) = args.strategy {
        cfg.strategies = vec![s];
    }
    if let Some(r) = args.rate {
        cfg.forced_rates = vec![r];
    }
    cfg.validate().map_err(config_error)?;
    let out = args
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    Ok((cfg, out))
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let (cfg, out) = load(args)?;
    let report = run_experiment(&cfg, Some(&out))?;
    println!("strategy,r,runs,final_accuracy_mean,final_accuracy_std,total_time_mean,total_time_std");
    for e in &report.summary {
        println!(
            "{},{},{},{},{},{},{}",
            e.strategy,
            e.r,
            e.runs,
            e.final_accuracy_mean,
            e.final_accuracy_std,
            e.total_time_mean,
            e.total_time_std
        );
    }
    eprintln!("wrote {} metrics files to {}", report.outcomes.len(), out.display());
    Ok(())
}

fn cmd_sweep_threshold(args: &RunArgs, th: &[f64]) -> Result<()> {
    let (cfg, out) = load(args)?;
    let rows = sweep_threshold(&cfg, th)?;
    println!("th,invariant_fraction,final_accuracy");
    for r in &rows {
        println!("{},{},{}", r.th, r.invariant_fraction, r.final_accuracy);
    }
    write_json(&out, "threshold_sweep.json", &rows)
}

fn cmd_sweep_ratio(args: &RunArgs, ratios: &[f64]) -> Result<()> {
    let (cfg, out) = load(args)?;
    let rows = sweep_straggler_ratio(&cfg, ratios)?;
    println!("ratio,strategy,mean_accuracy,std_accuracy");
    for r in &rows {
        println!("{},{},{},{}", r.ratio, r.strategy, r.mean_accuracy, r.std_accuracy);
    }
    write_json(&out, "ratio_sweep.json", &rows)
}

#[allow(clippy::too_many_arguments)]
fn cmd_bound_check(
    m: usize,
    k: usize,
    eps: f64,
    trials: usize,
    seed: u64,
    instances: usize,
    alt_model: bool,
) -> Result<()> {
    if m == 0 || k > m {
        return Err(config_error(anyhow::anyhow!("need m >= 1 and k <= m, got m = {m}, k = {k}")));
    }
    if trials == 0 {
        return Err(config_error(anyhow::anyhow!("trials must be >= 1")));
    }
    if !(eps > 0.0) {
        return Err(config_error(anyhow::anyhow!("eps must be > 0, got {eps}")));
    }
    let model = if alt_model { VarianceModel::Alternative } else { VarianceModel::Primary };
    for i in 0..instances as u64 {
        let mut rng = rng_for(seed, Stream::Analysis, &[i]);
        let g = random_gradient(m, &mut rng);
        let line = match check_instance(&g, k, eps, trials, model, &mut rng) {
            Ok(v) => v,
            Err(e) => serde_json::json!({
                "instance": i, "m": m, "k": k, "eps": eps, "feasible": false, "error": e.to_string(),
            }),
        };
        let mut line = line;
        line["instance"] = i.into();
        println!("{line}");
    }
    Ok(())
}

fn check_instance(
    g: &[f64],
    k: usize,
    eps: f64,
    trials: usize,
    model: VarianceModel,
    rng: &mut fluid_core::rng::SimRng,
) -> fluid_core::Result<serde_json::Value> {
    let bound = probability_mass_bound_with(g, k, eps, model)?;
    let (rate, p) = if k == g.len() {
        (None, vec![1.0; g.len()])
    } else {
        let r = rate_from_slack(g, k, eps)?;
        (Some(r), keep_probabilities_with(g, k, r, model)?)
    };
    let expected = expected_second_moment(g, &p, model);
    let estimate = empirical_variance_oracle(g, &p, trials, rng, model)?;
    let se = (trial_variance(g, &p, model) / trials as f64).sqrt();
    Ok(serde_json::json!({
        "m": g.len(),
        "k": k,
        "eps": eps,
        "feasible": true,
        "model": if model == VarianceModel::Primary { "primary" } else { "alternative" },
        "rate": rate,
        "sum_p": bound.sum_p,
        "bound": bound.bound,
        "holds": bound.holds,
        "expected_second_moment": expected,
        "empirical_second_moment": estimate,
        "standard_error": se,
        "within_3_se": (estimate - expected).abs() <= 3.0 * se,
        "trials": trials,
    }))
}

fn cross_entropy(model: &Model, x: &Matrix, y: &[usize]) -> Result<f64> {
    let out = model.forward(x)?;
    Ok(y.iter().enumerate().map(|(i, &c)| -out.get(i, c).ln()).sum::<f64>() / y.len() as f64)
}

fn cmd_gradcheck(seed: u64, layout: &[usize]) -> Result<()> {
    use rand::Rng;
    let mut model = Model::init(layout, seed).map_err(config_error)?;
    let mut rng = rng_for(seed, Stream::Analysis, &[]);
    let n = 8;
    let x = Matrix::from_vec(n, layout[0], (0..n * layout[0]).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let classes = *layout.last().unwrap_or(&1);
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let (grads, _) = model.backward(&x, &y)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for l in 0..model.layers().len() {
        let count = model.layers()[l].weights.data().len();
        for i in 0..count + model.layers()[l].biases.len() {
            let read = |m: &Model| {
                if i < count { m.layers()[l].weights.data()[i] } else { m.layers()[l].biases[i - count] }
            };
            let write = |m: &mut Model, v: f64| {
                if i < count { m.layers_mut()[l].weights.data_mut()[i] = v } else { m.layers_mut()[l].biases[i - count] = v }
            };
            let orig = read(&model);
            write(&mut model, orig + h);
            let up = cross_entropy(&model, &x, &y)?;
            write(&mut model, orig - h);
            let down = cross_entropy(&model, &x, &y)?;
            write(&mut model, orig);
            let fd = (up - down) / (2.0 * h);
            let an = if i < count { grads.weights[l].data()[i] } else { grads.biases[l][i - count] };
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-7));
        }
    }
    println!("{}", serde_json::json!({ "layout": layout, "seed": seed, "max_relative_error": worst }));
    if worst >= GRADCHECK_TOLERANCE {
        bail!("max relative error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::SweepThreshold { run, th } => cmd_sweep_threshold(&run, &th),
        Command::SweepRatio { run, ratios } => cmd_sweep_ratio(&run, &ratios),
        Command::BoundCheck { m, k, eps, trials, seed, instances, alt_model } => {
            cmd_bound_check(m, k, eps, trials, seed, instances, alt_model)
        }
        Command::Gradcheck { seed, layout } => cmd_gradcheck(seed, &layout),
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || c.downcast_ref::<FluidError>().is_some_and(FluidError::is_config_error)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
