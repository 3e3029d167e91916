//! `cfsim` command-line driver.
//!
//! Exit status is 0 on success, 2 for configuration errors and 3 when a
//! stage fails while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use cfsim::eval::{
    calibration, calibration_csv, curve_pair_csv, mse, mse_csv, mse_raw_csv, population_average, treatment_effect,
    write_csv, ChannelScale, Source,
};
use cfsim::experiment::{run_experiment, verify_manifest, ExperimentConfig, ModelSpec};
use cfsim::gcomp::{
    g_compute_dataset, natural_course, positivity_check, read_mc_outputs, write_mc_outputs, GcompOptions,
    StrategySpec,
};
use cfsim::gnet::{fit, load_checkpoint, save_checkpoint, GNet, GNetConfig, Preset};
use cfsim::io::{read_dataset, write_dataset, write_json};
use cfsim::sim::{generate_dataset, SimConfig};
use cfsim::{Error, Regime, Result};
use clap::{Args, Parser, Subcommand};

const OUTPUT_ROOT_VAR: &str = "CFSIM_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "cfsim", version, about = "Counterfactual trajectory simulation and g-computation")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a cohort from the hemodynamic simulator.
    Simulate(SimulateArgs),
    /// Fit a model on an observational cohort.
    Train(TrainArgs),
    /// Monte-Carlo g-computation for every patient of a cohort.
    Gcomp(GcompArgs),
    /// Score Monte-Carlo outputs against ground truth.
    Evaluate(EvaluateArgs),
    /// Simulate under the learned treatment process and compare with the data.
    NaturalCourse(NaturalCourseArgs),
    /// Run the full protocol.
    RunExperiment(RunArgs),
    /// Re-hash an artifact directory against its manifest.
    VerifyManifest(VerifyArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulator settings as JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `observational`, `c1` or `c2`.
    #[arg(long, default_value = "observational")]
    regime: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "horizon", short = 'k')]
    k: Option<usize>,
    #[arg(long, short = 'm')]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model configuration as JSON.
    #[arg(long, conflicts_with = "preset")]
    model_config: Option<PathBuf>,
    /// M1, M2, M3 or M4.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    treatment_head: bool,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the per-epoch losses.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GcompArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Divergence step; defaults to the cohort's own.
    #[arg(long, short = 'm')]
    m: Option<usize>,
    /// `o`, `c1`, `c2`, `learned` or a JSON strategy.
    #[arg(long)]
    strategy: String,
    #[arg(long, default_value_t = 100)]
    draws: usize,
    #[arg(long)]
    dropout: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.75])]
    alphas: Vec<f64>,
    #[arg(long)]
    keep_draws: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    mc: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Model whose training statistics scale the errors; raw units otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Control arm for treatment-effect curves.
    #[arg(long, requires = "truth_control")]
    mc_control: Option<PathBuf>,
    #[arg(long, requires = "mc_control")]
    truth_control: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.75])]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "map,cvp")]
    channels: Vec<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct NaturalCourseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Steps to simulate from baseline.
    #[arg(long)]
    horizon: usize,
    #[arg(long, default_value_t = 100)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also report how often the data follow this strategy.
    #[arg(long)]
    positivity: Option<String>,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration as JSON; defaults to the desk protocol.
    #[arg(long, conflicts_with = "full")]
    config: Option<PathBuf>,
    /// Start from the full-size protocol.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    n_observational: Option<usize>,
    #[arg(long)]
    n_counterfactual: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long)]
    mc_dropout: bool,
    /// Artifact directory; defaults to `experiment` under the output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    dir: PathBuf,
}

/// Relative output paths are placed under `$CFSIM_OUTPUT_ROOT` when set.
fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn alpha_pair(v: &[f64]) -> Result<[f64; 2]> {
    <[f64; 2]>::try_from(v).map_err(|_| Error::Config(format!("expected two quantile levels, got {}", v.len())))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("simulator config: {e}")))?
        }
        None => SimConfig::default(),
    };
    config.n = a.n.unwrap_or(config.n);
    config.k = a.k.unwrap_or(config.k);
    config.m = a.m.unwrap_or(config.m);
    config.master_seed = a.seed.unwrap_or(config.master_seed);
    let regime = Regime::from_str(&a.regime)?;
    let ds = generate_dataset(&config, regime)?;
    let out = output_path(&a.out);
    write_dataset(&ds, &out)?;
    println!("wrote {} {} trajectories to {}", ds.len(), regime.as_str(), out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let mut config = match (&a.model_config, &a.preset) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            GNetConfig::from_json(&text)?
        }
        (None, Some(name)) => GNetConfig::preset(Preset::from_str(name)?, ds.schema()),
        (None, None) => return Err(Error::Config("pass --model-config or --preset".into())),
    };
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.seed = a.seed.unwrap_or(config.seed);
    config.include_treatment_head |= a.treatment_head;
    let fitted = fit(GNet::build(config, ds.schema().clone())?, &ds, a.train_fraction)?;
    let out = output_path(&a.out);
    save_checkpoint(&fitted.model, Some(&fitted.bank), &out)?;
    if let Some(r) = &a.report {
        write_json(&fitted.report, output_path(r))?;
    }
    println!(
        "best epoch {} validation loss {:.6}; checkpoint {}",
        fitted.report.best_epoch,
        fitted.report.best_val_loss,
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(GNet, cfsim::gnet::ResidualBank)> {
    let (model, bank) = load_checkpoint(path)?;
    let bank = bank.ok_or_else(|| Error::Config(format!("{} has no residual bank", path.display())))?;
    Ok((model, bank))
}

fn gcomp(a: GcompArgs) -> Result<()> {
    let (model, bank) = load_model(&a.model)?;
    let ds = read_dataset(&a.data)?;
    let strategy = StrategySpec::parse(&a.strategy)?;
    let opts = GcompOptions {
        draws: a.draws,
        dropout: a.dropout,
        alphas: alpha_pair(&a.alphas)?,
        seed: a.seed,
        keep_draws: a.keep_draws,
    };
    let m = a.m.unwrap_or(ds.header.m);
    let out = g_compute_dataset(&model, &bank, &ds, m, &strategy, &opts)?;
    let path = output_path(&a.out);
    write_mc_outputs(&out, &path)?;
    println!("wrote {} patients x {} draws to {}", out.len(), a.draws, path.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let truth = read_dataset(&a.truth)?;
    let mc = read_mc_outputs(&a.mc)?;
    let m = mc.first().map(|o| o.m).ok_or_else(|| Error::Empty("no Monte-Carlo outputs".into()))?;
    let scale = match &a.model {
        Some(p) => {
            let (model, _) = load_checkpoint(p)?;
            ChannelScale::from_normalizer(truth.schema(), model.normalizer())
        }
        None => ChannelScale::unit(truth.schema()),
    };
    let [lo, hi] = alpha_pair(&a.alphas)?;
    let dir = output_path(&a.out_dir);
    let table = mse(&mc, &truth, m, &scale)?;
    let cal = calibration(&mc, &truth, m, &scale, lo, hi)?;
    write_csv(&mse_csv(&table)?, dir.join("mse.csv"))?;
    write_csv(&mse_raw_csv(&table)?, dir.join("mse_raw.csv"))?;
    write_csv(&calibration_csv(&cal)?, dir.join("calibration.csv"))?;
    for ch in &a.channels {
        let est = population_average(Source::Mc(&mc), ch)?;
        let tru = population_average(Source::Data(&truth), ch)?;
        write_csv(&curve_pair_csv(&est, &tru)?, dir.join(format!("pop_avg_{ch}.csv")))?;
    }
    if let (Some(mp), Some(tp)) = (&a.mc_control, &a.truth_control) {
        let mc2 = read_mc_outputs(mp)?;
        let truth2 = read_dataset(tp)?;
        for ch in &a.channels {
            let est = treatment_effect(Source::Mc(&mc), Source::Mc(&mc2), ch)?;
            let tru = treatment_effect(Source::Data(&truth), Source::Data(&truth2), ch)?.from_step(m);
            write_csv(&curve_pair_csv(&est, &tru)?, dir.join(format!("effect_{ch}.csv")))?;
        }
    }
    write_json(
        &serde_json::json!({ "mse": table, "calibration": cal }),
        dir.join("metrics.json"),
    )?;
    println!(
        "pooled MSE {:.6}; pooled coverage {:.4} (nominal {:.2}); tables in {}",
        table.pooled,
        cal.pooled,
        cal.nominal(),
        dir.display()
    );
    Ok(())
}

fn natural(a: NaturalCourseArgs) -> Result<()> {
    let (model, bank) = load_model(&a.model)?;
    let ds = read_dataset(&a.data)?;
    let opts = GcompOptions {
        draws: a.draws,
        seed: a.seed,
        ..GcompOptions::default()
    };
    let nc = natural_course(&model, &bank, &ds, a.horizon, &opts)?;
    let positivity = match &a.positivity {
        Some(s) => Some(positivity_check(&ds, &StrategySpec::parse(s)?, a.tolerance)?),
        None => None,
    };
    let path = output_path(&a.out);
    write_json(&serde_json::json!({ "natural_course": nc, "positivity": positivity }), &path)?;
    println!("natural course over {} steps written to {}", a.horizon, path.display());
    Ok(())
}

fn experiment(a: RunArgs) -> Result<()> {
    let mut config = match (&a.config, a.full) {
        (Some(p), _) => ExperimentConfig::from_file(p)?,
        (None, true) => ExperimentConfig::full(),
        (None, false) => ExperimentConfig::desk(),
    };
    if let Some(s) = a.seed {
        config.sim.master_seed = s;
    }
    config.epochs = a.epochs.or(config.epochs);
    config.draws = a.draws.unwrap_or(config.draws);
    config.sim.n = a.n_observational.unwrap_or(config.sim.n);
    config.n_counterfactual = a.n_counterfactual.unwrap_or(config.n_counterfactual);
    config.mc_dropout |= a.mc_dropout;
    if let Some(names) = &a.models {
        config.models = names
            .iter()
            .map(|n| Preset::from_str(n).map(ModelSpec::Preset))
            .collect::<Result<_>>()?;
    }
    let dir = a.out.clone().unwrap_or_else(|| PathBuf::from("experiment"));
    config.output_dir = output_path(&dir);
    let outcome = run_experiment(&config)?;
    for s in &outcome.summaries {
        for st in &s.strategies {
            println!(
                "{} {}: pooled MSE {:.6}, coverage {:.4}",
                s.model, st.strategy, st.pooled_mse, st.pooled_coverage
            );
        }
    }
    println!("artifacts in {}", outcome.dir.display());
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let v = verify_manifest(&a.dir)?;
    println!("{}", serde_json::to_string_pretty(&v)?);
    if v.is_ok() {
        println!("{} files verified", v.checked);
        Ok(())
    } else {
        Err(Error::StateCorruption(format!("{} does not match its manifest", a.dir.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Gcomp(a) => gcomp(a),
        Command::Evaluate(a) => evaluate(a),
        Command::NaturalCourse(a) => natural(a),
        Command::RunExperiment(a) => experiment(a),
        Command::VerifyManifest(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
