use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nfim_core::dynsim::{simulate, ChannelSpec, Trace};
use nfim_core::estimator::fit;
use nfim_core::fisher::{alpha_grid, empirical_nfim, FimReport, FisherError};
use nfim_core::harness::{
    export_report, monte_carlo_study, perturbation_sweep, run_algorithm1, with_workers, write_sweep_csv,
    HarnessError, StudyConfig, StudyContext,
};
use nfim_core::measure::{noise_sigma_from_snr, synthesize, MeasurementSet};
use nfim_core::model::init_load_flow;
use nfim_core::params::ParameterVector;
use nfim_core::seed::derive_seed;

#[derive(Parser)]
#[command(name = "nfim", version, about = "Numerical Fisher information for dynamic model parameter identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured scenario and write one trace CSV per channel.
    Simulate(Common),
    /// Add white Gaussian noise sized from an SNR to a trace CSV.
    Measure(MeasureArgs),
    /// Averaged nFIM of every candidate channel at the starting point.
    Fim(Common),
    /// Fit the configured parameters to a measurement CSV.
    Fit(FitArgs),
    /// Select the most informative channel and fit on it.
    Select(Common),
    /// Monte-Carlo coherency study with per-parameter and per-channel tables.
    Study(Common),
    /// Normalized nFIM of one parameter as a function of the perturbation.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Single,
    Multi,
}

#[derive(Args)]
struct Common {
    /// Study configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in 9-bus configuration used when no file is given.
    #[arg(long, value_enum, default_value = "single")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Args)]
struct MeasureArgs {
    /// Trace CSV written by `simulate`.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 80.0)]
    snr_db: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Measurement CSV written by `measure` (with its JSON sidecar).
    #[arg(long)]
    measurements: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Parameter path, e.g. `SM1.gov.K_t`.
    #[arg(long)]
    parameter: String,
    /// Comma-separated perturbations; the calibration grid when omitted.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
}

impl Common {
    fn study_config(&self) -> Result<StudyConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => StudyConfig::load(path)?,
            None => match self.preset {
                Preset::Single => StudyConfig::reference_single(),
                Preset::Multi => StudyConfig::reference_multi(),
            },
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.snr_db {
            cfg.snr_db = s;
        }
        if let Some(n) = self.trials {
            cfg.trials = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path, HarnessError> {
        create_dir(&self.out)?;
        Ok(&self.out)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn trace_file(dir: &Path, channel: &ChannelSpec) -> PathBuf {
    dir.join(format!("{channel}.csv"))
}

fn cmd_simulate(args: &Common) -> Result<(), HarnessError> {
    let cfg = args.study_config()?;
    let model = cfg.truth_model()?;
    let op = init_load_flow(&model)?;
    let scenario = cfg.build_scenario(&model);
    let traces = simulate(&model, &op, &ParameterVector::empty(), &scenario)?;
    let dir = args.out_dir()?;
    for tr in &traces {
        let path = trace_file(dir, &tr.channel);
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        tr.write_csv(file).map_err(|e| io_err(&path, e))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_measure(args: &MeasureArgs) -> Result<(), HarnessError> {
    let file = fs::File::open(&args.trace).map_err(|e| io_err(&args.trace, e))?;
    let trace = Trace::read_csv(file).map_err(|e| HarnessError::Config(format!("{}: {e}", args.trace.display())))?;
    let sigma_n = noise_sigma_from_snr(&trace, args.snr_db)?;
    let mut z = synthesize(&trace, sigma_n, args.seed)?;
    z.snr_db = Some(args.snr_db);
    create_dir(&args.out)?;
    let path = args.out.join(format!("{}.meas.csv", trace.channel));
    z.save(&path)?;
    println!("{}  sigma_n = {sigma_n:.6e} {}", path.display(), trace.unit);
    Ok(())
}

#[derive(Serialize)]
struct ChannelFim<'a> {
    channel: &'a ChannelSpec,
    infeasible: Option<String>,
    fim: Option<FimReport>,
}

fn cmd_fim(args: &Common) -> Result<(), HarnessError> {
    let cfg = args.study_config()?;
    let ctx = StudyContext::new(&cfg)?;
    let seeds: Vec<u64> = (0..cfg.realizations as u64).map(|r| derive_seed(cfg.seed, r)).collect();
    let reports = with_workers(args.parallel, || {
        (0..cfg.channels.len())
            .map(|c| -> Result<ChannelFim<'_>, HarnessError> {
                let channel = &cfg.channels[c];
                let alphas = match ctx.calibrate(c) {
                    Ok(a) => a,
                    Err(e @ HarnessError::Fisher(FisherError::NoFeasibleAlpha { .. })) => {
                        return Ok(ChannelFim {
                            channel,
                            infeasible: Some(e.to_string()),
                            fim: None,
                        })
                    }
                    Err(e) => return Err(e),
                };
                let mut p = ctx.p0.clone();
                for (e, (a, _)) in p.entries.iter_mut().zip(alphas) {
                    e.alpha = a;
                }
                let fim = empirical_nfim(&ctx.channel(c), &p, ctx.sigma_n[c], &seeds, cfg.time_constant_base)?;
                Ok(ChannelFim {
                    channel,
                    infeasible: None,
                    fim: Some(fim),
                })
            })
            .collect::<Result<Vec<_>, _>>()
    })??;
    let path = args.out_dir()?.join("fim.json");
    write_json(&path, &reports)?;
    for r in &reports {
        match (&r.fim, &r.infeasible) {
            (Some(f), _) => println!("{:<16} V_e = {:.4e}  V_e[pu] = {:.4e}", r.channel.to_string(), f.v_e, f.v_e_pu),
            (None, why) => println!("{:<16} infeasible: {}", r.channel.to_string(), why.as_deref().unwrap_or("")),
        }
    }
    println!("{}", path.display());
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<(), HarnessError> {
    let cfg = args.common.study_config()?;
    let z = MeasurementSet::load(&args.measurements)?;
    let c = cfg
        .channels
        .iter()
        .position(|ch| *ch == z.channel)
        .ok_or_else(|| HarnessError::Config(format!("channel {} is not configured", z.channel)))?;
    let ctx = StudyContext::new(&cfg)?;
    let res = with_workers(args.common.parallel, || fit(&ctx.channel(c), &z, &ctx.p0, &cfg.fit))??;
    let dir = args.common.out_dir()?;
    write_json(&dir.join("estimation.json"), &res)?;
    let log = dir.join("fit_log.csv");
    let file = fs::File::create(&log).map_err(|e| io_err(&log, e))?;
    res.write_log(file).map_err(|e| io_err(&log, e))?;
    for e in &res.p_hat.entries {
        println!("{:<16} {:.6}", e.path, e.value);
    }
    println!("{} iterations, {:?}", res.iterations, res.converged_by);
    Ok(())
}

fn cmd_select(args: &Common) -> Result<(), HarnessError> {
    let cfg = args.study_config()?;
    let out = run_algorithm1(&cfg, args.parallel)?;
    let path = args.out_dir()?.join("selection.json");
    write_json(&path, &out)?;
    for cand in &out.candidates {
        println!("{:<16} V_e[pu] = {:.4e}", cand.channel.to_string(), cand.v_e_pu);
    }
    println!("selected {}", out.channel);
    for e in &out.estimation.p_hat.entries {
        println!("{:<16} {:.6}", e.path, e.value);
    }
    Ok(())
}

fn cmd_study(args: &Common) -> Result<(), HarnessError> {
    let cfg = args.study_config()?;
    let out = monte_carlo_study(&cfg, args.parallel)?;
    let files = export_report(&out.report, Some(&out.artifacts), args.out_dir()?)?;
    for ch in &out.report.channels {
        println!(
            "{:<16} V_e[pu] = {:.4e}  spearman = {}  crlb dominated = {}",
            ch.channel.to_string(),
            ch.average_v_e_pu,
            ch.spearman.map_or("-".into(), |r| format!("{r:.3}")),
            ch.crlb_dominated.map_or("-".into(), |d| d.to_string()),
        );
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), HarnessError> {
    let cfg = args.common.study_config()?;
    let alphas = args.alphas.clone().unwrap_or_else(alpha_grid);
    let points = perturbation_sweep(&cfg, &args.parameter, &alphas, args.common.parallel)?;
    let path = args.common.out_dir()?.join(format!("sweep_{}.csv", args.parameter));
    write_sweep_csv(&args.parameter, &points, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Measure(a) => cmd_measure(a),
        Command::Fim(a) => cmd_fim(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Study(a) => cmd_study(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
