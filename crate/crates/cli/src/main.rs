use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use chanpred::channel::{add_noise, sample_grid, scenario_one_paths, scenario_two_paths, ChannelTensor, PathSet};
use chanpred::crb::{build_fim, horizon_bound, Param};
use chanpred::harness::{
    figure_csvs, format_float, read_csv, run_experiment, to_json, write_cdf_csv, write_csv, write_nse_samples_csv,
    ExperimentConfig, Metric, Profile, Scenario,
};
use chanpred::linfix::{parse_key_values, to_db, SeededStream};
use chanpred::predictor::fit;

#[derive(Parser)]
#[command(name = "chanpred", version, about = "Parametric MIMO-OFDM channel prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a channel realization and write the (noisy) tensors.
    Simulate(Common),
    /// Fit the selected models to one realization and print the estimates as JSON.
    Fit(Common),
    /// Cramér–Rao bounds of the structural parameters and the prediction error.
    Bound(Common),
    /// Full Monte Carlo run.
    Experiment(Common),
    /// Split an experiment's results into per-figure CSV files.
    Report {
        /// Directory holding results.csv (and optionally nse_samples.csv).
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    /// doddoa, tssm, mssm or all (comma-separated).
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated SNR values in dB; `inf` means noiseless.
    #[arg(long)]
    snr: Option<String>,
    #[arg(long = "horizon-lambda")]
    horizon_lambda: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed model order, bypassing order selection.
    #[arg(long)]
    z: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    profile: Option<String>,
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(anyhow!("{e}"))
}

/// Profile, then config file, then command-line flags.
fn build_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let profile: Profile = match &c.profile {
        Some(p) => p.parse().map_err(config_err)?,
        None => Profile::Desk,
    };
    let mut cfg = ExperimentConfig::profile(profile);
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let named = parse_key_values(&text).map_err(config_err)?.get("profile").map(|p| p.parse::<Profile>());
        if let (Some(Ok(named)), Some(_)) = (&named, &c.profile) {
            if *named != profile {
                return Err(config_err("--profile conflicts with the profile named in the config file"));
            }
        }
        cfg.apply_config_text(&text).map_err(config_err)?;
    }
    let flags = [
        ("scenario", c.scenario.clone()),
        ("models", c.model.clone()),
        ("snr_db_grid", c.snr.clone()),
        ("horizons_lambda", c.horizon_lambda.clone()),
        ("n_trials", c.trials.map(|v| v.to_string())),
        ("rng_seed", c.seed.map(|v| v.to_string())),
        ("z_override", c.z.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.apply_key(key, &v).map_err(config_err)?;
        }
    }
    if c.threads == Some(0) {
        return Err(config_err("--threads must be >= 1"));
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn paths_for(cfg: &ExperimentConfig) -> anyhow::Result<PathSet> {
    Ok(match cfg.scenario {
        Scenario::One => scenario_one_paths(),
        Scenario::Two => scenario_two_paths(cfg.n_paths, &cfg.channel, cfg.rng_seed)?,
    })
}

fn noisy_tensors(cfg: &ExperimentConfig, paths: &PathSet) -> anyhow::Result<Vec<(f64, ChannelTensor)>> {
    use rand::Rng;
    let clean = sample_grid(paths, &cfg.channel);
    let stream = SeededStream::new(cfg.rng_seed, 0);
    cfg.snr_db_grid
        .iter()
        .enumerate()
        .map(|(i, &snr)| {
            let seed: u64 = stream.child(1 + i as u64).rng().random();
            Ok((snr, add_noise(&clean, snr, seed)?))
        })
        .collect()
}

fn snr_tag(snr: f64) -> String {
    if snr.is_finite() {
        format!("{snr}")
    } else {
        "inf".into()
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn emit(bytes: &[u8]) -> anyhow::Result<()> {
    match std::io::stdout().lock().write_all(bytes) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn tensor_csv(t: &ChannelTensor) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["q", "k", "rx", "tx", "re", "im"])?;
    let c = &t.config;
    for q in 0..c.n_time {
        for k in 0..c.n_freq {
            let h = t.at(q, k);
            for n in 0..c.n_rx {
                for m in 0..c.n_tx {
                    let v = h[(n, m)];
                    w.write_record([q.to_string(), k.to_string(), n.to_string(), m.to_string(), format_float(v.re), format_float(v.im)])?;
                }
            }
        }
    }
    w.into_inner().map_err(|e| anyhow!("{e}"))
}

fn simulate(c: &Common) -> Result<(), Failure> {
    let cfg = build_config(c)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("simulate"));
    let paths = paths_for(&cfg)?;
    write_file(&out, "paths.txt", paths.to_text().as_bytes())?;
    for (snr, t) in noisy_tensors(&cfg, &paths)? {
        write_file(&out, &format!("tensor_snr_{}.csv", snr_tag(snr)), &tensor_csv(&t)?)?;
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn fit_cmd(c: &Common) -> Result<(), Failure> {
    let cfg = build_config(c)?;
    let paths = paths_for(&cfg)?;
    let opts = cfg.fit_options();
    let mut fits = Vec::new();
    for (snr, t) in noisy_tensors(&cfg, &paths)? {
        for &model in &cfg.models {
            let entry = match fit(&t, model, &opts) {
                Ok(est) => serde_json::json!({ "snr_db": snr_tag(snr), "model": model.to_string(), "estimate": est }),
                Err(e) => serde_json::json!({ "snr_db": snr_tag(snr), "model": model.to_string(), "error": e.to_string() }),
            };
            fits.push(entry);
        }
    }
    let doc = serde_json::json!({ "paths": paths.normalized(&cfg.channel), "fits": fits });
    let text = serde_json::to_string_pretty(&doc).map_err(anyhow::Error::from)?;
    match &c.out {
        Some(dir) => write_file(dir, "fit.json", text.as_bytes())?,
        None => emit(format!("{text}\n").as_bytes())?,
    }
    Ok(())
}

fn bound_cmd(c: &Common) -> Result<(), Failure> {
    let cfg = build_config(c)?;
    let paths = paths_for(&cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["snr_db", "quantity", "horizon_lambda", "value"]).map_err(anyhow::Error::from)?;
    for (snr, t) in noisy_tensors(&cfg, &paths)? {
        if t.noise_var == 0.0 {
            continue;
        }
        let report = build_fim(&paths, &cfg.channel, t.noise_var).map_err(anyhow::Error::from)?;
        let mut rec = |q: String, h: String, v: f64| w.write_record([format_float(snr), q, h, format_float(v)]);
        for p in &report.param_order {
            if !matches!(p, Param::NoiseVar) {
                rec(format!("crb_{p}"), String::new(), report.crb(*p)).map_err(anyhow::Error::from)?;
            }
        }
        for &h in &cfg.horizons_lambda {
            let b = horizon_bound(&report, &paths, &cfg.channel, h);
            rec(Metric::PredictionBound.name(), format_float(h), to_db(b)).map_err(anyhow::Error::from)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("{e}"))?;
    match &c.out {
        Some(dir) => write_file(dir, "bounds.csv", &bytes)?,
        None => emit(&bytes)?,
    }
    Ok(())
}

/// Returns whether the run is degraded.
fn experiment(c: &Common) -> Result<bool, Failure> {
    let cfg = build_config(c)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    let table = run_experiment(&cfg).map_err(anyhow::Error::from)?;
    let mut buf = Vec::new();
    write_csv(&table, &mut buf).map_err(anyhow::Error::from)?;
    write_file(&out, "results.csv", &buf)?;
    buf.clear();
    write_nse_samples_csv(&table, &mut buf).map_err(anyhow::Error::from)?;
    write_file(&out, "nse_samples.csv", &buf)?;
    buf.clear();
    write_cdf_csv(&table, &mut buf).map_err(anyhow::Error::from)?;
    write_file(&out, "nse_cdf.csv", &buf)?;
    let json = serde_json::to_string_pretty(&to_json(&table)).map_err(anyhow::Error::from)?;
    write_file(&out, "results.json", json.as_bytes())?;
    for (trial, model, snr, msg) in &table.failures {
        eprintln!("trial {trial} {model} @ {} dB failed: {msg}", snr_tag(*snr));
    }
    eprintln!("wrote {} ({} rows, {} failed fits)", out.display(), table.rows.len(), table.failures.len());
    if table.degraded {
        eprintln!("degraded: failure rate above {}", table.failure_ceiling);
    }
    Ok(table.degraded)
}

fn report(input: &Path, c: &Common) -> Result<(), Failure> {
    let cfg = build_config(c)?;
    let results = fs::File::open(input.join("results.csv")).map_err(|e| config_err(format!("{}: {e}", input.display())))?;
    let samples = fs::File::open(input.join("nse_samples.csv")).ok();
    let table = read_csv(results, samples, cfg.failure_ceiling).map_err(anyhow::Error::from)?;
    let out = c.out.clone().unwrap_or_else(|| input.join("figures"));
    for (name, text) in figure_csvs(&table).map_err(anyhow::Error::from)? {
        write_file(&out, &name, text.as_bytes())?;
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Failure> {
    let common = match &cli.command {
        Command::Simulate(c) | Command::Fit(c) | Command::Bound(c) | Command::Experiment(c) => c,
        Command::Report { common, .. } => common,
    };
    let threads = common.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Failure::Run(e.into()))?;
    pool.install(|| match &cli.command {
        Command::Simulate(c) => simulate(c).map(|_| false),
        Command::Fit(c) => fit_cmd(c).map(|_| false),
        Command::Bound(c) => bound_cmd(c).map(|_| false),
        Command::Experiment(c) => experiment(c),
        Command::Report { input, common } => report(input, common).map(|_| false),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(3),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
