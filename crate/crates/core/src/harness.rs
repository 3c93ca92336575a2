//! Monte Carlo evaluation: prediction-error metrics, path matching for
//! parameter RMSE, the experiment runner and its CSV/JSON serialization.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{add_noise, channel_response, sample_grid, scenario_one_paths, scenario_two_paths, ChannelConfig, NormalizedPath, PathSet};
use crate::crb::{build_fim, horizon_bound, horizon_index, Param};
use crate::esprit::{DimName, StructuralEstimate};
use crate::linfix::{angular_distance, from_db, parse_key_values, parse_list, parse_value, to_db, ConfigError, SeededStream};
use crate::numkernel::ComplexMatrix;
use crate::predictor::{fit, predict, FitOptions, PredictionRequest};
use crate::stacking::ModelKind;

pub const DEFAULT_FAILURE_CEILING: f64 = 0.05;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed result file: {0}")]
    Parse(String),
}

// ---------------------------------------------------------------------------
// Metrics

/// Per-sample squared error normalized by the mean channel energy `mean_energy`.
pub fn nse(pred: &[ComplexMatrix], truth: &[ComplexMatrix], mean_energy: f64) -> Result<Vec<f64>, HarnessError> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(a, b)| a.shape() != b.shape()) {
        return Err(HarnessError::Shape(format!("{} predicted vs {} true samples", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).norm_squared() / mean_energy).collect())
}

/// Mean of `||H||_F^2` over a set of samples.
pub fn mean_energy(samples: &[ComplexMatrix]) -> f64 {
    samples.iter().map(|s| s.norm_squared()).sum::<f64>() / samples.len() as f64
}

/// Mean of per-trial NSE values (linear).
pub fn nmse(per_trial: &[f64]) -> f64 {
    per_trial.iter().sum::<f64>() / per_trial.len() as f64
}

pub fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// RMSE of angular estimates against a fixed truth, using wrapped differences.
pub fn rmse_angle(estimates: &[f64], truth: f64) -> f64 {
    let errs: Vec<f64> = estimates.iter().map(|e| angular_distance(*e, truth)).collect();
    rmse(&errs)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Empirical CDF as `(x, F(x))` steps, starting at `(min, 0)` and ending at `(max, 1)`.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out = Vec::with_capacity(v.len() + 1);
    if let Some(first) = v.first() {
        out.push((*first, 0.0));
    }
    out.extend(v.iter().enumerate().map(|(i, x)| (*x, (i + 1) as f64 / n)));
    out
}

// ---------------------------------------------------------------------------
// Assignment

/// Minimum-cost assignment of rows to columns (`rows <= cols`), returning
/// the column of each row. Hungarian algorithm with potentials, `O(n^2 m)`.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows than columns");
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Optimal bijection between true and estimated parameter tuples under the
/// sum of squared wrapped angular distances. Entry `i` is the estimate
/// matched to true path `i`, or `None` when the counts differ and it is left over.
pub fn match_paths(truth: &[Vec<f64>], est: &[Vec<f64>]) -> Vec<Option<usize>> {
    let cost = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| angular_distance(*x, *y).powi(2)).sum::<f64>();
    if truth.len() <= est.len() {
        let c: Vec<Vec<f64>> = truth.iter().map(|t| est.iter().map(|e| cost(t, e)).collect()).collect();
        hungarian(&c).into_iter().map(Some).collect()
    } else {
        let c: Vec<Vec<f64>> = est.iter().map(|e| truth.iter().map(|t| cost(t, e)).collect()).collect();
        let mut out = vec![None; truth.len()];
        for (e, t) in hungarian(&c).into_iter().enumerate() {
            out[t] = Some(e);
        }
        out
    }
}

/// Structural dimensions estimated by each model.
pub fn model_dims(model: ModelKind) -> &'static [DimName] {
    match model {
        ModelKind::DodDoa => &[DimName::Rx, DimName::Tx, DimName::Time, DimName::Freq],
        ModelKind::Tss => &[DimName::Rx, DimName::Time, DimName::Freq],
        ModelKind::Mss => &[DimName::Time, DimName::Freq],
    }
}

fn truth_value(p: &NormalizedPath, d: DimName) -> f64 {
    match d {
        DimName::Rx => p.mu_r,
        DimName::Tx => p.mu_t,
        DimName::Time => p.gamma,
        DimName::Freq => p.eta,
    }
}

/// Matches an estimate to ground truth over the given dimensions.
pub fn match_structural(truth: &[NormalizedPath], est: &StructuralEstimate, dims: &[DimName]) -> Vec<Option<usize>> {
    let t: Vec<Vec<f64>> = truth.iter().map(|p| dims.iter().map(|d| truth_value(p, *d)).collect()).collect();
    let e: Vec<Vec<f64>> = (0..est.len()).map(|z| dims.iter().map(|d| est.get(*d, z).unwrap_or(0.0)).collect()).collect();
    match_paths(&t, &e)
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    One,
    Two,
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "one" | "i" => Ok(Scenario::One),
            "2" | "two" | "ii" => Ok(Scenario::Two),
            other => Err(format!("unknown scenario `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub models: Vec<ModelKind>,
    pub snr_db_grid: Vec<f64>,
    pub horizons_lambda: Vec<f64>,
    pub n_trials: usize,
    pub channel: ChannelConfig,
    /// Time/frequency window widths; `None` selects `ceil(Q/2)` / `ceil(K/2)`.
    pub r: Option<usize>,
    pub t: Option<usize>,
    pub sigma_reg: f64,
    pub rng_seed: u64,
    pub z_override: Option<usize>,
    /// Number of rays drawn per realization in scenario II.
    pub n_paths: usize,
    pub failure_ceiling: f64,
    /// Whether to evaluate CRB and prediction-bound rows.
    pub bounds: bool,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self {
                scenario: Scenario::One,
                models: ModelKind::ALL.to_vec(),
                snr_db_grid: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
                horizons_lambda: vec![0.5, 1.0, 2.0],
                n_trials: 100,
                channel: ChannelConfig::desk(),
                r: None,
                t: None,
                sigma_reg: crate::amplitude::DEFAULT_SIGMA_REG,
                rng_seed: 1,
                z_override: None,
                n_paths: 6,
                failure_ceiling: DEFAULT_FAILURE_CEILING,
                bounds: true,
            },
            Profile::Paper => Self {
                n_trials: 500,
                channel: ChannelConfig::default(),
                r: Some(10),
                t: Some(8),
                ..Self::profile(Profile::Desk)
            },
        }
    }

    pub fn true_path_count(&self) -> usize {
        match self.scenario {
            Scenario::One => 6,
            Scenario::Two => self.n_paths,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions { r: self.r, t: self.t, sigma_reg: self.sigma_reg, z_override: self.z_override, ..FitOptions::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.models.is_empty() {
            return invalid("models must be non-empty");
        }
        if self.snr_db_grid.is_empty() || self.horizons_lambda.is_empty() {
            return invalid("snr_db_grid and horizons_lambda must be non-empty");
        }
        if self.n_trials == 0 {
            return invalid("n_trials must be >= 1");
        }
        if self.snr_db_grid.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return invalid("snr values must be finite or +inf");
        }
        if self.horizons_lambda.iter().any(|h| !h.is_finite()) {
            return invalid("horizons must be finite");
        }
        if !(0.0..=1.0).contains(&self.failure_ceiling) {
            return invalid("failure_ceiling must lie in [0, 1]");
        }
        if !(self.sigma_reg >= 0.0 && self.sigma_reg.is_finite()) {
            return invalid("sigma_reg must be finite and >= 0");
        }
        if self.scenario == Scenario::Two && !(1..=crate::channel::UMA_DELAYS_NS.len()).contains(&self.n_paths) {
            return invalid("n_paths must lie in 1..=6 for scenario two");
        }
        if self.z_override == Some(0) {
            return invalid("z_override must be >= 1");
        }
        self.channel.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let (q, k) = (self.channel.n_time, self.channel.n_freq);
        if self.r.is_some_and(|r| r == 0 || r > q) || self.t.is_some_and(|t| t == 0 || t > k) {
            return invalid("window widths must satisfy 1 <= R <= Q and 1 <= T <= K");
        }
        Ok(())
    }

    /// Overrides fields from `key = value` text; channel keys are accepted too.
    pub fn apply_config_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let kv = parse_key_values(text)?;
        if let Some(p) = kv.get("profile") {
            let profile: Profile = p.parse().map_err(|_| ConfigError::BadValue { key: "profile".into(), value: p.clone() })?;
            *self = Self::profile(profile);
        }
        for (key, value) in &kv {
            self.apply_key(key, value)?;
        }
        self.validate()
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue { key: key.to_string(), value: value.to_string() };
        let optional = |v: &str| -> Result<Option<usize>, ConfigError> {
            match v.trim() {
                "" | "none" | "auto" => Ok(None),
                s => parse_value(key, s).map(Some),
            }
        };
        match key {
            "profile" => {}
            "scenario" => self.scenario = value.parse().map_err(|_| bad())?,
            "models" => self.models = parse_models(value).map_err(|_| bad())?,
            "snr_db_grid" => self.snr_db_grid = parse_list(key, value)?,
            "horizons_lambda" => self.horizons_lambda = parse_list(key, value)?,
            "n_trials" => self.n_trials = parse_value(key, value)?,
            "r" => self.r = optional(value)?,
            "t" => self.t = optional(value)?,
            "sigma_reg" => self.sigma_reg = parse_value(key, value)?,
            "rng_seed" => self.rng_seed = parse_value(key, value)?,
            "z_override" => self.z_override = optional(value)?,
            "n_paths" => self.n_paths = parse_value(key, value)?,
            "failure_ceiling" => self.failure_ceiling = parse_value(key, value)?,
            "bounds" => self.bounds = parse_value(key, value)?,
            _ => {
                if !self.channel.apply_key(key, value)? {
                    return Err(ConfigError::UnknownKey(key.to_string()));
                }
            }
        }
        Ok(())
    }
}

/// Parses `doddoa,tssm,mssm` or `all`.
pub fn parse_models(text: &str) -> Result<Vec<ModelKind>, String> {
    let mut out = Vec::new();
    for part in text.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()) {
        if part.eq_ignore_ascii_case("all") {
            out.extend(ModelKind::ALL);
        } else {
            out.push(part.parse::<ModelKind>().map_err(|_| format!("unknown model `{part}`"))?);
        }
    }
    out.dedup();
    if out.is_empty() {
        return Err("no models given".into());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Results

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    MuR,
    MuT,
    Gamma,
    Eta,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::MuR, Family::MuT, Family::Gamma, Family::Eta];

    fn name(self) -> &'static str {
        match self {
            Family::MuR => "mu_r",
            Family::MuT => "mu_t",
            Family::Gamma => "gamma",
            Family::Eta => "eta",
        }
    }

    fn dim(self) -> DimName {
        match self {
            Family::MuR => DimName::Rx,
            Family::MuT => DimName::Tx,
            Family::Gamma => DimName::Time,
            Family::Eta => DimName::Freq,
        }
    }

    fn param(self, z: usize) -> Param {
        match self {
            Family::MuR => Param::MuR(z),
            Family::MuT => Param::MuT(z),
            Family::Gamma => Param::Gamma(z),
            Family::Eta => Param::Eta(z),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    /// Mean NSE over trials (linear; serialized in dB).
    Nmse,
    /// Median per-trial NSE (linear; serialized in dB).
    NseMedian,
    /// Normalized trace of the prediction bound (linear; serialized in dB).
    PredictionBound,
    Rmse(Family),
    SqrtCrb(Family),
    FailureRate,
    /// Fraction of fits whose order equals the true path count.
    OrderMatchRate,
    MeanOrder,
}

impl Metric {
    pub fn is_power(self) -> bool {
        matches!(self, Metric::Nmse | Metric::NseMedian | Metric::PredictionBound)
    }

    pub fn name(self) -> String {
        match self {
            Metric::Nmse => "nmse_db".into(),
            Metric::NseMedian => "nse_median_db".into(),
            Metric::PredictionBound => "prediction_bound_db".into(),
            Metric::Rmse(f) => format!("rmse_{}", f.name()),
            Metric::SqrtCrb(f) => format!("sqrt_crb_{}", f.name()),
            Metric::FailureRate => "failure_rate".into(),
            Metric::OrderMatchRate => "order_match_rate".into(),
            Metric::MeanOrder => "mean_order".into(),
        }
    }

    pub fn from_name(name: &str) -> Option<Metric> {
        let fixed = [
            Metric::Nmse,
            Metric::NseMedian,
            Metric::PredictionBound,
            Metric::FailureRate,
            Metric::OrderMatchRate,
            Metric::MeanOrder,
        ];
        fixed
            .into_iter()
            .chain(Family::ALL.into_iter().flat_map(|f| [Metric::Rmse(f), Metric::SqrtCrb(f)]))
            .find(|m| m.name() == name)
    }

    /// Value as written to disk.
    pub fn serialized_value(self, linear: f64) -> f64 {
        if self.is_power() {
            to_db(linear)
        } else {
            linear
        }
    }

    pub fn linear_value(self, serialized: f64) -> f64 {
        if self.is_power() {
            from_db(serialized)
        } else {
            serialized
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Model label used for rows that do not belong to an estimator.
pub const BOUND_LABEL: &str = "crb";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub snr_db: f64,
    pub horizon_lambda: Option<f64>,
    pub metric: Metric,
    /// Linear value.
    pub value: f64,
    pub n_trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NseSample {
    pub trial: usize,
    pub model: ModelKind,
    pub snr_db: f64,
    pub horizon_lambda: f64,
    pub nse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub nse_samples: Vec<NseSample>,
    /// Some (model, SNR) cell lost more trials than the failure ceiling allows.
    pub degraded: bool,
    pub failure_ceiling: f64,
    /// Stage-labelled messages of failed fits, `(trial, model, snr, message)`.
    pub failures: Vec<(usize, ModelKind, f64, String)>,
}

impl ResultTable {
    pub fn get(&self, model: &str, snr_db: f64, horizon: Option<f64>, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.snr_db == snr_db && r.horizon_lambda == horizon && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn nse_for(&self, model: ModelKind, snr_db: f64, horizon: f64) -> Vec<f64> {
        self.nse_samples
            .iter()
            .filter(|s| s.model == model && s.snr_db == snr_db && s.horizon_lambda == horizon)
            .map(|s| s.nse)
            .collect()
    }
}

/// Fixed 17-significant-digit rendering; non-finite values as `inf`, `-inf`, `nan`.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub const CSV_HEADER: [&str; 7] = ["model", "snr_db", "horizon_lambda", "metric", "value", "n_trials", "seed"];

pub fn write_csv<W: Write>(table: &ResultTable, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.model.clone(),
            format_float(r.snr_db),
            r.horizon_lambda.map(format_float).unwrap_or_default(),
            r.metric.name(),
            format_float(r.metric.serialized_value(r.value)),
            r.n_trials.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_nse_samples_csv<W: Write>(table: &ResultTable, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial", "model", "snr_db", "horizon_lambda", "nse"])?;
    for s in &table.nse_samples {
        w.write_record([s.trial.to_string(), s.model.to_string(), format_float(s.snr_db), format_float(s.horizon_lambda), format_float(s.nse)])?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: FromStr>(record: &csv::StringRecord, i: usize, what: &str) -> Result<T, HarnessError> {
    record
        .get(i)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| HarnessError::Parse(format!("bad {what} in line {:?}", record.position().map(|p| p.line()))))
}

/// Reads a table written by [`write_csv`] (and optionally its NSE samples).
/// Failure messages are not part of the CSV, so `failures` comes back empty.
pub fn read_csv<R: std::io::Read>(results: R, nse_samples: Option<R>, failure_ceiling: f64) -> Result<ResultTable, HarnessError> {
    let mut rows = Vec::new();
    let mut rdr = csv::Reader::from_reader(results);
    if rdr.headers()?.iter().ne(CSV_HEADER) {
        return Err(HarnessError::Parse("unexpected header".into()));
    }
    for rec in rdr.records() {
        let rec = rec?;
        let name: String = field(&rec, 3, "metric")?;
        let metric = Metric::from_name(&name).ok_or_else(|| HarnessError::Parse(format!("unknown metric `{name}`")))?;
        let horizon = match rec.get(2).map(str::trim) {
            Some("") | None => None,
            Some(_) => Some(field(&rec, 2, "horizon")?),
        };
        rows.push(ResultRow {
            model: field(&rec, 0, "model")?,
            snr_db: field(&rec, 1, "snr")?,
            horizon_lambda: horizon,
            metric,
            value: metric.linear_value(field(&rec, 4, "value")?),
            n_trials: field(&rec, 5, "n_trials")?,
            seed: field(&rec, 6, "seed")?,
        });
    }
    let mut samples = Vec::new();
    if let Some(src) = nse_samples {
        for rec in csv::Reader::from_reader(src).records() {
            let rec = rec?;
            samples.push(NseSample {
                trial: field(&rec, 0, "trial")?,
                model: field(&rec, 1, "model")?,
                snr_db: field(&rec, 2, "snr")?,
                horizon_lambda: field(&rec, 3, "horizon")?,
                nse: field(&rec, 4, "nse")?,
            });
        }
    }
    let degraded = rows
        .iter()
        .any(|r| r.metric == Metric::FailureRate && r.value > failure_ceiling);
    Ok(ResultTable { rows, nse_samples: samples, degraded, failure_ceiling, failures: Vec::new() })
}

/// Empirical CDF of the per-trial NSE (in dB) for every (model, SNR, horizon).
pub fn write_cdf_csv<W: Write>(table: &ResultTable, out: W) -> Result<(), HarnessError> {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for s in &table.nse_samples {
        groups
            .entry((s.model.to_string(), format_float(s.snr_db), format_float(s.horizon_lambda)))
            .or_default()
            .push(to_db(s.nse));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "snr_db", "horizon_lambda", "nse_db", "cdf"])?;
    for ((model, snr, h), values) in groups {
        for (x, p) in empirical_cdf(&values) {
            w.write_record([model.clone(), snr.clone(), h.clone(), format_float(x), format_float(p)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Single JSON document with serialized (dB where applicable) values.
pub fn to_json(table: &ResultTable) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = table
        .rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "model": r.model,
                "snr_db": r.snr_db,
                "horizon_lambda": r.horizon_lambda,
                "metric": r.metric.name(),
                "value": format_float(r.metric.serialized_value(r.value)),
                "n_trials": r.n_trials,
                "seed": r.seed,
            })
        })
        .collect();
    serde_json::json!({
        "degraded": table.degraded,
        "failure_ceiling": table.failure_ceiling,
        "n_failures": table.failures.len(),
        "rows": rows,
    })
}

/// Splits a result table into plot-ready CSV documents, one per figure family.
pub fn figure_csvs(table: &ResultTable) -> Result<Vec<(String, String)>, HarnessError> {
    let mut out = Vec::new();
    type Keep = fn(Metric) -> bool;
    let groups: [(&str, Keep); 4] = [
        ("nmse_vs_snr.csv", |m| matches!(m, Metric::Nmse | Metric::NseMedian | Metric::PredictionBound)),
        ("rmse_vs_snr.csv", |m| matches!(m, Metric::Rmse(_) | Metric::SqrtCrb(_))),
        ("order_selection.csv", |m| matches!(m, Metric::OrderMatchRate | Metric::MeanOrder)),
        ("failures.csv", |m| matches!(m, Metric::FailureRate)),
    ];
    for (name, keep) in groups {
        let sub = ResultTable { rows: table.rows.iter().filter(|r| keep(r.metric)).cloned().collect(), ..table.clone() };
        let mut buf = Vec::new();
        write_csv(&sub, &mut buf)?;
        out.push((name.to_string(), String::from_utf8(buf).expect("csv is utf-8")));
    }
    let mut buf = Vec::new();
    write_cdf_csv(table, &mut buf)?;
    out.push(("nse_cdf.csv".to_string(), String::from_utf8(buf).expect("csv is utf-8")));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Runner

#[derive(Debug, Clone, Default)]
struct ModelTrial {
    /// Per-horizon NSE, averaged over subcarriers.
    nse: Vec<f64>,
    /// Squared matched errors per family.
    sq_err: BTreeMap<Family, (f64, usize)>,
    z_hat: usize,
}

/// Per-family mean CRB over paths, and per-horizon prediction bound.
type TrialBounds = (BTreeMap<Family, f64>, Vec<f64>);

#[derive(Debug, Clone)]
struct TrialOutcome {
    /// Indexed `[snr][model]`.
    fits: Vec<Vec<Result<ModelTrial, String>>>,
    /// Indexed by SNR; `None` when no bound applies (noiseless or disabled).
    bounds: Vec<Option<TrialBounds>>,
}

fn draw_paths(cfg: &ExperimentConfig, stream: SeededStream) -> Result<PathSet, String> {
    match cfg.scenario {
        Scenario::One => Ok(scenario_one_paths()),
        Scenario::Two => {
            let seed: u64 = stream.child(0).rng().random();
            scenario_two_paths(cfg.n_paths, &cfg.channel, seed).map_err(|e| e.to_string())
        }
    }
}

fn run_trial(cfg: &ExperimentConfig, trial: usize) -> TrialOutcome {
    let stream = SeededStream::new(cfg.rng_seed, trial as u64);
    let ch = &cfg.channel;
    let paths = match draw_paths(cfg, stream) {
        Ok(p) => p,
        Err(e) => {
            let fits = cfg.snr_db_grid.iter().map(|_| cfg.models.iter().map(|_| Err(e.clone())).collect()).collect();
            return TrialOutcome { fits, bounds: vec![None; cfg.snr_db_grid.len()] };
        }
    };
    let truth = paths.normalized(ch);
    let clean = sample_grid(&paths, ch);
    let energy = mean_energy(clean.samples());
    let horizon_q: Vec<i64> = cfg.horizons_lambda.iter().map(|h| horizon_index(ch, *h)).collect();
    let truth_at: Vec<Vec<ComplexMatrix>> = horizon_q
        .iter()
        .map(|&q| (0..ch.n_freq as i64).map(|k| channel_response(&paths, ch, q, k)).collect())
        .collect();
    let opts = cfg.fit_options();

    let mut fits = Vec::with_capacity(cfg.snr_db_grid.len());
    let mut bounds = Vec::with_capacity(cfg.snr_db_grid.len());
    for (si, &snr) in cfg.snr_db_grid.iter().enumerate() {
        let noise_seed: u64 = stream.child(1 + si as u64).rng().random();
        let noisy = match add_noise(&clean, snr, noise_seed) {
            Ok(t) => t,
            Err(e) => {
                fits.push(cfg.models.iter().map(|_| Err(e.to_string())).collect());
                bounds.push(None);
                continue;
            }
        };
        let per_model = cfg
            .models
            .iter()
            .map(|&model| {
                let est = fit(&noisy, model, &opts).map_err(|e| e.to_string())?;
                let mut nse_h = Vec::with_capacity(horizon_q.len());
                for (hi, &q) in horizon_q.iter().enumerate() {
                    let pred = predict(&est, &PredictionRequest::at_time(q, ch.n_freq), ch);
                    let per_k = nse(&pred.samples, &truth_at[hi], energy).map_err(|e| e.to_string())?;
                    nse_h.push(nmse(&per_k));
                }
                let dims = model_dims(model);
                let assignment = match_structural(&truth, &est.structural, dims);
                let mut sq_err = BTreeMap::new();
                for fam in Family::ALL.iter().filter(|f| dims.contains(&f.dim())) {
                    let mut acc = (0.0, 0);
                    for (ti, a) in assignment.iter().enumerate() {
                        if let Some(v) = a.and_then(|ei| est.structural.get(fam.dim(), ei)) {
                            acc.0 += angular_distance(v, truth_value(&truth[ti], fam.dim())).powi(2);
                            acc.1 += 1;
                        }
                    }
                    sq_err.insert(*fam, acc);
                }
                Ok(ModelTrial { nse: nse_h, sq_err, z_hat: est.z_hat })
            })
            .collect();
        fits.push(per_model);

        let bound = if cfg.bounds && noisy.noise_var > 0.0 {
            build_fim(&paths, ch, noisy.noise_var).ok().map(|report| {
                let fam_crb = Family::ALL
                    .iter()
                    .map(|f| {
                        let mean = (0..paths.len()).map(|z| report.crb(f.param(z))).sum::<f64>() / paths.len() as f64;
                        (*f, mean)
                    })
                    .collect();
                let pred = cfg.horizons_lambda.iter().map(|h| horizon_bound(&report, &paths, ch, *h)).collect();
                (fam_crb, pred)
            })
        } else {
            None
        };
        bounds.push(bound);
    }
    TrialOutcome { fits, bounds }
}

/// Runs the full Monte Carlo protocol on the current rayon pool. Trials are
/// independent; their results are reduced in trial order, so the output does
/// not depend on the number of worker threads.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable, HarnessError> {
    cfg.validate()?;
    let outcomes: Vec<TrialOutcome> = (0..cfg.n_trials).into_par_iter().map(|i| run_trial(cfg, i)).collect();
    Ok(reduce(cfg, &outcomes))
}

fn reduce(cfg: &ExperimentConfig, outcomes: &[TrialOutcome]) -> ResultTable {
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let mut degraded = false;
    let true_z = cfg.true_path_count();
    let row = |model: &str, snr: f64, h: Option<f64>, metric: Metric, value: f64, n: usize| ResultRow {
        model: model.to_string(),
        snr_db: snr,
        horizon_lambda: h,
        metric,
        value,
        n_trials: n,
        seed: cfg.rng_seed,
    };

    for (si, &snr) in cfg.snr_db_grid.iter().enumerate() {
        for (mi, &model) in cfg.models.iter().enumerate() {
            let mut ok: Vec<(usize, &ModelTrial)> = Vec::new();
            for (trial, o) in outcomes.iter().enumerate() {
                match &o.fits[si][mi] {
                    Ok(t) => ok.push((trial, t)),
                    Err(e) => failures.push((trial, model, snr, e.clone())),
                }
            }
            let n_ok = ok.len();
            let failure_rate = (cfg.n_trials - n_ok) as f64 / cfg.n_trials as f64;
            degraded |= failure_rate > cfg.failure_ceiling;
            let name = model.name();
            for (hi, &h) in cfg.horizons_lambda.iter().enumerate() {
                let values: Vec<f64> = ok.iter().map(|(_, t)| t.nse[hi]).collect();
                for (trial, t) in &ok {
                    samples.push(NseSample { trial: *trial, model, snr_db: snr, horizon_lambda: h, nse: t.nse[hi] });
                }
                if !values.is_empty() {
                    rows.push(row(name, snr, Some(h), Metric::Nmse, nmse(&values), n_ok));
                    rows.push(row(name, snr, Some(h), Metric::NseMedian, median(&values), n_ok));
                }
            }
            for fam in Family::ALL.iter().filter(|f| model_dims(model).contains(&f.dim())) {
                let (sum, count) = ok.iter().fold((0.0, 0usize), |acc, (_, t)| {
                    let (s, c) = t.sq_err.get(fam).copied().unwrap_or((0.0, 0));
                    (acc.0 + s, acc.1 + c)
                });
                if count > 0 {
                    rows.push(row(name, snr, None, Metric::Rmse(*fam), (sum / count as f64).sqrt(), n_ok));
                }
            }
            if n_ok > 0 {
                let matches = ok.iter().filter(|(_, t)| t.z_hat == true_z).count();
                rows.push(row(name, snr, None, Metric::OrderMatchRate, matches as f64 / n_ok as f64, n_ok));
                let mean_z = ok.iter().map(|(_, t)| t.z_hat as f64).sum::<f64>() / n_ok as f64;
                rows.push(row(name, snr, None, Metric::MeanOrder, mean_z, n_ok));
            }
            rows.push(row(name, snr, None, Metric::FailureRate, failure_rate, cfg.n_trials));
        }

        let bounds: Vec<&(BTreeMap<Family, f64>, Vec<f64>)> = outcomes.iter().filter_map(|o| o.bounds[si].as_ref()).collect();
        if !bounds.is_empty() {
            let n = bounds.len();
            for fam in Family::ALL {
                let mean = bounds.iter().map(|b| b.0[&fam]).sum::<f64>() / n as f64;
                rows.push(row(BOUND_LABEL, snr, None, Metric::SqrtCrb(fam), mean.sqrt(), n));
            }
            for (hi, &h) in cfg.horizons_lambda.iter().enumerate() {
                let mean = bounds.iter().map(|b| b.1[hi]).sum::<f64>() / n as f64;
                rows.push(row(BOUND_LABEL, snr, Some(h), Metric::PredictionBound, mean, n));
            }
        }
    }
    ResultTable { rows, nse_samples: samples, degraded, failure_ceiling: cfg.failure_ceiling, failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::C64;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn m(v: &[f64]) -> ComplexMatrix {
        ComplexMatrix::from_fn(2, 2, |i, j| C64::new(v[2 * i + j], -v[(2 * i + j + 1) % 4]))
    }

    #[test]
    fn nse_examples() {
        let truth = vec![m(&[1.0, 2.0, 0.5, -1.0]), m(&[0.3, 0.1, 0.0, 2.0])];
        let e = mean_energy(&truth);
        assert_eq!(nse(&truth, &truth, e).unwrap(), vec![0.0, 0.0]);
        let zeros = vec![ComplexMatrix::zeros(2, 2); 2];
        let v = nse(&zeros, &truth, e).unwrap();
        assert!((nmse(&v) - 1.0).abs() < 1e-15);
        let pred = vec![m(&[0.9, 2.1, 0.4, -1.2]), m(&[0.0, 0.0, 0.0, 0.0])];
        let direct = (&pred[0] - &truth[0]).norm_squared() / e;
        assert!((nse(&pred, &truth, e).unwrap()[0] - direct).abs() < 1e-15);
        assert!(nse(&pred[..1], &truth, e).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[0.0, 0.0]), 0.0);
        assert!((rmse_angle(&[1.1, 0.9, 1.1, 0.9], 1.0) - 0.1).abs() < 1e-12);
        assert!((rmse_angle(&[std::f64::consts::PI - 0.05, -std::f64::consts::PI + 0.05], std::f64::consts::PI) - 0.05).abs() < 1e-12);
        let errs = [0.3, -0.1, 0.25];
        let direct = ((0.09 + 0.01 + 0.0625) / 3.0f64).sqrt();
        assert!((rmse(&errs) - direct).abs() < 1e-15);
    }

    #[test]
    fn matching_examples() {
        let truth = vec![vec![0.1, 0.2], vec![1.0, -1.0], vec![-2.0, 0.5]];
        let est = vec![truth[2].clone(), truth[0].clone(), truth[1].clone()];
        assert_eq!(match_paths(&truth, &est), vec![Some(1), Some(2), Some(0)]);
        assert_eq!(match_paths(&truth[..1], &est[1..2]), vec![Some(0)]);
        let perturbed: Vec<Vec<f64>> = est.iter().map(|v| v.iter().map(|x| x + 0.2).collect()).collect();
        assert_eq!(match_paths(&truth, &perturbed), vec![Some(1), Some(2), Some(0)]);
        // Unequal counts leave the worst-fitting true path unmatched.
        assert_eq!(match_paths(&truth, &est[..2]), vec![Some(1), None, Some(0)]);
        assert_eq!(match_paths(&truth[..2], &est), vec![Some(1), Some(2)]);
    }

    #[test]
    fn matching_across_wrap() {
        let pi = std::f64::consts::PI;
        let truth = vec![vec![pi - 0.01], vec![0.0]];
        let est = vec![vec![0.02], vec![-pi + 0.01]];
        assert_eq!(match_paths(&truth, &est), vec![Some(1), Some(0)]);
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(costs in proptest::collection::vec(0.0f64..10.0, 16)) {
            let c: Vec<Vec<f64>> = costs.chunks(4).map(|r| r.to_vec()).collect();
            let a = hungarian(&c);
            let total: f64 = a.iter().enumerate().map(|(i, j)| c[i][*j]).sum();
            let mut best = f64::INFINITY;
            let mut perm = [0usize, 1, 2, 3];
            permute(&mut perm, 0, &mut |p| {
                best = best.min(p.iter().enumerate().map(|(i, j)| c[i][*j]).sum());
            });
            prop_assert!((total - best).abs() < 1e-9);
            prop_assert_eq!(a.iter().collect::<HashSet<_>>().len(), 4);
        }

        #[test]
        fn cdf_is_monotone_step(values in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let cdf = empirical_cdf(&values);
            prop_assert_eq!(cdf.first().unwrap().1, 0.0);
            prop_assert_eq!(cdf.last().unwrap().1, 1.0);
            for w in cdf.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }
    }

    fn permute(p: &mut [usize; 4], k: usize, f: &mut impl FnMut(&[usize; 4])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn median_and_format() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(format_float(0.1), "1.0000000000000001e-1");
        assert_eq!(format_float(f64::INFINITY), "inf");
        let x = 1.0 / 3.0;
        assert_eq!(format_float(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn config_text_and_validation() {
        let mut cfg = ExperimentConfig::profile(Profile::Desk);
        cfg.apply_config_text("scenario = 2\nmodels = doddoa, mssm\nsnr_db_grid = 5 15\nn_trials = 7\nn_time = 24\nz_override = 4\nn_paths = 4\n")
            .unwrap();
        assert_eq!(cfg.scenario, Scenario::Two);
        assert_eq!(cfg.models, vec![ModelKind::DodDoa, ModelKind::Mss]);
        assert_eq!(cfg.snr_db_grid, vec![5.0, 15.0]);
        assert_eq!(cfg.channel.n_time, 24);
        assert_eq!(cfg.z_override, Some(4));
        let mut bad = ExperimentConfig::profile(Profile::Desk);
        assert!(matches!(bad.apply_config_text("frobnicate = 1"), Err(ConfigError::UnknownKey(_))));
        let mut bad = ExperimentConfig::profile(Profile::Desk);
        assert!(matches!(bad.apply_config_text("n_trials = 0"), Err(ConfigError::Invalid(_))));
        let mut full = ExperimentConfig::profile(Profile::Desk);
        full.apply_config_text("profile = paper").unwrap();
        assert_eq!((full.channel.n_time, full.r, full.n_trials), (50, Some(10), 500));
    }

    fn tiny(scenario: Scenario) -> ExperimentConfig {
        ExperimentConfig {
            scenario,
            snr_db_grid: vec![f64::INFINITY, 20.0],
            horizons_lambda: vec![0.0, 1.0],
            n_trials: 3,
            channel: ChannelConfig { n_time: 20, n_freq: 16, ..ChannelConfig::default() },
            r: Some(10),
            t: Some(8),
            z_override: Some(if scenario == Scenario::One { 6 } else { 3 }),
            n_paths: 3,
            ..ExperimentConfig::profile(Profile::Desk)
        }
    }

    #[test]
    fn clean_run_is_exact_and_keys_unique() {
        let cfg = ExperimentConfig { sigma_reg: 0.0, ..tiny(Scenario::One) };
        let table = run_experiment(&cfg).unwrap();
        assert!(!table.degraded);
        for h in [0.0, 1.0] {
            let v = table.get("doddoa", f64::INFINITY, Some(h), Metric::Nmse).unwrap();
            assert!(to_db(v) <= -100.0, "{h}: {}", to_db(v));
        }
        let mut keys = HashSet::new();
        for r in &table.rows {
            assert!(keys.insert((r.model.clone(), r.snr_db.to_bits(), r.horizon_lambda.map(f64::to_bits), r.metric)));
        }
        assert_eq!(table.get("doddoa", 20.0, None, Metric::OrderMatchRate), Some(1.0));
        assert!(table.get(BOUND_LABEL, 20.0, None, Metric::SqrtCrb(Family::Gamma)).unwrap() > 0.0);
        assert!(table.get(BOUND_LABEL, f64::INFINITY, None, Metric::SqrtCrb(Family::Gamma)).is_none());
    }

    #[test]
    fn scenario_two_runs_and_is_deterministic() {
        let cfg = tiny(Scenario::Two);
        let a = run_experiment(&cfg).unwrap();
        let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run_experiment(&cfg).unwrap());
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_csv(&a, &mut ca).unwrap();
        write_csv(&b, &mut cb).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert!(text.starts_with("model,snr_db,horizon_lambda,metric,value,n_trials,seed\n"));
        assert!(text.contains("nmse_db"));
        let json = to_json(&a);
        assert_eq!(json["rows"].as_array().unwrap().len(), a.rows.len());
    }

    #[test]
    fn failures_are_counted() {
        // An order above the resolvable limit fails every fit.
        let cfg = ExperimentConfig {
            z_override: Some(40),
            snr_db_grid: vec![20.0],
            models: vec![ModelKind::Mss],
            channel: ChannelConfig { n_time: 8, n_freq: 8, ..ChannelConfig::default() },
            r: Some(4),
            t: Some(4),
            ..tiny(Scenario::One)
        };
        let table = run_experiment(&cfg).unwrap();
        assert!(table.degraded);
        assert_eq!(table.get("mssm", 20.0, None, Metric::FailureRate), Some(1.0));
        assert_eq!(table.failures.len(), 3);
        assert!(table.failures[0].3.starts_with("stacking"));
    }

    #[test]
    fn figure_files() {
        let table = run_experiment(&ExperimentConfig { n_trials: 2, ..tiny(Scenario::One) }).unwrap();
        let files = figure_csvs(&table).unwrap();
        let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
        assert_eq!(names, ["nmse_vs_snr.csv", "rmse_vs_snr.csv", "order_selection.csv", "failures.csv", "nse_cdf.csv"]);
        assert!(files[1].1.contains("sqrt_crb_eta"));
    }

    #[test]
    fn csv_round_trip() {
        let table = run_experiment(&ExperimentConfig { n_trials: 2, ..tiny(Scenario::One) }).unwrap();
        let (mut rows, mut samples) = (Vec::new(), Vec::new());
        write_csv(&table, &mut rows).unwrap();
        write_nse_samples_csv(&table, &mut samples).unwrap();
        let back = read_csv(&rows[..], Some(&samples[..]), table.failure_ceiling).unwrap();
        assert_eq!(back.rows.len(), table.rows.len());
        assert_eq!(back.nse_samples, table.nse_samples);
        for (a, b) in back.rows.iter().zip(&table.rows) {
            assert_eq!((&a.model, a.snr_db.to_bits(), a.horizon_lambda, a.metric), (&b.model, b.snr_db.to_bits(), b.horizon_lambda, b.metric));
            assert!(a.value == b.value || (a.value - b.value).abs() <= 1e-12 * b.value.abs(), "{a:?} {b:?}");
        }
        let mut again = Vec::new();
        write_csv(&back, &mut again).unwrap();
        assert_eq!(again.len(), rows.len());
        for name in ["nmse_db", "rmse_gamma", "sqrt_crb_mu_t", "failure_rate"] {
            assert_eq!(Metric::from_name(name).unwrap().name(), name);
        }
        assert!(Metric::from_name("nope").is_none());
        assert!(read_csv(&b"a,b\n1,2\n"[..], None, 0.05).is_err());
    }
}
