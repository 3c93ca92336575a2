//! Double-directional wideband MIMO channel: physical configuration, the
//! sampling grid it implies, ray parameters, noiseless synthesis and
//! estimation-noise injection.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linfix::{from_db, parse_key_values, parse_value, ConfigError};
use crate::numkernel::{ComplexMatrix, ComplexVector, C64};

pub const SPEED_OF_LIGHT: f64 = 2.998e8;

/// WINNER II urban-macro delays used by both simulation scenarios, in ns.
pub const UMA_DELAYS_NS: [f64; 6] = [0.0, 60.0, 75.0, 145.0, 150.0, 155.0];

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid channel configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid path set: {0}")]
    InvalidPaths(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub n_rx: usize,
    pub n_tx: usize,
    pub n_time: usize,
    pub n_freq: usize,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub n_subcarriers_total: usize,
    pub velocity_mps: f64,
    pub spatial_rate_per_lambda: f64,
    pub d_rx_lambda: f64,
    pub d_tx_lambda: f64,
}

impl Default for ChannelConfig {
    /// 2x2 MIMO-OFDM at 2.1 GHz, 20 MHz, 64 pilots, 50 km/h, 50 samples at 10 per wavelength.
    fn default() -> Self {
        Self {
            n_rx: 2,
            n_tx: 2,
            n_time: 50,
            n_freq: 64,
            carrier_hz: 2.1e9,
            bandwidth_hz: 20e6,
            n_subcarriers_total: 1024,
            velocity_mps: 50.0 / 3.6,
            spatial_rate_per_lambda: 10.0,
            d_rx_lambda: 0.5,
            d_tx_lambda: 0.5,
        }
    }
}

impl ChannelConfig {
    /// The reduced grid used for quick Monte Carlo runs.
    pub fn desk() -> Self {
        Self { n_time: 30, n_freq: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let counts = [
            ("n_rx", self.n_rx),
            ("n_tx", self.n_tx),
            ("n_time", self.n_time),
            ("n_freq", self.n_freq),
            ("n_subcarriers_total", self.n_subcarriers_total),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ChannelError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.n_subcarriers_total < self.n_freq {
            return Err(ChannelError::InvalidConfig("n_subcarriers_total must be >= n_freq".into()));
        }
        let reals = [
            ("carrier_hz", self.carrier_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("velocity_mps", self.velocity_mps),
            ("spatial_rate_per_lambda", self.spatial_rate_per_lambda),
            ("d_rx_lambda", self.d_rx_lambda),
            ("d_tx_lambda", self.d_tx_lambda),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(ChannelError::InvalidConfig(format!("{name} must be finite and > 0")));
        }
        Ok(())
    }

    /// Consumes one configuration key. Returns `Ok(false)` when the key is not a
    /// channel key, so callers layering several configs can try the next one.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "n_rx" => self.n_rx = parse_value(key, value)?,
            "n_tx" => self.n_tx = parse_value(key, value)?,
            "n_time" => self.n_time = parse_value(key, value)?,
            "n_freq" => self.n_freq = parse_value(key, value)?,
            "carrier_hz" => self.carrier_hz = parse_value(key, value)?,
            "bandwidth_hz" => self.bandwidth_hz = parse_value(key, value)?,
            "n_subcarriers_total" => self.n_subcarriers_total = parse_value(key, value)?,
            "velocity_mps" => self.velocity_mps = parse_value(key, value)?,
            "spatial_rate_per_lambda" => self.spatial_rate_per_lambda = parse_value(key, value)?,
            "d_rx_lambda" => self.d_rx_lambda = parse_value(key, value)?,
            "d_tx_lambda" => self.d_tx_lambda = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a standalone channel configuration file on top of the defaults.
    pub fn from_config_text(text: &str) -> Result<Self, ChannelError> {
        let mut cfg = Self::default();
        for (key, value) in parse_key_values(text)? {
            if !cfg.apply_key(&key, &value)? {
                return Err(ConfigError::UnknownKey(key).into());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedGrid {
    pub dt_s: f64,
    pub df_hz: f64,
    pub lambda_m: f64,
}

pub fn derive_grid(config: &ChannelConfig) -> DerivedGrid {
    let lambda_m = SPEED_OF_LIGHT / config.carrier_hz;
    DerivedGrid {
        dt_s: lambda_m / (config.spatial_rate_per_lambda * config.velocity_mps),
        df_hz: config.bandwidth_hz / config.n_freq as f64,
        lambda_m,
    }
}

/// `[1, e^{j mu}, ..., e^{j (n-1) mu}]`.
pub fn steering_vector(mu_rad: f64, n_elem: usize) -> ComplexVector {
    ComplexVector::from_fn(n_elem, |i, _| {
        if i == 0 {
            C64::new(1.0, 0.0)
        } else {
            C64::from_polar(1.0, i as f64 * mu_rad)
        }
    })
}

/// One propagation ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub beta: C64,
    pub aoa_rad: f64,
    pub aod_rad: f64,
    pub delay_s: f64,
    pub doppler_rad_per_s: f64,
}

/// The four normalized structural parameters of a ray on a given grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPath {
    pub mu_r: f64,
    pub mu_t: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Path {
    pub fn normalized(&self, config: &ChannelConfig) -> NormalizedPath {
        let grid = derive_grid(config);
        NormalizedPath {
            mu_r: 2.0 * PI * config.d_rx_lambda * self.aoa_rad.sin(),
            mu_t: 2.0 * PI * config.d_tx_lambda * self.aod_rad.sin(),
            gamma: self.doppler_rad_per_s * grid.dt_s,
            eta: 2.0 * PI * grid.df_hz * self.delay_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    paths: Vec<Path>,
}

impl PathSet {
    pub fn new(paths: Vec<Path>) -> Result<Self, ChannelError> {
        if paths.is_empty() {
            return Err(ChannelError::InvalidPaths("at least one path is required".into()));
        }
        for (i, p) in paths.iter().enumerate() {
            let finite = [p.beta.re, p.beta.im, p.aoa_rad, p.aod_rad, p.delay_s, p.doppler_rad_per_s]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(ChannelError::InvalidPaths(format!("path {} has a non-finite parameter", i + 1)));
            }
            if !(-PI..PI).contains(&p.aoa_rad) || !(-PI..PI).contains(&p.aod_rad) {
                return Err(ChannelError::InvalidPaths(format!("path {} angle outside [-pi, pi)", i + 1)));
            }
            if p.delay_s < 0.0 {
                return Err(ChannelError::InvalidPaths(format!("path {} has negative delay", i + 1)));
            }
            if paths[..i].contains(p) {
                return Err(ChannelError::InvalidPaths(format!("path {} duplicates an earlier path", i + 1)));
            }
        }
        Ok(Self { paths })
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn normalized(&self, config: &ChannelConfig) -> Vec<NormalizedPath> {
        self.paths.iter().map(|p| p.normalized(config)).collect()
    }

    /// Parses one path per line: `beta_re beta_im aoa aod delay_ns doppler_rad_s`.
    pub fn from_text(text: &str) -> Result<Self, ChannelError> {
        let mut paths = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(ChannelError::InvalidPaths(format!(
                    "line {}: expected 6 fields, found {}",
                    idx + 1,
                    fields.len()
                )));
            }
            let key = format!("path line {}", idx + 1);
            let v: Vec<f64> = fields.iter().map(|f| parse_value(&key, f)).collect::<Result<_, _>>()?;
            paths.push(Path {
                beta: C64::new(v[0], v[1]),
                aoa_rad: v[2],
                aod_rad: v[3],
                delay_s: v[4] * 1e-9,
                doppler_rad_per_s: v[5],
            });
        }
        Self::new(paths)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# beta_re beta_im aoa aod delay_ns doppler_rad_s\n");
        for p in &self.paths {
            out.push_str(&format!(
                "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\n",
                p.beta.re,
                p.beta.im,
                p.aoa_rad,
                p.aod_rad,
                p.delay_s * 1e9,
                p.doppler_rad_per_s
            ));
        }
        out
    }
}

/// The six fixed rays of simulation scenario I.
pub fn scenario_one_paths() -> PathSet {
    let rows: [(f64, f64, f64, f64, f64, f64); 6] = [
        (-0.76, 0.074, 0.49, -2.90, 0.0, 185.10),
        (-0.76, 0.30, -1.89, 0.99, 60.0, -462.10),
        (-1.41, 0.14, -2.48, 2.99, 75.0, 497.31),
        (0.16, -1.15, -1.88, 1.46, 145.0, -331.90),
        (0.37, -0.82, -2.66, 2.05, 150.0, 208.61),
        (-0.33, 1.04, -0.02, -1.60, 155.0, -156.92),
    ];
    let paths = rows
        .iter()
        .map(|&(re, im, aoa, aod, tau_ns, nu)| Path {
            beta: C64::new(re, im),
            aoa_rad: aoa,
            aod_rad: aod,
            delay_s: tau_ns * 1e-9,
            doppler_rad_per_s: nu,
        })
        .collect();
    PathSet::new(paths).expect("scenario I table is valid")
}

/// Random rays for scenario II using the UMA delay list.
pub fn scenario_two_paths(z: usize, config: &ChannelConfig, rng_seed: u64) -> Result<PathSet, ChannelError> {
    scenario_two_paths_with_delays(z, &UMA_DELAYS_NS, config, rng_seed)
}

/// Random rays: `beta ~ CN(0,1)`, angles uniform on `[-pi, pi)`, delays taken in
/// order from `delays_ns`, Doppler uniform on `[-2 pi v / lambda, 2 pi v / lambda]`.
pub fn scenario_two_paths_with_delays(
    z: usize,
    delays_ns: &[f64],
    config: &ChannelConfig,
    rng_seed: u64,
) -> Result<PathSet, ChannelError> {
    if z == 0 {
        return Err(ChannelError::InvalidConfig("path count must be >= 1".into()));
    }
    if z > delays_ns.len() {
        return Err(ChannelError::InvalidConfig(format!(
            "{z} paths requested but only {} delays available",
            delays_ns.len()
        )));
    }
    let grid = derive_grid(config);
    let nu_max = 2.0 * PI * config.velocity_mps / grid.lambda_m;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let half = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    let paths = (0..z)
        .map(|i| Path {
            beta: C64::new(half.sample(&mut rng), half.sample(&mut rng)),
            aoa_rad: rng.random_range(-PI..PI),
            aod_rad: rng.random_range(-PI..PI),
            delay_s: delays_ns[i] * 1e-9,
            doppler_rad_per_s: rng.random_range(-nu_max..=nu_max),
        })
        .collect();
    PathSet::new(paths)
}

/// `H(q,k) = sum_z beta_z a_r(mu_r) a_t(mu_t)^T exp(j q gamma_z - j k eta_z)`.
pub fn channel_response(paths: &PathSet, config: &ChannelConfig, q: i64, k: i64) -> ComplexMatrix {
    let mut h = ComplexMatrix::zeros(config.n_rx, config.n_tx);
    for (p, np) in paths.paths().iter().zip(paths.normalized(config)) {
        let ar = steering_vector(np.mu_r, config.n_rx);
        let at = steering_vector(np.mu_t, config.n_tx);
        let phase = C64::from_polar(1.0, q as f64 * np.gamma - k as f64 * np.eta);
        h += (ar * at.transpose()) * (p.beta * phase);
    }
    h
}

/// Sampled channel over a `Q x K` grid; sample `(q,k)` is an `N x M` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    pub config: ChannelConfig,
    samples: Vec<ComplexMatrix>,
    pub noise_var: f64,
}

impl ChannelTensor {
    pub fn from_samples(config: ChannelConfig, samples: Vec<ComplexMatrix>, noise_var: f64) -> Result<Self, ChannelError> {
        config.validate()?;
        if samples.len() != config.n_time * config.n_freq {
            return Err(ChannelError::Contract(format!(
                "expected {} samples, got {}",
                config.n_time * config.n_freq,
                samples.len()
            )));
        }
        if samples.iter().any(|s| s.shape() != (config.n_rx, config.n_tx)) {
            return Err(ChannelError::Contract("sample shape does not match n_rx x n_tx".into()));
        }
        Ok(Self { config, samples, noise_var })
    }

    pub fn at(&self, q: usize, k: usize) -> &ComplexMatrix {
        &self.samples[q * self.config.n_freq + k]
    }

    pub fn samples(&self) -> &[ComplexMatrix] {
        &self.samples
    }

    /// Mean of `|H(q,k)[n,m]|^2` over the whole tensor.
    pub fn mean_entry_power(&self) -> f64 {
        let total: f64 = self.samples.iter().map(|s| s.norm_squared()).sum();
        total / (self.samples.len() * self.config.n_rx * self.config.n_tx) as f64
    }
}

pub fn sample_grid(paths: &PathSet, config: &ChannelConfig) -> ChannelTensor {
    let mut samples = Vec::with_capacity(config.n_time * config.n_freq);
    for q in 0..config.n_time {
        for k in 0..config.n_freq {
            samples.push(channel_response(paths, config, q as i64, k as i64));
        }
    }
    ChannelTensor { config: *config, samples, noise_var: 0.0 }
}

/// Adds circular complex Gaussian noise with `sigma^2 = P / 10^(snr/10)`, where `P`
/// is the tensor's mean entry power. `snr_db = +inf` returns the tensor unchanged.
pub fn add_noise(tensor: &ChannelTensor, snr_db: f64, rng_seed: u64) -> Result<ChannelTensor, ChannelError> {
    if tensor.noise_var != 0.0 {
        return Err(ChannelError::Contract("tensor already carries noise".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(tensor.clone());
    }
    if !snr_db.is_finite() {
        return Err(ChannelError::Contract(format!("snr_db must be finite or +inf, got {snr_db}")));
    }
    let noise_var = tensor.mean_entry_power() / from_db(snr_db);
    let normal = Normal::new(0.0, (noise_var / 2.0).sqrt()).expect("finite variance");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let samples = tensor
        .samples
        .iter()
        .map(|s| s.map(|v| v + C64::new(normal.sample(&mut rng), normal.sample(&mut rng))))
        .collect();
    Ok(ChannelTensor { config: tensor.config, samples, noise_var })
}
