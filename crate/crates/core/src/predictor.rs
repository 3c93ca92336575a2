//! End-to-end fit (stacking, subspace, ESPRIT, amplitudes) and extrapolation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amplitude::{self, AmplitudeError, AmplitudeEstimate, DEFAULT_SIGMA_REG};
use crate::channel::{steering_vector, ChannelConfig, ChannelTensor};
use crate::esprit::{invariance_matrices, pair_and_extract, EspritError, PairingOptions, StructuralEstimate};
use crate::numkernel::{ComplexMatrix, C64};
use crate::stacking::{build_stacked, ModelKind, StackError};
use crate::subspace::{signal_subspace, OrderChoice, SubspaceError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("stacking: {0}")]
    Stacking(#[from] StackError),
    #[error("subspace: {0}")]
    Subspace(#[from] SubspaceError),
    #[error("esprit: {0}")]
    Esprit(#[from] EspritError),
    #[error("amplitude: {0}")]
    Amplitude(#[from] AmplitudeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Time window width; `None` selects `ceil(Q/2)`.
    pub r: Option<usize>,
    /// Frequency window width; `None` selects `ceil(K/2)`.
    pub t: Option<usize>,
    pub sigma_reg: f64,
    pub z_override: Option<usize>,
    /// Upper end of the order search; `None` uses the default range.
    pub max_order: Option<usize>,
    pub pairing: PairingOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { r: None, t: None, sigma_reg: DEFAULT_SIGMA_REG, z_override: None, max_order: None, pairing: PairingOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub pairing_condition: f64,
    pub noise_var_hat: f64,
    pub order_overridden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEstimate {
    pub model: ModelKind,
    pub z_hat: usize,
    pub structural: StructuralEstimate,
    pub amplitudes: AmplitudeEstimate,
    pub diagnostics: Diagnostics,
}

impl ModelEstimate {
    /// Per-path `N x M` coefficient matrices multiplying `exp(j q gamma - j k eta)`.
    pub fn path_matrices(&self, n_rx: usize, n_tx: usize) -> Vec<ComplexMatrix> {
        let s = &self.structural;
        let mu = |v: &Option<Vec<f64>>, z: usize| v.as_ref().map_or(0.0, |v| v[z]);
        match &self.amplitudes {
            AmplitudeEstimate::Beta(b) => (0..self.z_hat)
                .map(|z| steering_vector(mu(&s.mu_r, z), n_rx) * steering_vector(mu(&s.mu_t, z), n_tx).transpose() * b[z])
                .collect(),
            AmplitudeEstimate::Tss(sig) => (0..self.z_hat)
                .map(|z| steering_vector(mu(&s.mu_r, z), n_rx) * sig[z].transpose())
                .collect(),
            AmplitudeEstimate::Mss(sig) => sig.clone(),
        }
    }
}

pub fn fit(tensor: &ChannelTensor, model: ModelKind, opts: &FitOptions) -> Result<ModelEstimate, FitError> {
    let cfg = &tensor.config;
    let r = opts.r.unwrap_or(cfg.n_time.div_ceil(2));
    let t = opts.t.unwrap_or(cfg.n_freq.div_ceil(2));
    let stacked = build_stacked(tensor, model, r, t)?;
    let order = match opts.z_override {
        Some(z) => OrderChoice::Fixed(z),
        None => OrderChoice::Estimate { max_order: opts.max_order, hint: None },
    };
    if let Some(z) = opts.z_override {
        stacked.shape.check_resolvable(model, cfg.n_rx, cfg.n_tx, z)?;
    }
    let sub = signal_subspace(&stacked, order)?;
    let phis = invariance_matrices(&sub.basis, &stacked.layout())?;
    let mut structural = pair_and_extract(&phis, &opts.pairing)?;
    let z = sub.z_hat;
    if matches!(model, ModelKind::DodDoa | ModelKind::Tss) && structural.mu_r.is_none() {
        structural.mu_r = Some(vec![0.0; z]);
    }
    if model == ModelKind::DodDoa && structural.mu_t.is_none() {
        structural.mu_t = Some(vec![0.0; z]);
    }
    let amplitudes = amplitude::estimate(model, tensor, &structural, opts.sigma_reg)?;
    Ok(ModelEstimate {
        model,
        z_hat: z,
        diagnostics: Diagnostics {
            pairing_condition: structural.pairing_condition,
            noise_var_hat: sub.noise_var_hat,
            order_overridden: sub.order_overridden,
        },
        structural,
        amplitudes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRequest {
    pub q_indices: Vec<i64>,
    pub k_indices: Vec<i64>,
}

impl PredictionRequest {
    pub fn grid(q_len: usize, k_len: usize) -> Self {
        Self { q_indices: (0..q_len as i64).collect(), k_indices: (0..k_len as i64).collect() }
    }

    /// All subcarriers `0..k_len` at a single time index.
    pub fn at_time(q: i64, k_len: usize) -> Self {
        Self { q_indices: vec![q], k_indices: (0..k_len as i64).collect() }
    }
}

/// Predicted channel over `q_indices x k_indices`, sample `(i, j)` at `i * len(k) + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedGrid {
    pub q_indices: Vec<i64>,
    pub k_indices: Vec<i64>,
    pub samples: Vec<ComplexMatrix>,
}

impl PredictedGrid {
    pub fn at(&self, i: usize, j: usize) -> &ComplexMatrix {
        &self.samples[i * self.k_indices.len() + j]
    }
}

pub fn predict(est: &ModelEstimate, req: &PredictionRequest, config: &ChannelConfig) -> PredictedGrid {
    let coeffs = est.path_matrices(config.n_rx, config.n_tx);
    let s = &est.structural;
    let mut samples = Vec::with_capacity(req.q_indices.len() * req.k_indices.len());
    for &q in &req.q_indices {
        for &k in &req.k_indices {
            let mut h = ComplexMatrix::zeros(config.n_rx, config.n_tx);
            for (z, c) in coeffs.iter().enumerate() {
                h += c * C64::from_polar(1.0, q as f64 * s.gamma[z] - k as f64 * s.eta[z]);
            }
            samples.push(h);
        }
    }
    PredictedGrid { q_indices: req.q_indices.clone(), k_indices: req.k_indices.clone(), samples }
}
