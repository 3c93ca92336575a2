//! Regularized least-squares recovery of path amplitudes given the structural
//! parameters: a scalar gain per path (DOD/DOA model), a transmit spatial
//! signature per path (TSS model) or a full matrix signature (MSS model).
//!
//! Only the first subcarrier's time series is used.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{steering_vector, ChannelTensor};
use crate::esprit::StructuralEstimate;
use crate::numkernel::{ls_solve_regularized, ComplexMatrix, ComplexVector, KernelError, C64};
use crate::stacking::ModelKind;

pub const DEFAULT_SIGMA_REG: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum AmplitudeError {
    #[error("{unknowns} unknowns but only {equations} equations")]
    Underdetermined { unknowns: usize, equations: usize },
    #[error("structural estimate lacks {0}")]
    MissingParameter(&'static str),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Amplitude parameters; the variant always matches the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AmplitudeEstimate {
    Beta(Vec<C64>),
    Tss(Vec<ComplexVector>),
    Mss(Vec<ComplexMatrix>),
}

impl AmplitudeEstimate {
    pub fn model(&self) -> ModelKind {
        match self {
            AmplitudeEstimate::Beta(_) => ModelKind::DodDoa,
            AmplitudeEstimate::Tss(_) => ModelKind::Tss,
            AmplitudeEstimate::Mss(_) => ModelKind::Mss,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AmplitudeEstimate::Beta(v) => v.len(),
            AmplitudeEstimate::Tss(v) => v.len(),
            AmplitudeEstimate::Mss(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `W[q, z] = exp(j q gamma_z)`, `q = 0..n_time`.
pub fn time_basis(gamma: &[f64], n_time: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(n_time, gamma.len(), |q, z| C64::from_polar(1.0, q as f64 * gamma[z]))
}

fn check_count(unknowns: usize, equations: usize) -> Result<(), AmplitudeError> {
    if unknowns > equations {
        Err(AmplitudeError::Underdetermined { unknowns, equations })
    } else {
        Ok(())
    }
}

fn spatial(values: &Option<Vec<f64>>, z: usize, n_elem: usize, what: &'static str) -> Result<Vec<f64>, AmplitudeError> {
    match values {
        Some(v) => Ok(v.clone()),
        None if n_elem == 1 => Ok(vec![0.0; z]),
        None => Err(AmplitudeError::MissingParameter(what)),
    }
}

/// Scalar gains from all `N M` antenna-pair time series stacked with `q`
/// fastest, then `n`, then `m`.
pub fn estimate_beta_doddoa(tensor: &ChannelTensor, est: &StructuralEstimate, sigma_reg: f64) -> Result<AmplitudeEstimate, AmplitudeError> {
    let cfg = &tensor.config;
    let (n_rx, n_tx, q_len) = (cfg.n_rx, cfg.n_tx, cfg.n_time);
    let z = est.len();
    check_count(z, q_len * n_rx * n_tx)?;
    let mu_r = spatial(&est.mu_r, z, n_rx, "receive spatial frequencies")?;
    let mu_t = spatial(&est.mu_t, z, n_tx, "transmit spatial frequencies")?;
    let w = time_basis(&est.gamma, q_len);

    let rows = q_len * n_rx * n_tx;
    let mut wd = ComplexMatrix::zeros(rows, z);
    let mut y = ComplexVector::zeros(rows);
    for m in 0..n_tx {
        for n in 0..n_rx {
            let base = (m * n_rx + n) * q_len;
            for q in 0..q_len {
                y[base + q] = tensor.at(q, 0)[(n, m)];
                for zi in 0..z {
                    let spatial = C64::from_polar(1.0, n as f64 * mu_r[zi] + m as f64 * mu_t[zi]);
                    wd[(base + q, zi)] = w[(q, zi)] * spatial;
                }
            }
        }
    }
    Ok(AmplitudeEstimate::Beta(ls_solve_regularized(&wd, &y, sigma_reg)?.iter().copied().collect()))
}

/// Transmit spatial signatures: one `(A_r ⋄ W) x = h_m` solve per transmit
/// antenna, rows ordered `n * Q + q`.
pub fn estimate_tss(tensor: &ChannelTensor, est: &StructuralEstimate, sigma_reg: f64) -> Result<AmplitudeEstimate, AmplitudeError> {
    let cfg = &tensor.config;
    let (n_rx, n_tx, q_len) = (cfg.n_rx, cfg.n_tx, cfg.n_time);
    let z = est.len();
    check_count(z, q_len * n_rx)?;
    let mu_r = spatial(&est.mu_r, z, n_rx, "receive spatial frequencies")?;
    let w = time_basis(&est.gamma, q_len);
    let a_r: Vec<ComplexVector> = mu_r.iter().map(|&mu| steering_vector(mu, n_rx)).collect();
    let wm = ComplexMatrix::from_fn(n_rx * q_len, z, |row, zi| a_r[zi][row / q_len] * w[(row % q_len, zi)]);

    let mut signatures = vec![ComplexVector::zeros(n_tx); z];
    for m in 0..n_tx {
        let y = ComplexVector::from_fn(n_rx * q_len, |row, _| tensor.at(row % q_len, 0)[(row / q_len, m)]);
        let x = ls_solve_regularized(&wm, &y, sigma_reg)?;
        for (zi, s) in signatures.iter_mut().enumerate() {
            s[m] = x[zi];
        }
    }
    Ok(AmplitudeEstimate::Tss(signatures))
}

/// Matrix spatial signatures: `W s_nm = h_nm` for every antenna pair.
pub fn estimate_mss(tensor: &ChannelTensor, est: &StructuralEstimate, sigma_reg: f64) -> Result<AmplitudeEstimate, AmplitudeError> {
    let cfg = &tensor.config;
    let (n_rx, n_tx, q_len) = (cfg.n_rx, cfg.n_tx, cfg.n_time);
    let z = est.len();
    check_count(z, q_len)?;
    let w = time_basis(&est.gamma, q_len);
    let mut signatures = vec![ComplexMatrix::zeros(n_rx, n_tx); z];
    for n in 0..n_rx {
        for m in 0..n_tx {
            let y = ComplexVector::from_fn(q_len, |q, _| tensor.at(q, 0)[(n, m)]);
            let x = ls_solve_regularized(&w, &y, sigma_reg)?;
            for (zi, s) in signatures.iter_mut().enumerate() {
                s[(n, m)] = x[zi];
            }
        }
    }
    Ok(AmplitudeEstimate::Mss(signatures))
}

pub fn estimate(model: ModelKind, tensor: &ChannelTensor, est: &StructuralEstimate, sigma_reg: f64) -> Result<AmplitudeEstimate, AmplitudeError> {
    match model {
        ModelKind::DodDoa => estimate_beta_doddoa(tensor, est, sigma_reg),
        ModelKind::Tss => estimate_tss(tensor, est, sigma_reg),
        ModelKind::Mss => estimate_mss(tensor, est, sigma_reg),
    }
}
