//! Fisher information and Cramér–Rao bounds for the DOD/DOA parameterization.
//!
//! The observation is the full `Q x K` grid of `N x M` snapshots in white
//! circular Gaussian noise of variance `sigma^2`. Stacking every entry gives
//! `h = (A_f ⋄ A_d ⋄ A_t ⋄ A_r) beta`, so each column of `dh/dTheta` is a
//! Kronecker product of one column per factor (with one factor replaced by
//! its derivative) scaled by `beta_z`, `1` or `j`. Gram matrices of such
//! columns factor into Hadamard products of per-factor Grams, which keeps the
//! information matrix at `6Z x 6Z` cost regardless of the grid size.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{derive_grid, sample_grid, ChannelConfig, PathSet};
use crate::numkernel::{ComplexMatrix, C64};

/// Eigenvalues below this fraction of the largest are treated as null directions.
pub const PINV_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CrbError {
    #[error("noise variance must be finite and positive, got {0}")]
    NoiseVariance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Param {
    NoiseVar,
    MuR(usize),
    MuT(usize),
    Gamma(usize),
    Eta(usize),
    ReBeta(usize),
    ImBeta(usize),
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Param::NoiseVar => write!(f, "noise_var"),
            Param::MuR(z) => write!(f, "mu_r[{z}]"),
            Param::MuT(z) => write!(f, "mu_t[{z}]"),
            Param::Gamma(z) => write!(f, "gamma[{z}]"),
            Param::Eta(z) => write!(f, "eta[{z}]"),
            Param::ReBeta(z) => write!(f, "re_beta[{z}]"),
            Param::ImBeta(z) => write!(f, "im_beta[{z}]"),
        }
    }
}

/// `sigma^2`, then each parameter family over all paths.
pub fn param_order(z: usize) -> Vec<Param> {
    let families: [fn(usize) -> Param; 6] = [Param::MuR, Param::MuT, Param::Gamma, Param::Eta, Param::ReBeta, Param::ImBeta];
    std::iter::once(Param::NoiseVar).chain(families.iter().flat_map(|f| (0..z).map(f))).collect()
}

/// Steering factors and their parameter derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub a_r: ComplexMatrix,
    pub a_t: ComplexMatrix,
    pub a_d: ComplexMatrix,
    pub a_f: ComplexMatrix,
    pub d_r: ComplexMatrix,
    pub d_t: ComplexMatrix,
    pub d_d: ComplexMatrix,
    pub d_f: ComplexMatrix,
    pub x_diag: Vec<C64>,
}

/// `A[l, z] = exp(j sign l phase_z)`.
fn vandermonde(phase: &[f64], len: usize, sign: f64) -> ComplexMatrix {
    ComplexMatrix::from_fn(len, phase.len(), |l, z| C64::from_polar(1.0, sign * l as f64 * phase[z]))
}

/// `dA/dphase = j sign diag(0..L-1) A`.
fn derivative(a: &ComplexMatrix, sign: f64) -> ComplexMatrix {
    ComplexMatrix::from_fn(a.nrows(), a.ncols(), |l, z| C64::new(0.0, sign * l as f64) * a[(l, z)])
}

pub fn build_factors(paths: &PathSet, config: &ChannelConfig) -> Factors {
    let np = paths.normalized(config);
    let pick = |f: fn(&crate::channel::NormalizedPath) -> f64| np.iter().map(f).collect::<Vec<_>>();
    let a_r = vandermonde(&pick(|p| p.mu_r), config.n_rx, 1.0);
    let a_t = vandermonde(&pick(|p| p.mu_t), config.n_tx, 1.0);
    let a_d = vandermonde(&pick(|p| p.gamma), config.n_time, 1.0);
    let a_f = vandermonde(&pick(|p| p.eta), config.n_freq, -1.0);
    Factors {
        d_r: derivative(&a_r, 1.0),
        d_t: derivative(&a_t, 1.0),
        d_d: derivative(&a_d, 1.0),
        d_f: derivative(&a_f, -1.0),
        a_r,
        a_t,
        a_d,
        a_f,
        x_diag: paths.paths().iter().map(|p| p.beta).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FimReport {
    /// Full `(1 + 6Z)` information matrix in [`param_order`].
    pub fim: DMatrix<f64>,
    /// Structural/amplitude block `J`.
    pub j_block: DMatrix<f64>,
    pub param_order: Vec<Param>,
    /// Diagonal of the (pseudo-)inverse; `+inf` for unidentifiable parameters.
    pub crb_diag: Vec<f64>,
    /// Whether `J` had null directions.
    pub singular: bool,
    pub noise_var: f64,
    /// Pseudo-inverse of `J`.
    pub j_pinv: DMatrix<f64>,
    /// Orthonormal basis of the null space of `J`, one column per direction.
    pub null_basis: DMatrix<f64>,
    /// Mean `||H(q,k)||_F^2` over the observed grid (noise-free).
    pub mean_channel_energy: f64,
}

impl FimReport {
    pub fn crb(&self, p: Param) -> f64 {
        let i = self.param_order.iter().position(|x| *x == p).expect("parameter in order");
        self.crb_diag[i]
    }
}

/// `2 Re[(G_1^H G_1) ⊙ ... ⊙ (G_5^H G_5)]`, i.e. `sigma^2 J`.
fn unscaled_information(f: &Factors) -> DMatrix<f64> {
    let z = f.x_diag.len();
    let p = 6 * z;
    // Block b differentiates factor b (r, t, d, f) for b < 4; blocks 4, 5 are the amplitudes.
    let per_factor = [(&f.a_r, &f.d_r), (&f.a_t, &f.d_t), (&f.a_d, &f.d_d), (&f.a_f, &f.d_f)];
    let mut prod = ComplexMatrix::from_fn(p, p, |i, j| {
        let g = |c: usize| match c / z {
            0..=3 => f.x_diag[c % z],
            4 => C64::new(1.0, 0.0),
            _ => C64::new(0.0, 1.0),
        };
        g(i).conj() * g(j)
    });
    for (idx, (a, d)) in per_factor.iter().enumerate() {
        let cols: Vec<_> = (0..6).flat_map(|b| {
            let src = if b == idx { *d } else { *a };
            (0..z).map(move |c| src.column(c).into_owned())
        })
        .collect();
        let g = ComplexMatrix::from_columns(&cols);
        prod.component_mul_assign(&(g.adjoint() * g));
    }
    prod.map(|v| 2.0 * v.re)
}

pub fn build_fim(paths: &PathSet, config: &ChannelConfig, noise_var: f64) -> Result<FimReport, CrbError> {
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(CrbError::NoiseVariance(noise_var));
    }
    let factors = build_factors(paths, config);
    let z = paths.len();
    let p = 6 * z;
    let m = unscaled_information(&factors);
    let m = (&m + m.transpose()) * 0.5;
    let j_block = &m / noise_var;

    let eig = SymmetricEigen::new(m.clone());
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut pinv = DMatrix::zeros(p, p);
    let mut null_cols = Vec::new();
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        if lambda > PINV_RTOL * lambda_max {
            pinv += v * v.transpose() / lambda;
        } else {
            null_cols.push(v.into_owned());
        }
    }
    let j_pinv = pinv * noise_var;
    let null_basis = if null_cols.is_empty() { DMatrix::zeros(p, 0) } else { DMatrix::from_columns(&null_cols) };

    let n_obs = (config.n_time * config.n_freq * config.n_rx * config.n_tx) as f64;
    let mut fim = DMatrix::zeros(p + 1, p + 1);
    fim[(0, 0)] = n_obs / (noise_var * noise_var);
    fim.view_mut((1, 1), (p, p)).copy_from(&j_block);

    let mut crb_diag = vec![noise_var * noise_var / n_obs];
    for i in 0..p {
        let leak: f64 = null_basis.row(i).norm_squared();
        crb_diag.push(if leak > 1e-12 { f64::INFINITY } else { j_pinv[(i, i)] });
    }

    let grid = sample_grid(paths, config);
    let mean_channel_energy = grid.samples().iter().map(|s| s.norm_squared()).sum::<f64>() / grid.samples().len() as f64;

    Ok(FimReport {
        fim,
        j_block,
        param_order: param_order(z),
        crb_diag,
        singular: !null_cols.is_empty(),
        noise_var,
        j_pinv,
        null_basis,
        mean_channel_energy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBound {
    pub q: i64,
    pub k: i64,
    /// `NM x NM` bound on the covariance of `vec(H(q,k))`.
    pub matrix: ComplexMatrix,
    pub trace: f64,
    /// `trace / mean ||H||_F^2` over the observed grid, comparable to an NSE.
    pub normalized_trace: f64,
    /// The snapshot depends on an unidentifiable parameter direction.
    pub unbounded: bool,
}

/// Jacobian of `vec(H(q,k))` (entry `m N + n`) with respect to the `6Z`
/// non-noise parameters.
pub fn snapshot_jacobian(paths: &PathSet, config: &ChannelConfig, q: i64, k: i64) -> ComplexMatrix {
    let np = paths.normalized(config);
    let z = np.len();
    let (n_rx, n_tx) = (config.n_rx, config.n_tx);
    let mut jac = ComplexMatrix::zeros(n_rx * n_tx, 6 * z);
    let j = C64::new(0.0, 1.0);
    for (zi, (p, path)) in np.iter().zip(paths.paths()).enumerate() {
        for m in 0..n_tx {
            for n in 0..n_rx {
                let row = m * n_rx + n;
                let c = C64::from_polar(1.0, n as f64 * p.mu_r + m as f64 * p.mu_t + q as f64 * p.gamma - k as f64 * p.eta);
                let bc = path.beta * c;
                jac[(row, zi)] = j * n as f64 * bc;
                jac[(row, z + zi)] = j * m as f64 * bc;
                jac[(row, 2 * z + zi)] = j * q as f64 * bc;
                jac[(row, 3 * z + zi)] = -j * k as f64 * bc;
                jac[(row, 4 * z + zi)] = c;
                jac[(row, 5 * z + zi)] = j * c;
            }
        }
    }
    jac
}

/// Delta-method bound `Jac J^+ Jac^H` on the error covariance of `vec(H(q,k))`.
pub fn prediction_bound(report: &FimReport, paths: &PathSet, config: &ChannelConfig, q: i64, k: i64) -> PredictionBound {
    let jac = snapshot_jacobian(paths, config, q, k);
    let jp = report.j_pinv.map(|v| C64::new(v, 0.0));
    let matrix = &jac * jp * jac.adjoint();
    let matrix = (&matrix + matrix.adjoint()) * C64::new(0.5, 0.0);
    let unbounded = report.null_basis.ncols() > 0 && {
        let nb = report.null_basis.map(|v| C64::new(v, 0.0));
        (&jac * nb).norm() > 1e-9 * jac.norm()
    };
    let trace = if unbounded { f64::INFINITY } else { matrix.trace().re };
    PredictionBound { q, k, matrix, trace, normalized_trace: trace / report.mean_channel_energy, unbounded }
}

/// Time index `Q - 1 + round(horizon * rate)` for a horizon in wavelengths.
pub fn horizon_index(config: &ChannelConfig, horizon_lambda: f64) -> i64 {
    config.n_time as i64 - 1 + (horizon_lambda * config.spatial_rate_per_lambda).round() as i64
}

/// Mean normalized trace bound over all subcarriers at a wavelength horizon.
pub fn horizon_bound(report: &FimReport, paths: &PathSet, config: &ChannelConfig, horizon_lambda: f64) -> f64 {
    let q = horizon_index(config, horizon_lambda);
    let total: f64 = (0..config.n_freq as i64).map(|k| prediction_bound(report, paths, config, q, k).normalized_trace).sum();
    total / config.n_freq as f64
}

/// Sampling interval in seconds; convenience for converting `gamma` bounds to Doppler.
pub fn sample_interval_s(config: &ChannelConfig) -> f64 {
    derive_grid(config).dt_s
}
