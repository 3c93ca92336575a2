//! Sample covariance, model-order selection and signal/noise subspace split.

use thiserror::Error;

use crate::numkernel::{gram, hermitian_eig, outer_gram, ComplexMatrix, KernelError, C64};
use crate::stacking::StackedData;

/// Eigenvalues are floored here before taking logarithms.
pub const EIGEN_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum SubspaceError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone)]
pub struct SubspaceSplit {
    pub signal_basis: ComplexMatrix,
    pub noise_basis: ComplexMatrix,
    pub signal_eigvals: Vec<f64>,
    pub noise_eigvals: Vec<f64>,
    pub noise_var_hat: f64,
}

/// `X X^H / n_cols`; the column count is `RT`, `MRT` or `NMRT` depending on the model.
pub fn covariance(stacked: &StackedData) -> ComplexMatrix {
    let x = &stacked.matrix;
    outer_gram(x) * C64::new(1.0 / x.ncols() as f64, 0.0)
}

/// Order-selection criterion value for candidate order `z` (1-based). The log
/// term uses the largest eigenvalue left out of a rank-`z` signal subspace,
/// `lambda_{z+1}`: with `lambda_z` the criterion overshoots the true order by one,
/// since `lambda_Z` is still a signal eigenvalue.
pub fn mdl_criterion(eigvals_desc: &[f64], n_snapshots: usize, z: usize) -> f64 {
    let n = n_snapshots as f64;
    let lambda = eigvals_desc[z].max(EIGEN_FLOOR);
    n * lambda.ln() + 0.5 * (z * z + z) as f64 * n.ln()
}

/// `argmin_z  n log(lambda_{z+1}) + (z^2 + z)/2 log n` over `z = 1..=max_order`.
pub fn estimate_order(eigvals_desc: &[f64], n_snapshots: usize, max_order: usize) -> Result<usize, SubspaceError> {
    if eigvals_desc.is_empty() {
        return Err(SubspaceError::Contract("empty eigenvalue list".into()));
    }
    if max_order == 0 || max_order >= eigvals_desc.len() {
        return Err(SubspaceError::Contract(format!(
            "max_order {max_order} outside 1..={}",
            eigvals_desc.len() - 1
        )));
    }
    if eigvals_desc.windows(2).any(|w| w[0] < w[1]) {
        return Err(SubspaceError::Contract("eigenvalues must be sorted descending".into()));
    }
    let mut best = (1, f64::INFINITY);
    for z in 1..=max_order {
        let v = mdl_criterion(eigvals_desc, n_snapshots, z);
        if v < best.1 {
            best = (z, v);
        }
    }
    Ok(best.0)
}

/// Default candidate range: `dim - 1`, further capped at `2 * hint` and at the
/// number of nonzero sample eigenvalues minus one.
pub fn default_max_order(dim: usize, rank: usize, hint: Option<usize>) -> usize {
    let mut m = dim.saturating_sub(1).min(rank.saturating_sub(1));
    if let Some(h) = hint {
        m = m.min(2 * h);
    }
    m.max(1)
}

/// Splits a Hermitian PSD matrix into its top-`z_hat` eigenspace and the rest.
pub fn split(c: &ComplexMatrix, z_hat: usize) -> Result<SubspaceSplit, SubspaceError> {
    let dim = c.nrows();
    if z_hat == 0 || z_hat >= dim {
        return Err(SubspaceError::Contract(format!("z_hat {z_hat} outside 1..{dim}")));
    }
    let eig = hermitian_eig(c)?;
    let vals: Vec<f64> = eig.values.iter().map(|v| v.re).collect();
    let noise_eigvals = vals[z_hat..].to_vec();
    Ok(SubspaceSplit {
        signal_basis: eig.vectors.columns(0, z_hat).into_owned(),
        noise_basis: eig.vectors.columns(z_hat, dim - z_hat).into_owned(),
        signal_eigvals: vals[..z_hat].to_vec(),
        noise_var_hat: noise_eigvals.iter().sum::<f64>() / noise_eigvals.len() as f64,
        noise_eigvals,
    })
}

/// How the model order is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderChoice {
    /// Fixed order, bypassing the criterion.
    Fixed(usize),
    /// Criterion over `1..=max_order` (default range when `None`), with an optional size hint.
    Estimate { max_order: Option<usize>, hint: Option<usize> },
}

/// Dominant eigenspace of the sample covariance of a stacked matrix.
#[derive(Debug, Clone)]
pub struct SignalSubspace {
    pub basis: ComplexMatrix,
    /// Full covariance spectrum, descending; exact zeros past the rank of `X`.
    pub eigenvalues: Vec<f64>,
    pub z_hat: usize,
    pub noise_var_hat: f64,
    pub order_overridden: bool,
}

/// Computes the signal subspace of `X X^H / n_cols` without forming the
/// covariance when `X` is tall: the nonzero spectrum then comes from the
/// smaller Gram matrix `X^H X / n_cols` and `E_s = X V_s diag(lambda_s)^{-1/2} / sqrt(n_cols)`.
pub fn signal_subspace(stacked: &StackedData, order: OrderChoice) -> Result<SignalSubspace, SubspaceError> {
    let x = &stacked.matrix;
    let (rows, cols) = x.shape();
    let inv_cols = 1.0 / cols as f64;
    let tall = rows > cols;
    let (vals, vecs) = if tall {
        let g = gram(x) * C64::new(inv_cols, 0.0);
        let eig = hermitian_eig(&g)?;
        (eig.values.iter().map(|v| v.re.max(0.0)).collect::<Vec<_>>(), eig.vectors)
    } else {
        let eig = hermitian_eig(&covariance(stacked))?;
        (eig.values.iter().map(|v| v.re.max(0.0)).collect::<Vec<_>>(), eig.vectors)
    };
    let rank = vals.len().min(rows);
    let mut eigenvalues = vals;
    eigenvalues.resize(rows, 0.0);

    let (z_hat, order_overridden) = match order {
        OrderChoice::Fixed(z) => (z, true),
        OrderChoice::Estimate { max_order, hint } => {
            let max = max_order.unwrap_or_else(|| default_max_order(rows, rank, hint));
            (estimate_order(&eigenvalues, cols, max)?, false)
        }
    };
    if z_hat == 0 || z_hat >= rows {
        return Err(SubspaceError::Contract(format!("order {z_hat} outside 1..{rows}")));
    }
    if tall && z_hat > rank {
        return Err(SubspaceError::Contract(format!("order {z_hat} exceeds the {rank} available snapshots")));
    }

    let basis = if tall {
        let mut e = x * vecs.columns(0, z_hat);
        for (i, mut col) in e.column_iter_mut().enumerate() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= C64::new(norm, 0.0);
            } else {
                return Err(SubspaceError::Contract(format!("signal eigenvalue {i} is exactly zero")));
            }
        }
        e
    } else {
        vecs.columns(0, z_hat).into_owned()
    };
    let trace: f64 = eigenvalues.iter().sum();
    let signal: f64 = eigenvalues[..z_hat].iter().sum();
    let noise_var_hat = ((trace - signal) / (rows - z_hat) as f64).max(0.0);
    Ok(SignalSubspace { basis, eigenvalues, z_hat, noise_var_hat, order_overridden })
}
