//! Multidimensional ESPRIT with mean-matrix eigenvector pairing.
//!
//! The signal subspace `E_s` spans a Kronecker-structured steering matrix
//! whose factor order is described by a [`DimensionLayout`]. For each
//! dimension of length `L >= 2` the selection pair picks the first and last
//! `L - 1` positions of that dimension, the invariance equation
//! `S1 E_s Phi = S2 E_s` is solved in the least-squares sense, and the
//! eigenvalues of `Phi` are `exp(j * phase)` where `phase` is the per-sample
//! phase progression of that dimension's Vandermonde factor. All `Phi` share
//! eigenvectors, so a single eigendecomposition of a weighted sum diagonalizes
//! them jointly and keeps the per-path parameters grouped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linfix::wrap_angle;
use crate::numkernel::{general_eig_with_ceiling, lstsq, ComplexMatrix, KernelError, C64};
use crate::stacking::{ModelKind, StackShape};

/// Relative tolerance on the QR diagonal below which `S1 E_s` is rank deficient.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DimName {
    Rx,
    Tx,
    Time,
    Freq,
}

impl DimName {
    /// Sign that maps `arg(eigenvalue)` to the physical parameter. The frequency
    /// factor carries `exp(-j k eta)`, so its phase progression is `-eta`.
    pub fn arg_sign(self) -> f64 {
        match self {
            DimName::Freq => -1.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum EspritError {
    #[error("dimension {0:?} has length 1; no shift invariance available")]
    InvarianceUnavailable(DimName),
    #[error("dimension {0:?} not present in layout")]
    MissingDimension(DimName),
    #[error("selected subspace for {0:?} is rank deficient; paths are not resolvable")]
    RankDeficient(DimName),
    #[error("pairing failed: eigenvector condition number {condition:.3e} above ceiling")]
    PairingFailure { condition: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Ordered Kronecker factorization of the stacked row space, slowest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimensionLayout {
    dims: Vec<(DimName, usize)>,
}

impl DimensionLayout {
    pub fn new(dims: Vec<(DimName, usize)>) -> Self {
        Self { dims }
    }

    pub fn for_model(model: ModelKind, n_rx: usize, n_tx: usize, shape: &StackShape) -> Self {
        let dims = match model {
            ModelKind::DodDoa => vec![
                (DimName::Rx, n_rx),
                (DimName::Tx, n_tx),
                (DimName::Time, shape.s),
                (DimName::Freq, shape.u),
            ],
            ModelKind::Tss => vec![(DimName::Rx, n_rx), (DimName::Time, shape.s), (DimName::Freq, shape.u)],
            ModelKind::Mss => vec![(DimName::Time, shape.s), (DimName::Freq, shape.u)],
        };
        Self { dims }
    }

    pub fn dims(&self) -> &[(DimName, usize)] {
        &self.dims
    }

    pub fn total_len(&self) -> usize {
        self.dims.iter().map(|d| d.1).product()
    }

    pub fn len_of(&self, name: DimName) -> Option<usize> {
        self.dims.iter().find(|d| d.0 == name).map(|d| d.1)
    }
}

/// A 0/1 row-selection matrix stored as the selected column index of each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMatrix {
    pub picks: Vec<usize>,
    pub n_cols: usize,
}

impl SelectionMatrix {
    pub fn n_rows(&self) -> usize {
        self.picks.len()
    }

    pub fn apply(&self, e: &ComplexMatrix) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.picks.len(), e.ncols(), |i, j| e[(self.picks[i], j)])
    }

    pub fn to_dense(&self) -> ComplexMatrix {
        let mut m = ComplexMatrix::zeros(self.picks.len(), self.n_cols);
        for (i, &j) in self.picks.iter().enumerate() {
            m[(i, j)] = C64::new(1.0, 0.0);
        }
        m
    }
}

/// Selection pair `I ⊗ [I 0] ⊗ I` / `I ⊗ [0 I] ⊗ I` for `dim` within `layout`.
pub fn selection_pair(layout: &DimensionLayout, dim: DimName) -> Result<(SelectionMatrix, SelectionMatrix), EspritError> {
    let pos = layout.dims.iter().position(|d| d.0 == dim).ok_or(EspritError::MissingDimension(dim))?;
    let len = layout.dims[pos].1;
    if len < 2 {
        return Err(EspritError::InvarianceUnavailable(dim));
    }
    let stride: usize = layout.dims[pos + 1..].iter().map(|d| d.1).product();
    let total = layout.total_len();
    let first: Vec<usize> = (0..total).filter(|i| (i / stride) % len < len - 1).collect();
    let second = first.iter().map(|i| i + stride).collect();
    Ok((
        SelectionMatrix { picks: first, n_cols: total },
        SelectionMatrix { picks: second, n_cols: total },
    ))
}

/// Least-squares solution of `S1 E_s Phi = S2 E_s`.
pub fn solve_invariance(e_s: &ComplexMatrix, s1: &SelectionMatrix, s2: &SelectionMatrix, dim: DimName) -> Result<ComplexMatrix, EspritError> {
    if s1.n_cols != e_s.nrows() || s2.n_cols != e_s.nrows() {
        return Err(EspritError::Contract(format!(
            "selection matrices have {} columns but E_s has {} rows",
            s1.n_cols,
            e_s.nrows()
        )));
    }
    if e_s.ncols() > s1.n_rows() {
        return Err(EspritError::RankDeficient(dim));
    }
    let lhs = s1.apply(e_s);
    let rhs = s2.apply(e_s);
    lstsq(&lhs, &rhs, RANK_TOL).ok_or(EspritError::RankDeficient(dim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralEstimate {
    pub mu_r: Option<Vec<f64>>,
    pub mu_t: Option<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    pub pairing_condition: f64,
}

impl StructuralEstimate {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    /// Parameters of path `z` for dimension `dim`, if estimated.
    pub fn get(&self, dim: DimName, z: usize) -> Option<f64> {
        match dim {
            DimName::Rx => self.mu_r.as_ref().map(|v| v[z]),
            DimName::Tx => self.mu_t.as_ref().map(|v| v[z]),
            DimName::Time => Some(self.gamma[z]),
            DimName::Freq => Some(self.eta[z]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingOptions {
    /// Weights for the mean matrix; `None` means unit weights.
    pub weights: Option<Vec<f64>>,
    /// Condition number above which pairing is retried and finally rejected.
    pub condition_ceiling: f64,
    /// Relative off-diagonal residual of the jointly diagonalized matrices
    /// above which a retry is attempted. Coincident eigenvalues of the mean
    /// matrix leave the eigenvectors unidentified without inflating the
    /// condition number; this catches that case.
    pub leakage_ceiling: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for PairingOptions {
    fn default() -> Self {
        Self { weights: None, condition_ceiling: 1e8, leakage_ceiling: 0.1, max_retries: 3, seed: 0x005E_ED0F_9A1E }
    }
}

/// Joint diagonalization of the per-dimension ESPRIT matrices and parameter
/// extraction. `phis` pairs each estimated dimension with its `Phi`.
pub fn pair_and_extract(phis: &[(DimName, ComplexMatrix)], opts: &PairingOptions) -> Result<StructuralEstimate, EspritError> {
    let Some(first) = phis.first() else {
        return Err(EspritError::Contract("no invariance matrices to pair".into()));
    };
    let z = first.1.nrows();
    if phis.iter().any(|(_, p)| p.shape() != (z, z)) || z == 0 {
        return Err(EspritError::Contract("all Phi must share the same square shape".into()));
    }
    if let Some(w) = &opts.weights {
        if w.len() != phis.len() {
            return Err(EspritError::Contract("one weight per dimension is required".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut weights = opts.weights.clone().unwrap_or_else(|| vec![1.0; phis.len()]);
    // (condition, leakage, eigenvectors, inverse) of the best attempt so far.
    let mut best: Option<(f64, f64, ComplexMatrix, ComplexMatrix)> = None;
    let mut worst_condition: f64 = 0.0;
    for attempt in 0..=opts.max_retries {
        if attempt > 0 {
            weights = (0..phis.len()).map(|_| rng.random_range(0.1..1.0)).collect();
        }
        let mut upsilon = ComplexMatrix::zeros(z, z);
        for ((_, phi), w) in phis.iter().zip(&weights) {
            upsilon += phi * C64::new(*w, 0.0);
        }
        let decomposition = match general_eig_with_ceiling(&upsilon, f64::INFINITY) {
            Ok(d) => d,
            Err(KernelError::NearDefective { decomposition, .. }) => *decomposition,
            Err(e) => return Err(EspritError::Contract(e.to_string())),
        };
        let cond = decomposition.condition;
        let inverse = decomposition.vectors.clone().try_inverse();
        let Some(inverse) = inverse.filter(|_| cond <= opts.condition_ceiling) else {
            worst_condition = worst_condition.max(cond);
            continue;
        };
        let leak = leakage(phis, &decomposition.vectors, &inverse);
        if best.as_ref().is_none_or(|b| leak < b.1) {
            best = Some((cond, leak, decomposition.vectors, inverse));
        }
        if leak <= opts.leakage_ceiling {
            break;
        }
    }
    let Some((condition, _, sigma, sigma_inv)) = best else {
        return Err(EspritError::PairingFailure { condition: worst_condition });
    };

    let mut out = StructuralEstimate {
        mu_r: None,
        mu_t: None,
        gamma: vec![0.0; z],
        eta: vec![0.0; z],
        pairing_condition: condition,
    };
    for (dim, phi) in phis {
        let xi = &sigma_inv * phi * &sigma;
        let params: Vec<f64> = (0..z).map(|i| wrap_angle(dim.arg_sign() * xi[(i, i)].arg())).collect();
        match dim {
            DimName::Rx => out.mu_r = Some(params),
            DimName::Tx => out.mu_t = Some(params),
            DimName::Time => out.gamma = params,
            DimName::Freq => out.eta = params,
        }
    }
    Ok(out)
}

/// Largest `||offdiag(Xi)|| / ||diag(Xi)||` over `Xi = Sigma^-1 Phi Sigma`.
fn leakage(phis: &[(DimName, ComplexMatrix)], sigma: &ComplexMatrix, sigma_inv: &ComplexMatrix) -> f64 {
    phis.iter()
        .map(|(_, phi)| {
            let xi = sigma_inv * phi * sigma;
            let diag: f64 = xi.diagonal().norm_squared();
            let off = xi.norm_squared() - diag;
            (off.max(0.0) / diag.max(f64::MIN_POSITIVE)).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Runs the selection/invariance stage for every dimension of `layout` with
/// length at least two.
pub fn invariance_matrices(e_s: &ComplexMatrix, layout: &DimensionLayout) -> Result<Vec<(DimName, ComplexMatrix)>, EspritError> {
    let mut out = Vec::new();
    for &(dim, len) in layout.dims() {
        if len < 2 {
            continue;
        }
        let (s1, s2) = selection_pair(layout, dim)?;
        out.push((dim, solve_invariance(e_s, &s1, &s2, dim)?));
    }
    Ok(out)
}
