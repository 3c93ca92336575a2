//! Block-Hankel data matrices for the three channel parameterizations.
//!
//! All three are pure re-indexings of the channel tensor. With `S = Q-R+1` and
//! `U = K-T+1`, time window offset `s`, frequency window offset `u`, in-window
//! time lag `r` and frequency lag `t`, every entry is `H(s+r, u+t)[n,m]` and the
//! rows and columns are ordered as follows (slowest index first):
//!
//! | model     | rows            | columns            |
//! |-----------|-----------------|--------------------|
//! | `DodDoa`  | (n, m, s, u)    | (t, r)             |
//! | `Tss`     | (n, s, u)       | (t, r, m)          |
//! | `Mss`     | (s, u)          | (t, r, vec(n,m))   |
//!
//! where `vec(n,m) = m*N + n` is column stacking. The row order is the
//! Kronecker order of the column steering vector, `a_r ⊗ a_t ⊗ a_d ⊗ a_τ`
//! (dropping factors the model does not carry); the selection matrices in
//! [`crate::esprit`] are generated from the same order via [`DimensionLayout`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{steering_vector, ChannelConfig, ChannelTensor, NormalizedPath, PathSet};
use crate::esprit::{DimName, DimensionLayout};
use crate::numkernel::{kron, ComplexMatrix, ComplexVector, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "doddoa")]
    DodDoa,
    #[serde(rename = "tssm")]
    Tss,
    #[serde(rename = "mssm")]
    Mss,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::DodDoa, ModelKind::Tss, ModelKind::Mss];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DodDoa => "doddoa",
            ModelKind::Tss => "tssm",
            ModelKind::Mss => "mssm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "doddoa" | "dod_doa" | "dod-doa" => Ok(ModelKind::DodDoa),
            "tssm" | "tss" => Ok(ModelKind::Tss),
            "mssm" | "mss" => Ok(ModelKind::Mss),
            other => Err(format!("unknown model `{other}` (expected doddoa, tssm or mssm)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StackError {
    #[error("stacking dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Hankel window sizes. `r`/`t` are the time/frequency window widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackShape {
    pub r: usize,
    pub t: usize,
    pub s: usize,
    pub u: usize,
}

impl StackShape {
    pub fn new(n_time: usize, n_freq: usize, r: usize, t: usize) -> Result<Self, StackError> {
        if r == 0 || r > n_time {
            return Err(StackError::Dimension(format!("1 <= R <= Q violated (R = {r}, Q = {n_time})")));
        }
        if t == 0 || t > n_freq {
            return Err(StackError::Dimension(format!("1 <= T <= K violated (T = {t}, K = {n_freq})")));
        }
        Ok(Self { r, t, s: n_time - r + 1, u: n_freq - t + 1 })
    }

    /// Defaults `R = ceil(Q/2)`, `T = ceil(K/2)`.
    pub fn balanced(n_time: usize, n_freq: usize) -> Result<Self, StackError> {
        Self::new(n_time, n_freq, n_time.div_ceil(2), n_freq.div_ceil(2))
    }

    /// Number of rows of the stacked matrix, i.e. the signal-space dimension.
    pub fn rows(&self, model: ModelKind, n_rx: usize, n_tx: usize) -> usize {
        match model {
            ModelKind::DodDoa => n_rx * n_tx * self.s * self.u,
            ModelKind::Tss => n_rx * self.s * self.u,
            ModelKind::Mss => self.s * self.u,
        }
    }

    pub fn cols(&self, model: ModelKind, n_rx: usize, n_tx: usize) -> usize {
        match model {
            ModelKind::DodDoa => self.r * self.t,
            ModelKind::Tss => n_tx * self.r * self.t,
            ModelKind::Mss => n_rx * n_tx * self.r * self.t,
        }
    }

    /// Checks that `z` paths are resolvable: the row dimension must be at least `z + 1`.
    pub fn check_resolvable(&self, model: ModelKind, n_rx: usize, n_tx: usize, z: usize) -> Result<(), StackError> {
        let rows = self.rows(model, n_rx, n_tx);
        if rows < z + 1 {
            let lhs = match model {
                ModelKind::DodDoa => "N*M*S*U",
                ModelKind::Tss => "N*S*U",
                ModelKind::Mss => "S*U",
            };
            return Err(StackError::Dimension(format!("{lhs} >= Z+1 violated ({rows} < {})", z + 1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedData {
    pub model: ModelKind,
    pub matrix: ComplexMatrix,
    pub shape: StackShape,
    pub n_rx: usize,
    pub n_tx: usize,
    /// Noise variance of the source tensor (zero for clean data).
    pub noise_var: f64,
}

impl StackedData {
    pub fn layout(&self) -> DimensionLayout {
        DimensionLayout::for_model(self.model, self.n_rx, self.n_tx, &self.shape)
    }
}

/// Tensor coordinates `(q, k, n, m)` feeding stacked entry `(row, col)`.
pub fn source_index(
    model: ModelKind,
    shape: &StackShape,
    n_rx: usize,
    n_tx: usize,
    row: usize,
    col: usize,
) -> (usize, usize, usize, usize) {
    let StackShape { r: big_r, s: big_s, u: big_u, .. } = *shape;
    let (s, u) = ((row / big_u) % big_s, row % big_u);
    match model {
        ModelKind::DodDoa => {
            let nm = row / (big_s * big_u);
            let (n, m) = (nm / n_tx, nm % n_tx);
            let (t, r) = (col / big_r, col % big_r);
            (s + r, u + t, n, m)
        }
        ModelKind::Tss => {
            let n = row / (big_s * big_u);
            let m = col % n_tx;
            let tr = col / n_tx;
            let (t, r) = (tr / big_r, tr % big_r);
            (s + r, u + t, n, m)
        }
        ModelKind::Mss => {
            let nm = n_rx * n_tx;
            let v = col % nm;
            let (n, m) = (v % n_rx, v / n_rx);
            let tr = col / nm;
            let (t, r) = (tr / big_r, tr % big_r);
            (s + r, u + t, n, m)
        }
    }
}

pub fn build_stacked(tensor: &ChannelTensor, model: ModelKind, r: usize, t: usize) -> Result<StackedData, StackError> {
    let cfg = &tensor.config;
    let shape = StackShape::new(cfg.n_time, cfg.n_freq, r, t)?;
    let (n_rx, n_tx) = (cfg.n_rx, cfg.n_tx);
    let rows = shape.rows(model, n_rx, n_tx);
    let cols = shape.cols(model, n_rx, n_tx);
    let StackShape { r: big_r, t: big_t, s: big_s, u: big_u } = shape;
    let mut x = ComplexMatrix::zeros(rows, cols);
    match model {
        ModelKind::DodDoa => {
            for n in 0..n_rx {
                for m in 0..n_tx {
                    for s in 0..big_s {
                        for u in 0..big_u {
                            let row = ((n * n_tx + m) * big_s + s) * big_u + u;
                            for tt in 0..big_t {
                                for rr in 0..big_r {
                                    x[(row, tt * big_r + rr)] = tensor.at(s + rr, u + tt)[(n, m)];
                                }
                            }
                        }
                    }
                }
            }
        }
        ModelKind::Tss => {
            for n in 0..n_rx {
                for s in 0..big_s {
                    for u in 0..big_u {
                        let row = (n * big_s + s) * big_u + u;
                        for tt in 0..big_t {
                            for rr in 0..big_r {
                                let h = tensor.at(s + rr, u + tt);
                                for m in 0..n_tx {
                                    x[(row, (tt * big_r + rr) * n_tx + m)] = h[(n, m)];
                                }
                            }
                        }
                    }
                }
            }
        }
        ModelKind::Mss => {
            let nm = n_rx * n_tx;
            for s in 0..big_s {
                for u in 0..big_u {
                    let row = s * big_u + u;
                    for tt in 0..big_t {
                        for rr in 0..big_r {
                            let h = tensor.at(s + rr, u + tt);
                            let base = (tt * big_r + rr) * nm;
                            for m in 0..n_tx {
                                for n in 0..n_rx {
                                    x[(row, base + m * n_rx + n)] = h[(n, m)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(StackedData { model, matrix: x, shape, n_rx, n_tx, noise_var: tensor.noise_var })
}

/// Column steering vector of one path in the stacked row space.
pub fn row_steering(model: ModelKind, n_rx: usize, n_tx: usize, shape: &StackShape, p: &NormalizedPath) -> ComplexVector {
    let layout = DimensionLayout::for_model(model, n_rx, n_tx, shape);
    let mut acc = ComplexMatrix::from_element(1, 1, C64::new(1.0, 0.0));
    for &(name, len) in layout.dims() {
        let factor = match name {
            DimName::Rx => steering_vector(p.mu_r, len),
            DimName::Tx => steering_vector(p.mu_t, len),
            DimName::Time => steering_vector(p.gamma, len),
            DimName::Freq => steering_vector(-p.eta, len),
        };
        acc = kron(&acc, &ComplexMatrix::from_column_slice(len, 1, factor.as_slice()));
    }
    acc.column(0).into_owned()
}

/// Model steering matrix `A`, one column per path.
pub fn steering_matrix(
    model: ModelKind,
    n_rx: usize,
    n_tx: usize,
    shape: &StackShape,
    paths: &[NormalizedPath],
) -> ComplexMatrix {
    let cols: Vec<ComplexVector> = paths.iter().map(|p| row_steering(model, n_rx, n_tx, shape, p)).collect();
    ComplexMatrix::from_columns(&cols)
}

/// Checks the analytic column model `x(i) = A alpha(i)` against a stacked matrix
/// built from the noiseless channel of `paths`. Returns the worst relative
/// column residual.
pub fn column_model_check(stacked: &StackedData, paths: &PathSet, config: &ChannelConfig) -> Result<f64, StackError> {
    if stacked.noise_var != 0.0 {
        return Err(StackError::Contract("column model check needs clean data".into()));
    }
    let (n_rx, n_tx) = (stacked.n_rx, stacked.n_tx);
    let norm = paths.normalized(config);
    let a = steering_matrix(stacked.model, n_rx, n_tx, &stacked.shape, &norm);
    let big_r = stacked.shape.r;
    let mut worst: f64 = 0.0;
    for col in 0..stacked.matrix.ncols() {
        let (t, r, n, m) = match stacked.model {
            ModelKind::DodDoa => (col / big_r, col % big_r, 0, 0),
            ModelKind::Tss => {
                let tr = col / n_tx;
                (tr / big_r, tr % big_r, 0, col % n_tx)
            }
            ModelKind::Mss => {
                let nm = n_rx * n_tx;
                let v = col % nm;
                let tr = col / nm;
                (tr / big_r, tr % big_r, v % n_rx, v / n_rx)
            }
        };
        let alpha = ComplexVector::from_iterator(
            norm.len(),
            paths.paths().iter().zip(&norm).map(|(p, np)| {
                let lag = C64::from_polar(1.0, r as f64 * np.gamma - t as f64 * np.eta);
                let spatial = match stacked.model {
                    ModelKind::DodDoa => C64::new(1.0, 0.0),
                    ModelKind::Tss => C64::from_polar(1.0, m as f64 * np.mu_t),
                    ModelKind::Mss => C64::from_polar(1.0, n as f64 * np.mu_r + m as f64 * np.mu_t),
                };
                p.beta * lag * spatial
            }),
        );
        let x = stacked.matrix.column(col);
        let scale = x.norm();
        let resid = (x - &a * alpha).norm();
        worst = worst.max(if scale > 0.0 { resid / scale } else { resid });
    }
    Ok(worst)
}
