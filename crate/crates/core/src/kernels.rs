//! ARD kernels over ungated inputs, plus the jittered Cholesky used for `K_uu`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial relative jitter added to the diagonal of `K_uu`.
pub const JITTER_START: f64 = 1e-6;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Linear,
    #[serde(rename = "expquad")]
    ExpQuad,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(KernelFamily::Linear),
            "expquad" | "rbf" | "exp-quad" => Ok(KernelFamily::ExpQuad),
            other => Err(Error::invalid("kernel", format!("unknown family `{other}`"))),
        }
    }
}

/// Kernel family and hyperparameters.
///
/// `ExpQuad` is `σ² exp(-½ Σ_q (x_q - x'_q)² / ℓ_q²)`; `Linear` is `σ² xᵀx'`
/// and carries no lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn linear(variance: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Linear,
            variance,
            lengthscales: Vec::new(),
        }
    }

    pub fn exp_quad(variance: f64, lengthscales: Vec<f64>) -> Self {
        KernelSpec {
            family: KernelFamily::ExpQuad,
            variance,
            lengthscales,
        }
    }

    /// Default hyperparameters for `q` latent dimensions (unit variance and lengthscales).
    pub fn default_for(family: KernelFamily, q: usize) -> Self {
        match family {
            KernelFamily::Linear => Self::linear(1.0),
            KernelFamily::ExpQuad => Self::exp_quad(1.0, vec![1.0; q]),
        }
    }

    /// Checks positivity and, for `ExpQuad`, that there are `q` lengthscales.
    pub fn validate(&self, q: usize) -> Result<()> {
        if !(self.variance > 0.0) || !self.variance.is_finite() {
            return Err(Error::invalid(
                "kernel.variance",
                format!("must be positive and finite, got {}", self.variance),
            ));
        }
        match self.family {
            KernelFamily::Linear => {
                if !self.lengthscales.is_empty() {
                    return Err(Error::invalid(
                        "kernel.lengthscales",
                        "linear kernel takes no lengthscales",
                    ));
                }
            }
            KernelFamily::ExpQuad => {
                if self.lengthscales.len() != q {
                    return Err(Error::mismatch(
                        "kernel lengthscales",
                        q,
                        self.lengthscales.len(),
                    ));
                }
                if let Some(l) = self
                    .lengthscales
                    .iter()
                    .find(|l| !(**l > 0.0) || !l.is_finite())
                {
                    return Err(Error::invalid(
                        "kernel.lengthscales",
                        format!("must be positive and finite, got {l}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of free hyperparameters (variance plus lengthscales).
    pub fn n_params(&self) -> usize {
        1 + self.lengthscales.len()
    }
}

fn eval_unchecked(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    match spec.family {
        KernelFamily::Linear => spec.variance * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>(),
        KernelFamily::ExpQuad => {
            let r2: f64 = x
                .iter()
                .zip(y)
                .zip(&spec.lengthscales)
                .map(|((a, b), l)| {
                    let d = (a - b) / l;
                    d * d
                })
                .sum();
            spec.variance * (-0.5 * r2).exp()
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::mismatch("kernel_eval inputs", x.len(), y.len()));
    }
    spec.validate(x.len())?;
    Ok(eval_unchecked(spec, x, y))
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Cross-covariance `K(A, B)` with one row per row of `a` and one column per row of `b`.
///
/// When `a` and `b` are the same matrix the result is filled symmetrically.
pub fn kernel_matrix(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::mismatch("kernel_matrix columns", a.ncols(), b.ncols()));
    }
    spec.validate(a.ncols())?;
    let rows_a: Vec<Vec<f64>> = (0..a.nrows()).map(|i| row(a, i)).collect();
    if std::ptr::eq(a, b) || a == b {
        let n = a.nrows();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = eval_unchecked(spec, &rows_a[i], &rows_a[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        return Ok(k);
    }
    let rows_b: Vec<Vec<f64>> = (0..b.nrows()).map(|i| row(b, i)).collect();
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        eval_unchecked(spec, &rows_a[i], &rows_b[j])
    }))
}

/// Gradients of a scalar objective with respect to kernel inputs and hyperparameters.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    pub z: DMatrix<f64>,
    pub variance: f64,
    /// With respect to ℓ_q (not ℓ_q²). Empty for `Linear`.
    pub lengthscales: Vec<f64>,
}

/// Back-propagates `dL/dK` for `K = kernel_matrix(spec, z, z)` onto `z` and the hyperparameters.
pub fn kernel_matrix_backprop(
    spec: &KernelSpec,
    z: &DMatrix<f64>,
    k: &DMatrix<f64>,
    dk: &DMatrix<f64>,
) -> KernelGrads {
    let (m, q) = z.shape();
    match spec.family {
        KernelFamily::Linear => {
            let sym = dk + dk.transpose();
            let gz = (&sym * z) * spec.variance;
            let gvar = dk.component_mul(k).sum() / spec.variance;
            KernelGrads {
                z: gz,
                variance: gvar,
                lengthscales: Vec::new(),
            }
        }
        KernelFamily::ExpQuad => {
            let mut gz = DMatrix::zeros(m, q);
            let mut gl = vec![0.0; q];
            let mut gvar = 0.0;
            for a in 0..m {
                for b in 0..m {
                    let w = dk[(a, b)] * k[(a, b)];
                    if w == 0.0 {
                        continue;
                    }
                    gvar += w;
                    for j in 0..q {
                        let l = spec.lengthscales[j];
                        let d = z[(a, j)] - z[(b, j)];
                        let t = w * d / (l * l);
                        gz[(a, j)] -= t;
                        gz[(b, j)] += t;
                        gl[j] += t * d / l;
                    }
                }
            }
            KernelGrads {
                z: gz,
                variance: gvar / spec.variance,
                lengthscales: gl,
            }
        }
    }
}

/// A Cholesky factor of `K + jitter·I`.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    /// Absolute amount added to the diagonal.
    pub jitter: f64,
    /// `jitter / mean(diag(K))`.
    pub relative: f64,
}

impl JitteredCholesky {
    pub fn log_det(&self) -> f64 {
        2.0 * self.factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }
}

fn mean_diag(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows().max(1) as f64;
    let m = k.diagonal().sum() / n;
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn try_factor(k: &DMatrix<f64>, jitter: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut kj = k.clone();
    for i in 0..kj.nrows() {
        kj[(i, i)] += jitter;
    }
    let chol = Cholesky::new(kj)?;
    if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
        Some(chol)
    } else {
        None
    }
}

/// Cholesky of `K_uu` under the jitter policy: start at `1e-6·mean(diag)` and
/// escalate by ×10 up to `1e-2·mean(diag)`.
pub fn jittered_cholesky(k: &DMatrix<f64>, label: &'static str) -> Result<JitteredCholesky> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(label));
    }
    let scale = mean_diag(k);
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        if let Some(factor) = try_factor(k, jitter) {
            return Ok(JitteredCholesky {
                factor,
                jitter,
                relative: rel,
            });
        }
        rel *= 10.0;
    }
    Err(Error::Cholesky {
        matrix: label,
        jitter: JITTER_MAX * scale,
    })
}

/// Cholesky that tries the matrix as given first and only then falls back to the
/// escalating jitter policy. Used for matrices that are PD by construction.
pub fn cholesky_or_jitter(k: &DMatrix<f64>, label: &'static str) -> Result<JitteredCholesky> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(label));
    }
    if let Some(factor) = try_factor(k, 0.0) {
        return Ok(JitteredCholesky {
            factor,
            jitter: 0.0,
            relative: 0.0,
        });
    }
    jittered_cholesky(k, label)
}
