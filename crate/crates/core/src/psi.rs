//! Closed-form ψ-statistics under the spike-and-slab posterior.
//!
//! For a gated input `b ∘ x` with `b_q ~ Bernoulli(γ_q)` and `x_q | b_q = 1 ~ N(μ_q, s_q)`:
//!
//! * `ψ₀ = Σ_n E[k(b∘x_n, b∘x_n)]`
//! * `Ψ₁[n, m] = E[k(b∘x_n, z_m)]`
//! * `Ψ₂[m, m'] = Σ_n E[k(b∘x_n, z_m) k(z_m', b∘x_n)]`
//!
//! For `ExpQuad` every expectation factorises over latent dimensions into a
//! two-component mixture: the Gaussian convolution of the slab (switch on) and the
//! kernel evaluated at a zeroed input (switch off). Per-dimension factors are
//! combined in log space.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::variational::check_slab;

/// Expectations of kernel quantities under the variational posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiStats {
    pub psi0: f64,
    pub psi1: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
}

fn validate(
    spec: &KernelSpec,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gamma: &DVector<f64>,
    z: &DMatrix<f64>,
) -> Result<()> {
    check_slab(mu, var)?;
    let q = mu.ncols();
    if gamma.len() != q {
        return Err(Error::mismatch("psi gamma length", q, gamma.len()));
    }
    if z.ncols() != q {
        return Err(Error::mismatch("inducing input columns", q, z.ncols()));
    }
    if gamma.iter().any(|g| !(*g >= 0.0 && *g <= 1.0)) {
        return Err(Error::invalid("gamma", "must lie in [0, 1]"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inducing inputs"));
    }
    spec.validate(q)
}

/// ψ-statistics for the exponentiated quadratic kernel.
pub fn psi_expquad(
    spec: &KernelSpec,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gamma: &DVector<f64>,
    z: &DMatrix<f64>,
) -> Result<PsiStats> {
    if spec.family != KernelFamily::ExpQuad {
        return Err(Error::invalid("kernel", "psi_expquad requires an expquad kernel"));
    }
    validate(spec, mu, var, gamma, z)?;
    Ok(expquad_forward(spec, mu, var, gamma, z))
}

/// ψ-statistics for the linear kernel.
pub fn psi_linear(
    spec: &KernelSpec,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gamma: &DVector<f64>,
    z: &DMatrix<f64>,
) -> Result<PsiStats> {
    if spec.family != KernelFamily::Linear {
        return Err(Error::invalid("kernel", "psi_linear requires a linear kernel"));
    }
    validate(spec, mu, var, gamma, z)?;
    Ok(linear_forward(spec, mu, var, gamma, z))
}

/// Dispatches on the kernel family.
pub fn psi_stats(
    spec: &KernelSpec,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gamma: &DVector<f64>,
    z: &DMatrix<f64>,
) -> Result<PsiStats> {
    match spec.family {
        KernelFamily::ExpQuad => psi_expquad(spec, mu, var, gamma, z),
        KernelFamily::Linear => psi_linear(spec, mu, var, gamma, z),
    }
}

/// `ln(e^a + e^b)`, tolerating `-inf` arguments.
fn log_add_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

fn ln_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Per-dimension pieces of the Ψ₁ mixture.
struct Psi1Factor {
    log_on: f64,
    log_off: f64,
    log_f: f64,
}

#[inline]
fn psi1_factor(mu: f64, s: f64, z: f64, l2: f64, ln_g: f64, ln_1g: f64) -> Psi1Factor {
    let den = s + l2;
    let d = mu - z;
    let log_on = 0.5 * (l2 / den).ln() - 0.5 * d * d / den;
    let log_off = -0.5 * z * z / l2;
    let log_f = log_add_exp(ln_g + log_on, ln_1g + log_off);
    Psi1Factor {
        log_on,
        log_off,
        log_f,
    }
}

/// Per-dimension pieces of the Ψ₂ mixture for the pair `(z_a, z_b)`.
struct Psi2Factor {
    log_on: f64,
    log_off: f64,
    log_g: f64,
}

#[inline]
fn psi2_factor(mu: f64, s: f64, za: f64, zb: f64, l2: f64, ln_g: f64, ln_1g: f64) -> Psi2Factor {
    let den = 2.0 * s + l2;
    let dz = za - zb;
    let d = mu - 0.5 * (za + zb);
    let log_on = 0.5 * (l2 / den).ln() - 0.25 * dz * dz / l2 - d * d / den;
    let log_off = -0.5 * (za * za + zb * zb) / l2;
    let log_g = log_add_exp(ln_g + log_on, ln_1g + log_off);
    Psi2Factor {
        log_on,
        log_off,
        log_g,
    }
}

struct GateLogs {
    ln_g: Vec<f64>,
    ln_1g: Vec<f64>,
    l2: Vec<f64>,
}

fn gate_logs(spec: &KernelSpec, gamma: &DVector<f64>) -> GateLogs {
    GateLogs {
        ln_g: gamma.iter().map(|g| ln_or_neg_inf(*g)).collect(),
        ln_1g: gamma.iter().map(|g| ln_or_neg_inf(1.0 - g)).collect(),
        l2: spec.lengthscales.iter().map(|l| l * l).collect(),
    }
}

fn expquad_forward(
    spec: &KernelSpec,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gamma: &DVector<f64>,
    z: &DMatrix<f64>,
) -> PsiStats {
    let (n, q) = mu.shape();
    let m = z.nrows();
    let gl = gate_logs(spec, gamma);
    let sf2 = spec.variance;

    // Per-point rows of Ψ₁ and upper triangles of the Ψ₂ summand, reduced in ascending n.
    let per_point: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row1 = vec![0.0; m];
            for (a, r) in row1.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..q {
                    acc += psi1_factor(mu[(i, j)], var[(i, j)], z[(a, j)], gl.l2[j], gl.ln_g[j], gl.ln_1g[j]).log_f;
                }
                *r = sf2 * acc.exp();
            }
            let mut tri = vec![0.0; m * (m + 1) / 2];
            let mut k = 0;
            for a in 0..m {
                for b in a..m {
                    let mut acc = 0.0;
                    for j in 0..q {
                        acc += psi2_factor(
                            mu[(i, j)],
                            var[(i, j)],
                            z[(a, j)],
                            z[(b, j)],
                            gl.l2[j],
                            gl.ln_g[j],
                            gl.ln_1g[j],
                        )
                        .log_g;
                    }
                    tri[k] = acc.exp();
                    k += 1;
                }
            }
            (row1, tri)
        })
        .collect();

    let mut psi1 = DMatrix::zeros(n, m);
    let mut tri_sum = vec![0.0; m * (m + 1) / 2];
    for (i, (row1, tri)) in per_point.iter().enumerate() {
        for a in 0..m {
            psi1[(i, a)] = row1[a];
        }
        for (acc, v) in tri_sum.iter_mut().zip(tri) {
            *acc += v;
        }
    }
    let psi2 = unpack_tri(&tri_sum, m, sf2 * sf2);
    PsiStats {
        psi0: n as f64 * sf2,
        psi1,
        psi2,
    }
}

fn unpack_tri(tri: &[f64], m: usize, scale: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m, m);
    let mut k = 0;
    for a in 0..m {
        for b in a..m {
            let v = scale * tri[k];
            out[(a, b)] = v;
            out[(b, a)] = v;
            k += 1;
        }
    }
    out
}

/// `C = Σ_n [diag(γ(μ² + s) − γ²μ²) + (γ∘μ_n)(γ∘μ_n)ᵀ]`, so that `Ψ₂ = σ⁴ Z C Zᵀ`.
fn linear_moment(mu: &DMatrix<f64>, var: &DMatrix<f64>, gamma: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, q) = mu.shape();
    let mg = DMatrix::from_fn(n, q, |i, j| gamma[j] * mu[(i, j)]);
    let mut c = mg.transpose() * &mg;
    for j in 0..q {
        let mut d = 0.0;
        for i in 0..n {
            let m2 = mu[(i, j)] * mu[(i, j)];
            d += gamma[j] * (m2 + var[(i, j)]) - gamma[j] * gamma[j] * m2;
        }
        c[(j, j)] += d;
    }
    (mg, c)
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    let mut out = a.clone();
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

fn linear_forward(
    spec: &KernelSpec,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gamma: &DVector<f64>,
    z: &DMatrix<f64>,
) -> PsiStats {
    let (n, q) = mu.shape();
    let sf2 = spec.variance;
    let mut psi0 = 0.0;
    for i in 0..n {
        for j in 0..q {
            psi0 += gamma[j] * (mu[(i, j)] * mu[(i, j)] + var[(i, j)]);
        }
    }
    let (mg, c) = linear_moment(mu, var, gamma);
    let psi1 = (&mg * z.transpose()) * sf2;
    let psi2 = symmetrize(&(z * c * z.transpose())) * (sf2 * sf2);
    PsiStats {
        psi0: sf2 * psi0,
        psi1,
        psi2,
    }
}

/// Gradients of a scalar objective through the ψ-statistics.
#[derive(Debug, Clone)]
pub(crate) struct PsiGrads {
    pub mu: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub z: DMatrix<f64>,
    pub variance: f64,
    /// With respect to ℓ_q.
    pub lengthscales: Vec<f64>,
}

/// Chains `dL/dψ₀`, `dL/dΨ₁`, `dL/dΨ₂` back onto the posterior, inducing inputs and
/// kernel hyperparameters. `stats` must be the forward result for the same inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn psi_backprop(
    spec: &KernelSpec,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gamma: &DVector<f64>,
    z: &DMatrix<f64>,
    stats: &PsiStats,
    g0: f64,
    g1: &DMatrix<f64>,
    g2: &DMatrix<f64>,
) -> PsiGrads {
    match spec.family {
        KernelFamily::ExpQuad => expquad_backprop(spec, mu, var, gamma, z, stats, g0, g1, g2),
        KernelFamily::Linear => linear_backprop(spec, mu, var, gamma, z, stats, g0, g1, g2),
    }
}

struct PointGrads {
    mu: Vec<f64>,
    var: Vec<f64>,
    gamma: Vec<f64>,
    z: DMatrix<f64>,
    l2: Vec<f64>,
    variance: f64,
}

#[allow(clippy::too_many_arguments)]
fn expquad_backprop(
    spec: &KernelSpec,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gamma: &DVector<f64>,
    z: &DMatrix<f64>,
    stats: &PsiStats,
    g0: f64,
    g1: &DMatrix<f64>,
    g2: &DMatrix<f64>,
) -> PsiGrads {
    let (n, q) = mu.shape();
    let m = z.nrows();
    let gl = gate_logs(spec, gamma);
    let sf2 = spec.variance;
    let sf4 = sf2 * sf2;

    let per_point: Vec<PointGrads> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut pg = PointGrads {
                mu: vec![0.0; q],
                var: vec![0.0; q],
                gamma: vec![0.0; q],
                z: DMatrix::zeros(m, q),
                l2: vec![0.0; q],
                variance: 0.0,
            };

            for a in 0..m {
                let w = g1[(i, a)] * stats.psi1[(i, a)];
                if w == 0.0 {
                    continue;
                }
                pg.variance += w / sf2;
                for j in 0..q {
                    let (s, l2, zz) = (var[(i, j)], gl.l2[j], z[(a, j)]);
                    let f = psi1_factor(mu[(i, j)], s, zz, l2, gl.ln_g[j], gl.ln_1g[j]);
                    let r_on = (gl.ln_g[j] + f.log_on - f.log_f).exp();
                    let r_off = (gl.ln_1g[j] + f.log_off - f.log_f).exp();
                    let den = s + l2;
                    let d = mu[(i, j)] - zz;
                    pg.mu[j] += w * r_on * (-d / den);
                    pg.var[j] += w * r_on * (-0.5 / den + 0.5 * d * d / (den * den));
                    pg.z[(a, j)] += w * (r_on * d / den - r_off * zz / l2);
                    pg.l2[j] += w
                        * (r_on * (0.5 / l2 - 0.5 / den + 0.5 * d * d / (den * den))
                            + r_off * 0.5 * zz * zz / (l2 * l2));
                    pg.gamma[j] += w * gate_ratio(r_on, r_off, gamma[j]);
                }
            }

            for a in 0..m {
                for b in a..m {
                    let gw = if a == b { g2[(a, a)] } else { g2[(a, b)] + g2[(b, a)] };
                    if gw == 0.0 {
                        continue;
                    }
                    let mut acc = 0.0;
                    let mut parts = Vec::with_capacity(q);
                    for j in 0..q {
                        let f = psi2_factor(mu[(i, j)], var[(i, j)], z[(a, j)], z[(b, j)], gl.l2[j], gl.ln_g[j], gl.ln_1g[j]);
                        acc += f.log_g;
                        parts.push(f);
                    }
                    let w = gw * sf4 * acc.exp();
                    if w == 0.0 {
                        continue;
                    }
                    pg.variance += 2.0 * w / sf2;
                    for (j, f) in parts.iter().enumerate() {
                        let (s, l2) = (var[(i, j)], gl.l2[j]);
                        let (za, zb) = (z[(a, j)], z[(b, j)]);
                        let r_on = (gl.ln_g[j] + f.log_on - f.log_g).exp();
                        let r_off = (gl.ln_1g[j] + f.log_off - f.log_g).exp();
                        let den = 2.0 * s + l2;
                        let dz = za - zb;
                        let d = mu[(i, j)] - 0.5 * (za + zb);
                        pg.mu[j] += w * r_on * (-2.0 * d / den);
                        pg.var[j] += w * r_on * (-1.0 / den + 2.0 * d * d / (den * den));
                        pg.z[(a, j)] += w * (r_on * (-0.5 * dz / l2 + d / den) - r_off * za / l2);
                        pg.z[(b, j)] += w * (r_on * (0.5 * dz / l2 + d / den) - r_off * zb / l2);
                        pg.l2[j] += w
                            * (r_on
                                * (0.5 / l2 - 0.5 / den + 0.25 * dz * dz / (l2 * l2) + d * d / (den * den))
                                + r_off * 0.5 * (za * za + zb * zb) / (l2 * l2));
                        pg.gamma[j] += w * gate_ratio(r_on, r_off, gamma[j]);
                    }
                }
            }
            pg
        })
        .collect();

    let mut out = PsiGrads {
        mu: DMatrix::zeros(n, q),
        var: DMatrix::zeros(n, q),
        gamma: DVector::zeros(q),
        z: DMatrix::zeros(m, q),
        variance: g0 * n as f64,
        lengthscales: vec![0.0; q],
    };
    let mut gl2 = vec![0.0; q];
    for (i, pg) in per_point.into_iter().enumerate() {
        for j in 0..q {
            out.mu[(i, j)] = pg.mu[j];
            out.var[(i, j)] = pg.var[j];
            out.gamma[j] += pg.gamma[j];
            gl2[j] += pg.l2[j];
        }
        out.z += pg.z;
        out.variance += pg.variance;
    }
    for j in 0..q {
        out.lengthscales[j] = gl2[j] * 2.0 * spec.lengthscales[j];
    }
    out
}

/// `(∂F/∂γ) / F` for a mixture `F = γ·on + (1-γ)·off`, written through the
/// responsibilities `r_on = γ·on/F` and `r_off = (1-γ)·off/F`.
#[inline]
fn gate_ratio(r_on: f64, r_off: f64, gamma: f64) -> f64 {
    let a = if gamma > 0.0 { r_on / gamma } else { 0.0 };
    let b = if gamma < 1.0 { r_off / (1.0 - gamma) } else { 0.0 };
    a - b
}

#[allow(clippy::too_many_arguments)]
fn linear_backprop(
    spec: &KernelSpec,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gamma: &DVector<f64>,
    z: &DMatrix<f64>,
    stats: &PsiStats,
    g0: f64,
    g1: &DMatrix<f64>,
    g2: &DMatrix<f64>,
) -> PsiGrads {
    let (n, q) = mu.shape();
    let sf2 = spec.variance;
    let sf4 = sf2 * sf2;
    let (mg, c) = linear_moment(mu, var, gamma);
    let g2s = symmetrize(g2);
    let gc = (z.transpose() * &g2s * z) * sf4;
    let gcs = &gc + gc.transpose();
    let dmg = &mg * &gcs + (g1 * z) * sf2;

    let mut gmu = DMatrix::zeros(n, q);
    let mut gvar = DMatrix::zeros(n, q);
    let mut ggamma = DVector::zeros(q);
    for j in 0..q {
        let gj = gamma[j];
        let cjj = gc[(j, j)];
        let mut acc = 0.0;
        for i in 0..n {
            let m = mu[(i, j)];
            let s = var[(i, j)];
            gmu[(i, j)] = cjj * (2.0 * gj * m - 2.0 * gj * gj * m) + gj * dmg[(i, j)] + g0 * sf2 * 2.0 * gj * m;
            gvar[(i, j)] = cjj * gj + g0 * sf2 * gj;
            acc += cjj * (m * m + s - 2.0 * gj * m * m) + m * dmg[(i, j)] + g0 * sf2 * (m * m + s);
        }
        ggamma[j] = acc;
    }
    let gz = (&g2s * z * &c) * (2.0 * sf4) + (g1.transpose() * &mg) * sf2;
    let variance = (g0 * stats.psi0
        + g1.component_mul(&stats.psi1).sum()
        + 2.0 * g2.component_mul(&stats.psi2).sum())
        / sf2;
    PsiGrads {
        mu: gmu,
        var: gvar,
        gamma: ggamma,
        z: gz,
        variance,
        lengthscales: Vec::new(),
    }
}
