//! The collapsed variational lower bound and its analytic gradients.
//!
//! For one view with `A = βΨ₂ + K`, `P = Ψ₁ᵀY` and `B = A⁻¹P`, output column `d` contributes
//!
//! ```text
//! F_d = ½[N ln β − N ln 2π + ln|K| − ln|A|] − β/2 y_dᵀy_d + β²/2 p_dᵀ A⁻¹ p_d
//!       − βψ₀/2 + β/2 tr(K⁻¹Ψ₂)
//! ```
//!
//! and the bound is `Σ_c Σ_d F_d − KL`. The value only needs triangular solves; the
//! gradients use the inverses of the two Cholesky factors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{cholesky_or_jitter, jittered_cholesky, kernel_matrix, kernel_matrix_backprop, JitteredCholesky};
use crate::model::{gamma_logit_jacobian, logit_from_gamma, LatentModel, ParamGroup, ParamLayout, View};
use crate::psi::{psi_backprop, psi_stats, PsiStats};
use crate::variational::kl_eval;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundTerms {
    /// Sum of the per-dimension data terms over all views.
    pub data_term: f64,
    pub kl_term: f64,
    pub total: f64,
    /// One entry per output column, views concatenated in order.
    pub per_dim: DVector<f64>,
}

/// Statistics of a view that the collapsed bound depends on.
#[derive(Debug, Clone)]
pub(crate) struct Collapsed {
    pub n: usize,
    pub psi0: f64,
    /// `Ψ₁ᵀY`, M×D.
    pub p: DMatrix<f64>,
    /// Column sums of squares of `Y`.
    pub yy: DVector<f64>,
    pub psi2: DMatrix<f64>,
}

impl Collapsed {
    pub fn new(y: &DMatrix<f64>, psi: &PsiStats) -> Self {
        Collapsed {
            n: y.nrows(),
            psi0: psi.psi0,
            p: psi.psi1.tr_mul(y),
            yy: DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.norm_squared())),
            psi2: psi.psi2.clone(),
        }
    }
}

/// Derivatives of `Σ_d F_d` with respect to the collapsed statistics.
#[derive(Debug, Clone)]
pub(crate) struct CollapsedGrads {
    pub psi0: f64,
    pub p: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
    /// With respect to the un-jittered `K_uu`.
    pub k: DMatrix<f64>,
    pub beta: f64,
}

fn lower_solve(chol: &JitteredCholesky, b: &DMatrix<f64>) -> DMatrix<f64> {
    chol.factor
        .l()
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal")
}

/// Per-dimension data terms and, optionally, their gradients.
pub(crate) fn collapsed_bound(
    st: &Collapsed,
    k: &DMatrix<f64>,
    beta: f64,
    with_grads: bool,
) -> Result<(DVector<f64>, Option<CollapsedGrads>)> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid("beta", format!("must be positive, got {beta}")));
    }
    let m = k.nrows();
    let d = st.p.ncols();
    let nf = st.n as f64;
    let chol_k = jittered_cholesky(k, "K_uu")?;
    let mut kj = k.clone();
    for i in 0..m {
        kj[(i, i)] += chol_k.jitter;
    }
    let a = &st.psi2 * beta + &kj;
    let a = (&a + a.transpose()) * 0.5;
    let chol_a = cholesky_or_jitter(&a, "beta*Psi2 + K_uu")?;

    let lk_psi2 = lower_solve(&chol_k, &st.psi2);
    let tr_kinv_psi2 = lower_solve(&chol_k, &lk_psi2.transpose()).trace();
    let la_p = lower_solve(&chol_a, &st.p);

    let common = 0.5 * (nf * beta.ln() - nf * LN_2PI + chol_k.log_det() - chol_a.log_det())
        - 0.5 * beta * st.psi0
        + 0.5 * beta * tr_kinv_psi2;
    let per_dim = DVector::from_fn(d, |j, _| {
        common - 0.5 * beta * st.yy[j] + 0.5 * beta * beta * la_p.column(j).norm_squared()
    });
    if per_dim.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("data term"));
    }
    if !with_grads {
        return Ok((per_dim, None));
    }

    let df = d as f64;
    let kinv = chol_k.inverse();
    let ainv = chol_a.inverse();
    let b = chol_a.solve(&st.p);
    let bbt = &b * b.transpose();
    let kinv_psi2 = &kinv * &st.psi2;

    let g_psi2 = &ainv * (-0.5 * df * beta) - &bbt * (0.5 * beta.powi(3)) + &kinv * (0.5 * df * beta);
    let mut g_k = &kinv * (0.5 * df) - &ainv * (0.5 * df) - &bbt * (0.5 * beta * beta)
        - (&kinv_psi2 * &kinv) * (0.5 * df * beta);
    // K_j = K + rel·mean(diag K)·I with `rel` held fixed.
    let shift = chol_k.relative * g_k.trace() / m as f64;
    for i in 0..m {
        g_k[(i, i)] += shift;
    }
    let yy: f64 = st.yy.sum();
    let g_beta = df * nf / (2.0 * beta) - 0.5 * df * (&ainv * &st.psi2).trace() - 0.5 * yy
        + beta * st.p.dot(&b)
        - 0.5 * beta * beta * b.dot(&(&st.psi2 * &b))
        - 0.5 * df * st.psi0
        + 0.5 * df * tr_kinv_psi2;

    Ok((
        per_dim,
        Some(CollapsedGrads {
            psi0: -0.5 * df * beta,
            p: b * (beta * beta),
            psi2: g_psi2,
            k: g_k,
            beta: g_beta,
        }),
    ))
}

/// `F̃_d` for a single output column.
pub fn data_term(y_d: &DVector<f64>, psi: &PsiStats, kuu: &DMatrix<f64>, beta: f64) -> Result<f64> {
    let m = kuu.nrows();
    if kuu.ncols() != m {
        return Err(Error::mismatch("K_uu columns", m, kuu.ncols()));
    }
    if psi.psi1.nrows() != y_d.len() {
        return Err(Error::mismatch("Psi1 rows", y_d.len(), psi.psi1.nrows()));
    }
    if psi.psi1.ncols() != m || psi.psi2.shape() != (m, m) {
        return Err(Error::mismatch("psi statistics inducing size", m, psi.psi1.ncols()));
    }
    let y = DMatrix::from_column_slice(y_d.len(), 1, y_d.as_slice());
    let (per_dim, _) = collapsed_bound(&Collapsed::new(&y, psi), kuu, beta, false)?;
    Ok(per_dim[0])
}

/// Gradients of one view's data term with respect to its own and the shared parameters.
struct ViewGrads {
    mu: DMatrix<f64>,
    var: DMatrix<f64>,
    gamma: DVector<f64>,
    z: DMatrix<f64>,
    variance: f64,
    lengthscales: Vec<f64>,
    beta: f64,
}

fn view_bound(
    view: &View,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gamma: &DVector<f64>,
    with_grads: bool,
) -> Result<(DVector<f64>, Option<ViewGrads>)> {
    let psi = psi_stats(&view.kernel, mu, var, gamma, &view.z)?;
    let k = kernel_matrix(&view.kernel, &view.z, &view.z)?;
    let (per_dim, g) = collapsed_bound(&Collapsed::new(&view.y, &psi), &k, view.beta, with_grads)?;
    let Some(g) = g else {
        return Ok((per_dim, None));
    };
    let g1 = &view.y * g.p.transpose();
    let pg = psi_backprop(&view.kernel, mu, var, gamma, &view.z, &psi, g.psi0, &g1, &g.psi2);
    let kg = kernel_matrix_backprop(&view.kernel, &view.z, &k, &g.k);
    let lengthscales = pg
        .lengthscales
        .iter()
        .zip(kg.lengthscales.iter().chain(std::iter::repeat(&0.0)))
        .map(|(a, b)| a + b)
        .collect();
    Ok((
        per_dim,
        Some(ViewGrads {
            mu: pg.mu,
            var: pg.var,
            gamma: pg.gamma,
            z: pg.z + kg.z,
            variance: pg.variance + kg.variance,
            lengthscales,
            beta: g.beta,
        }),
    ))
}

fn evaluate<M: LatentModel>(model: &M, with_grads: bool) -> Result<(BoundTerms, Option<DVector<f64>>)> {
    let mu = model.slab_mean();
    let var = model.slab_var();
    let gammas = model.gammas();
    let mut per_dim = Vec::new();
    let mut view_grads = Vec::new();
    for (view, gamma) in model.views().iter().zip(&gammas) {
        let (f, g) = view_bound(view, mu, var, gamma, with_grads)?;
        per_dim.extend(f.iter().copied());
        view_grads.push(g);
    }
    let (kl_term, kl_grads) = kl_eval(mu, var, &gammas, model.prior().pi, with_grads);
    if !kl_term.is_finite() {
        return Err(Error::NonFinite("KL term"));
    }
    let per_dim = DVector::from_vec(per_dim);
    let data_term = per_dim.sum();
    let terms = BoundTerms {
        data_term,
        kl_term,
        total: data_term - kl_term,
        per_dim,
    };
    if !with_grads {
        return Ok((terms, None));
    }
    let kl = kl_grads.expect("requested");

    let layout = ParamLayout::of(model);
    let mut out = DVector::zeros(layout.len);
    let q = model.q();
    let mut dmu = -kl.mu;
    let mut dvar = -kl.var;
    for g in view_grads.iter().flatten() {
        dmu += &g.mu;
        dvar += &g.var;
    }
    for (group, view, range) in &layout.blocks {
        let dst = &mut out.as_mut_slice()[range.clone()];
        match (group, view) {
            (ParamGroup::Mu, _) => {
                for (k, v) in dst.iter_mut().enumerate() {
                    *v = dmu[(k / q, k % q)];
                }
            }
            (ParamGroup::Var, _) => {
                for (k, v) in dst.iter_mut().enumerate() {
                    let (i, j) = (k / q, k % q);
                    *v = dvar[(i, j)] * var[(i, j)];
                }
            }
            (ParamGroup::Gamma, Some(c)) => {
                let g = view_grads[*c].as_ref().expect("requested");
                for (j, v) in dst.iter_mut().enumerate() {
                    let t = logit_from_gamma(gammas[*c][j]);
                    *v = (g.gamma[j] - kl.gamma[*c][j]) * gamma_logit_jacobian(t);
                }
            }
            (ParamGroup::Inducing, Some(c)) => {
                let g = view_grads[*c].as_ref().expect("requested");
                for (k, v) in dst.iter_mut().enumerate() {
                    *v = g.z[(k / q, k % q)];
                }
            }
            (ParamGroup::Kernel, Some(c)) => {
                let g = view_grads[*c].as_ref().expect("requested");
                let kern = &model.views()[*c].kernel;
                dst[0] = g.variance * kern.variance;
                for (j, l) in kern.lengthscales.iter().enumerate() {
                    dst[1 + j] = g.lengthscales[j] * l;
                }
            }
            (ParamGroup::Beta, Some(c)) => {
                let g = view_grads[*c].as_ref().expect("requested");
                dst[0] = g.beta * model.views()[*c].beta;
            }
            _ => unreachable!("per-view block without a view index"),
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bound gradient"));
    }
    Ok((terms, Some(out)))
}

/// Evaluates the lower bound for a single- or multi-view model.
pub fn elbo<M: LatentModel>(model: &M) -> Result<BoundTerms> {
    Ok(evaluate(model, false)?.0)
}

/// Gradient of `elbo(model).total` with respect to the packed parameter vector.
pub fn elbo_gradients<M: LatentModel>(model: &M) -> Result<DVector<f64>> {
    Ok(evaluate(model, true)?.1.expect("requested"))
}

/// Bound and gradient from a single pass.
pub fn elbo_with_gradients<M: LatentModel>(model: &M) -> Result<(BoundTerms, DVector<f64>)> {
    let (t, g) = evaluate(model, true)?;
    Ok((t, g.expect("requested")))
}
