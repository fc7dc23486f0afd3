//! Latent posteriors for held-out rows under a frozen model.
//!
//! Each test row gets its own slab mean and variance. The objective is the collapsed
//! bound of the chosen view with the test row's ψ-statistics added to the (fixed)
//! training statistics, minus the row's slab KL weighted by the activation probabilities.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bound::{collapsed_bound, Collapsed};
use crate::data::write_matrix_csv;
use crate::error::{Error, Result};
use crate::kernels::kernel_matrix;
use crate::model::{LatentModel, View};
use crate::optimize::{lbfgs, LbfgsOptions, OptConfig};
use crate::psi::{psi_backprop, psi_stats};
use crate::variational::{activation_prob, gauss_kl};

/// Initial slab variance for every test row.
pub const WARM_START_VAR: f64 = 0.5;

#[derive(Debug)]
pub struct InferredLatents {
    /// N*×Q slab means.
    pub mu: DMatrix<f64>,
    /// N*×Q slab variances.
    pub var: DMatrix<f64>,
    /// Objective at the returned values, per row.
    pub objective: Vec<f64>,
    /// Objective at the warm start, per row.
    pub warm_objective: Vec<f64>,
    /// Rows whose optimization failed; they keep their warm start.
    pub failures: Vec<(usize, Error)>,
}

impl InferredLatents {
    /// One row per test point: `μ*₁..μ*_Q, s*₁..s*_Q`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let (n, q) = self.mu.shape();
        DMatrix::from_fn(n, 2 * q, |i, j| if j < q { self.mu[(i, j)] } else { self.var[(i, j - q)] })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix_csv(path, &self.to_matrix(), None)
    }
}

struct PointProblem<'a> {
    view: &'a View,
    gamma: &'a DVector<f64>,
    weight: &'a DVector<f64>,
    train: &'a Collapsed,
    k: &'a DMatrix<f64>,
}

impl PointProblem<'_> {
    /// Objective and gradient in `(μ, ln s)` coordinates.
    fn eval(&self, y: &DMatrix<f64>, x: &DVector<f64>, with_grads: bool) -> Result<(f64, DVector<f64>)> {
        let q = self.gamma.len();
        let mu = DMatrix::from_row_slice(1, q, &x.as_slice()[..q]);
        let var = DMatrix::from_fn(1, q, |_, j| x[q + j].exp());
        if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::NonFinite("test slab variance"));
        }
        let kern = &self.view.kernel;
        let psi = psi_stats(kern, &mu, &var, self.gamma, &self.view.z)?;
        let point = Collapsed::new(y, &psi);
        let st = Collapsed {
            n: self.train.n + 1,
            psi0: self.train.psi0 + point.psi0,
            p: &self.train.p + &point.p,
            yy: &self.train.yy + &point.yy,
            psi2: &self.train.psi2 + &point.psi2,
        };
        let (per_dim, g) = collapsed_bound(&st, self.k, self.view.beta, with_grads)?;
        let kl: f64 = (0..q).map(|j| self.weight[j] * gauss_kl(mu[(0, j)], var[(0, j)])).sum();
        let value = per_dim.sum() - kl;
        let Some(g) = g else {
            return Ok((value, DVector::zeros(0)));
        };
        let g1 = y * g.p.transpose();
        let pg = psi_backprop(kern, &mu, &var, self.gamma, &self.view.z, &psi, g.psi0, &g1, &g.psi2);
        let grad = DVector::from_fn(2 * q, |i, _| {
            if i < q {
                pg.mu[(0, i)] - self.weight[i] * mu[(0, i)]
            } else {
                let j = i - q;
                let s = var[(0, j)];
                (pg.var[(0, j)] - self.weight[j] * 0.5 * (1.0 - 1.0 / s)) * s
            }
        });
        Ok((value, grad))
    }
}

fn nearest_row(y: &DMatrix<f64>, row: &DMatrix<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, r) in y.row_iter().enumerate() {
        let d = (r - row).norm_squared();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Infers `q(x*)` for each row of `y_star` from view `view` with every model parameter frozen.
pub fn infer_latent<M: LatentModel>(
    model: &M,
    view: usize,
    y_star: &DMatrix<f64>,
    config: &OptConfig,
) -> Result<InferredLatents> {
    let views = model.views();
    let v = views
        .get(view)
        .ok_or_else(|| Error::invalid("view", format!("model has {} views, got index {view}", views.len())))?;
    if y_star.ncols() != v.y.ncols() {
        return Err(Error::mismatch("test data columns", v.y.ncols(), y_star.ncols()));
    }
    if y_star.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("test data"));
    }
    config.validate()?;
    let q = model.q();
    let gammas = model.gammas();
    let gamma = &gammas[view];
    let weight = activation_prob(&gammas);
    let (mu, var) = (model.slab_mean(), model.slab_var());
    let psi = psi_stats(&v.kernel, mu, var, gamma, &v.z)?;
    let train = Collapsed::new(&v.y, &psi);
    let k = kernel_matrix(&v.kernel, &v.z, &v.z)?;
    let problem = PointProblem {
        view: v,
        gamma,
        weight: &weight,
        train: &train,
        k: &k,
    };
    let opts = LbfgsOptions {
        max_iters: config.max_iters,
        gtol: config.gtol,
        ftol: config.ftol,
        memory: 10,
    };

    let results: Vec<_> = (0..y_star.nrows())
        .into_par_iter()
        .map(|i| {
            let y = y_star.rows(i, 1).into_owned();
            let start = nearest_row(&v.y, &y);
            let mut x0 = DVector::zeros(2 * q);
            for j in 0..q {
                x0[j] = mu[(start, j)];
                x0[q + j] = WARM_START_VAR.ln();
            }
            let warm = problem.eval(&y, &x0, false).map(|(f, _)| f);
            let fitted = lbfgs(
                |x| problem.eval(&y, x, true).map(|(f, g)| (-f, -g)),
                x0.clone(),
                opts,
                |_, _, _| {},
            );
            (x0, warm, fitted)
        })
        .collect();

    let n_star = y_star.nrows();
    let mut out = InferredLatents {
        mu: DMatrix::zeros(n_star, q),
        var: DMatrix::zeros(n_star, q),
        objective: vec![f64::NAN; n_star],
        warm_objective: vec![f64::NAN; n_star],
        failures: Vec::new(),
    };
    for (i, (x0, warm, fitted)) in results.into_iter().enumerate() {
        let x = match (warm, fitted) {
            (Ok(w), Ok(r)) => {
                out.warm_objective[i] = w;
                out.objective[i] = -r.f;
                r.x
            }
            (w, r) => {
                let err = match (w, r) {
                    (Err(e), _) | (Ok(_), Err(e)) => e,
                    _ => unreachable!(),
                };
                log::warn!("test row {i}: {err}");
                out.failures.push((i, err));
                x0
            }
        };
        for j in 0..q {
            out.mu[(i, j)] = x[j];
            out.var[(i, j)] = x[q + j].exp();
        }
    }
    Ok(out)
}
