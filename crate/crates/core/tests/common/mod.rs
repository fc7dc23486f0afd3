//! Independent reference computations shared by integration tests and the acceptance run.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use sslvm::bound::elbo;
use sslvm::data::generate_synthetic;
use sslvm::eval::signal_recovery_report;
use sslvm::kernels::{kernel_eval, KernelFamily, KernelSpec};
use sslvm::model::{init_model, init_mrd, pack, unpack, InitStrategy, LatentModel, Mrd, SsGplvm, View};
use sslvm::optimize::{fit, OptConfig};
use sslvm::variational::{MrdSwitchPosterior, SsPosterior, SsPrior};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * r.random::<f64>()
}

pub fn random_kernel(r: &mut ChaCha8Rng, family: KernelFamily, q: usize) -> KernelSpec {
    match family {
        KernelFamily::Linear => KernelSpec::linear(uniform(r, 0.5, 1.5)),
        KernelFamily::ExpQuad => KernelSpec::exp_quad(
            uniform(r, 0.5, 1.5),
            (0..q).map(|_| uniform(r, 0.8, 2.0)).collect(),
        ),
    }
}

/// Inducing inputs on a jittered grid so that `K_uu` stays well conditioned.
pub fn spread_z(r: &mut ChaCha8Rng, m: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, q, |i, j| {
        let base = -1.5 + 3.0 * i as f64 / (m.max(2) - 1) as f64;
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        sign * base + 0.2 * normal(r)
    })
}

/// Linear views get at most `q` inducing points, since a linear `K_uu` has rank `q`.
pub fn random_view(r: &mut ChaCha8Rng, family: KernelFamily, n: usize, q: usize, m: usize, d: usize) -> View {
    let m = if family == KernelFamily::Linear { m.min(q) } else { m };
    View {
        y: DMatrix::from_fn(n, d, |_, _| normal(r)),
        kernel: random_kernel(r, family, q),
        beta: uniform(r, 2.0, 8.0),
        z: spread_z(r, m, q),
    }
}

pub fn random_slab(r: &mut ChaCha8Rng, n: usize, q: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_fn(n, q, |_, _| normal(r)),
        DMatrix::from_fn(n, q, |_, _| uniform(r, 0.1, 0.9)),
    )
}

pub fn random_gamma(r: &mut ChaCha8Rng, q: usize) -> DVector<f64> {
    DVector::from_fn(q, |_, _| uniform(r, 0.1, 0.9))
}

pub fn random_ss(seed: u64, family: KernelFamily, n: usize, q: usize, m: usize, d: usize) -> SsGplvm {
    let mut r = rng(seed);
    let view = random_view(&mut r, family, n, q, m, d);
    let (mu, var) = random_slab(&mut r, n, q);
    let gamma = random_gamma(&mut r, q);
    let pi = uniform(&mut r, 0.2, 0.8);
    SsGplvm::new(view, SsPosterior::new(mu, var, gamma).unwrap(), SsPrior::new(pi).unwrap()).unwrap()
}

pub fn random_mrd(seed: u64, families: &[KernelFamily], n: usize, q: usize, m: usize, d: usize) -> Mrd {
    let mut r = rng(seed);
    let views: Vec<View> = families
        .iter()
        .map(|f| random_view(&mut r, *f, n, q, m, d))
        .collect();
    let (mu, var) = random_slab(&mut r, n, q);
    let gamma = DMatrix::from_fn(families.len(), q, |_, _| uniform(&mut r, 0.1, 0.9));
    let pi = uniform(&mut r, 0.2, 0.8);
    Mrd::new(
        views,
        mu,
        var,
        MrdSwitchPosterior::new(gamma).unwrap(),
        SsPrior::new(pi).unwrap(),
    )
    .unwrap()
}

/// Monte Carlo mean and standard error of a statistic.
#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

/// ψ-statistics estimated by sampling `b_q ~ Bernoulli(γ_q)` (shared across rows) and
/// `x_nq ~ N(μ_nq, s_nq)`, then evaluating the kernel on `b ∘ x_n`.
pub struct PsiEstimate {
    pub psi0: Estimate,
    pub psi1: Vec<Vec<Estimate>>,
    pub psi2: Vec<Vec<Estimate>>,
}

pub fn mc_psi(
    spec: &KernelSpec,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gamma: &DVector<f64>,
    z: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> PsiEstimate {
    let (n, q) = mu.shape();
    let m = z.nrows();
    let zr: Vec<Vec<f64>> = (0..m).map(|a| z.row(a).iter().copied().collect()).collect();
    let n_stats = 1 + n * m + m * m;
    let mut sum = vec![0.0; n_stats];
    let mut sum_sq = vec![0.0; n_stats];
    let mut r = rng(seed);
    let mut vals = vec![0.0; n_stats];
    let mut x = vec![0.0; q];
    let mut k1 = vec![0.0; m];
    for _ in 0..samples {
        let b: Vec<bool> = (0..q).map(|j| r.random::<f64>() < gamma[j]).collect();
        vals.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            for j in 0..q {
                x[j] = if b[j] { mu[(i, j)] + var[(i, j)].sqrt() * normal(&mut r) } else { 0.0 };
            }
            vals[0] += kernel_eval(spec, &x, &x).unwrap();
            for a in 0..m {
                k1[a] = kernel_eval(spec, &x, &zr[a]).unwrap();
                vals[1 + i * m + a] = k1[a];
            }
            for a in 0..m {
                for c in 0..m {
                    vals[1 + n * m + a * m + c] += k1[a] * k1[c];
                }
            }
        }
        for (k, v) in vals.iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let s = samples as f64;
    let est = |k: usize| {
        let mean = sum[k] / s;
        let var = ((sum_sq[k] / s - mean * mean) * s / (s - 1.0)).max(0.0);
        Estimate {
            mean,
            se: (var / s).sqrt(),
        }
    };
    PsiEstimate {
        psi0: est(0),
        psi1: (0..n).map(|i| (0..m).map(|a| est(1 + i * m + a)).collect()).collect(),
        psi2: (0..m).map(|a| (0..m).map(|c| est(1 + n * m + a * m + c)).collect()).collect(),
    }
}

/// Largest |closed form − estimate| / SE over all ψ entries (entries with negligible SE
/// must agree to `1e-9` relative instead).
pub fn psi_z_score(exact: &sslvm::psi::PsiStats, est: &PsiEstimate) -> f64 {
    let z = |e: f64, s: &Estimate| {
        let diff = (e - s.mean).abs();
        if s.se <= 1e-12 * e.abs().max(1.0) {
            if diff <= 1e-9 * e.abs().max(1.0) {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / s.se
        }
    };
    let mut worst = z(exact.psi0, &est.psi0);
    for (i, row) in est.psi1.iter().enumerate() {
        for (a, s) in row.iter().enumerate() {
            worst = worst.max(z(exact.psi1[(i, a)], s));
        }
    }
    for (a, row) in est.psi2.iter().enumerate() {
        for (c, s) in row.iter().enumerate() {
            worst = worst.max(z(exact.psi2[(a, c)], s));
        }
    }
    worst
}

/// One random ψ instance: N ≤ 5, Q ≤ 3, M ≤ 3.
pub struct PsiInstance {
    pub spec: KernelSpec,
    pub mu: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub z: DMatrix<f64>,
}

pub fn psi_instance(seed: u64, family: KernelFamily) -> PsiInstance {
    let mut r = rng(seed);
    let n = r.random_range(1..=5);
    let q = r.random_range(1..=3);
    let m = r.random_range(1..=3);
    let (mu, var) = random_slab(&mut r, n, q);
    PsiInstance {
        spec: random_kernel(&mut r, family, q),
        mu,
        var,
        gamma: random_gamma(&mut r, q),
        z: DMatrix::from_fn(m, q, |_, _| normal(&mut r)),
    }
}

/// Worst z-score across 20 instances (10 per kernel), each with `samples` draws.
pub fn psi_oracle_sweep(samples: usize) -> f64 {
    (0..20u64)
        .into_par_iter()
        .map(|k| {
            let family = if k % 2 == 0 { KernelFamily::ExpQuad } else { KernelFamily::Linear };
            let inst = psi_instance(1000 + k, family);
            let exact = sslvm::psi::psi_stats(&inst.spec, &inst.mu, &inst.var, &inst.gamma, &inst.z).unwrap();
            let est = mc_psi(&inst.spec, &inst.mu, &inst.var, &inst.gamma, &inst.z, samples, 7 + k);
            psi_z_score(&exact, &est)
        })
        .reduce(|| 0.0, f64::max)
}

fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

/// Monte Carlo estimate of `KL(q(B, X) ‖ p(B) p(X))`. `gammas` has one row per view;
/// a dimension follows its slab when any view switches it on and the prior otherwise.
pub fn mc_kl(mu: &DMatrix<f64>, var: &DMatrix<f64>, gammas: &DMatrix<f64>, pi: f64, samples: usize, seed: u64) -> Estimate {
    let (n, q) = mu.shape();
    let c = gammas.nrows();
    let mut r = rng(seed);
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let mut lr = 0.0;
        for j in 0..q {
            let mut any = false;
            for k in 0..c {
                let g = gammas[(k, j)];
                if r.random::<f64>() < g {
                    any = true;
                    lr += (g / pi).ln();
                } else {
                    lr += ((1.0 - g) / (1.0 - pi)).ln();
                }
            }
            if any {
                for i in 0..n {
                    let x = mu[(i, j)] + var[(i, j)].sqrt() * normal(&mut r);
                    lr += ln_normal(x, mu[(i, j)], var[(i, j)]) - ln_normal(x, 0.0, 1.0);
                }
            }
        }
        s1 += lr;
        s2 += lr * lr;
    }
    let s = samples as f64;
    let mean = s1 / s;
    Estimate {
        mean,
        se: (((s2 / s - mean * mean) * s / (s - 1.0)).max(0.0) / s).sqrt(),
    }
}

/// Bayesian GP-LVM bound (no switches) written out with dense inverses and LU determinants.
/// `K_uu` gets the same relative jitter as the library.
pub fn bgplvm_bound(
    y: &DMatrix<f64>,
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    spec: &KernelSpec,
    z: &DMatrix<f64>,
    beta: f64,
) -> f64 {
    let (n, q) = mu.shape();
    let d = y.ncols() as f64;
    let m = z.nrows();
    let sf2 = spec.variance;
    let (psi0, psi1, psi2) = match spec.family {
        KernelFamily::ExpQuad => {
            let l2: Vec<f64> = spec.lengthscales.iter().map(|l| l * l).collect();
            let psi0 = n as f64 * sf2;
            let psi1 = DMatrix::from_fn(n, m, |i, a| {
                let mut p = sf2;
                for j in 0..q {
                    let den = l2[j] + var[(i, j)];
                    p *= (l2[j] / den).sqrt() * (-0.5 * (mu[(i, j)] - z[(a, j)]).powi(2) / den).exp();
                }
                p
            });
            let psi2 = DMatrix::from_fn(m, m, |a, c| {
                let mut tot = 0.0;
                for i in 0..n {
                    let mut p = sf2 * sf2;
                    for j in 0..q {
                        let den = l2[j] + 2.0 * var[(i, j)];
                        let zbar = 0.5 * (z[(a, j)] + z[(c, j)]);
                        p *= (l2[j] / den).sqrt()
                            * (-(z[(a, j)] - z[(c, j)]).powi(2) / (4.0 * l2[j]) - (mu[(i, j)] - zbar).powi(2) / den)
                                .exp();
                    }
                    tot += p;
                }
                tot
            });
            (psi0, psi1, psi2)
        }
        KernelFamily::Linear => {
            let psi0 = sf2 * (0..n).map(|i| (0..q).map(|j| mu[(i, j)].powi(2) + var[(i, j)]).sum::<f64>()).sum::<f64>();
            let psi1 = mu * z.transpose() * sf2;
            let mut s = DMatrix::zeros(q, q);
            for i in 0..n {
                let mi = mu.row(i).transpose();
                s += &mi * mi.transpose();
                for j in 0..q {
                    s[(j, j)] += var[(i, j)];
                }
            }
            let psi2 = z * s * z.transpose() * (sf2 * sf2);
            (psi0, psi1, psi2)
        }
    };
    let mut k = DMatrix::from_fn(m, m, |a, c| {
        kernel_eval(
            spec,
            z.row(a).iter().copied().collect::<Vec<_>>().as_slice(),
            z.row(c).iter().copied().collect::<Vec<_>>().as_slice(),
        )
        .unwrap()
    });
    let jitter = 1e-6 * k.diagonal().mean();
    for a in 0..m {
        k[(a, a)] += jitter;
    }
    let a_mat = &k + &psi2 * beta;
    let k_inv = k.clone().try_inverse().unwrap();
    let a_inv = a_mat.clone().try_inverse().unwrap();
    let ln_det_k = k.clone().lu().determinant().ln();
    let ln_det_a = a_mat.clone().lu().determinant().ln();
    let p = psi1.transpose() * y;
    let yy = y.norm_squared();
    let fit_term = (p.transpose() * &a_inv * &p).trace();
    let data = -0.5 * n as f64 * d * (2.0 * PI).ln() + 0.5 * n as f64 * d * beta.ln() + 0.5 * d * (ln_det_k - ln_det_a)
        - 0.5 * beta * yy
        + 0.5 * beta * beta * fit_term
        - 0.5 * d * beta * psi0
        + 0.5 * d * beta * (&k_inv * &psi2).trace();
    let kl: f64 = mu
        .iter()
        .zip(var.iter())
        .map(|(m, s)| 0.5 * (s + m * m - 1.0 - s.ln()))
        .sum();
    data - kl
}

/// Worst gradient discrepancy over packed coordinates, as `(worst relative error among
/// entries whose magnitude clears the floor, worst absolute error among entries that
/// only pass through the floor, failure count)`.
pub fn gradient_check<M: LatentModel>(model: &M, h: f64, abs_floor: f64) -> (f64, f64, usize) {
    let g = sslvm::bound::elbo_gradients(model).unwrap();
    let theta = pack(model);
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut failures = 0;
    for i in 0..theta.len() {
        let mut a = theta.clone();
        a[i] += h;
        let mut b = theta.clone();
        b[i] -= h;
        let fa = elbo(&unpack(model, &a).unwrap()).unwrap().total;
        let fb = elbo(&unpack(model, &b).unwrap()).unwrap().total;
        let fd = (fa - fb) / (2.0 * h);
        let abs = (fd - g[i]).abs();
        let rel = abs / fd.abs().max(g[i].abs());
        let ok = abs < abs_floor || rel < 1e-5;
        if !ok {
            failures += 1;
        }
        // Relative error only means something once the gradient itself clears the floor.
        if fd.abs().max(g[i].abs()) >= abs_floor {
            worst_rel = worst_rel.max(rel);
        }
        if rel >= 1e-5 {
            worst_abs = worst_abs.max(abs);
        }
    }
    (worst_rel, worst_abs, failures)
}

/// Outcome of training on one synthetic seed.
pub struct SyntheticRun {
    pub gammas: Vec<Vec<f64>>,
    pub lengthscales: Vec<Vec<f64>>,
    pub mu: DMatrix<f64>,
    pub truth: DMatrix<f64>,
    pub elbo: f64,
}

pub const SYNTH_ITERS: usize = 1000;

pub fn train_synthetic_single(seed: u64) -> SyntheticRun {
    let s = generate_synthetic(seed);
    let m0 = init_model(&s.view1, 5, 5, KernelFamily::Linear, &InitStrategy::Pca, seed).unwrap();
    let (m, _) = fit(&m0, &OptConfig::with_iters(SYNTH_ITERS)).unwrap();
    SyntheticRun {
        gammas: vec![m.posterior.gamma.iter().copied().collect()],
        lengthscales: vec![m.view.kernel.lengthscales.clone()],
        elbo: elbo(&m).unwrap().total,
        mu: m.posterior.mu,
        truth: s.latents,
    }
}

pub fn train_synthetic_mrd(seed: u64, family: KernelFamily) -> SyntheticRun {
    let s = generate_synthetic(seed);
    let m0 = init_mrd(&[s.view1, s.view2], 5, &[5, 5], &[family, family], &InitStrategy::Pca, seed).unwrap();
    let (m, _) = fit(&m0, &OptConfig::with_iters(SYNTH_ITERS)).unwrap();
    SyntheticRun {
        gammas: (0..2).map(|c| m.gamma(c).iter().copied().collect()).collect(),
        lengthscales: m.views.iter().map(|v| v.kernel.lengthscales.clone()).collect(),
        elbo: elbo(&m).unwrap().total,
        mu: m.mu,
        truth: s.latents,
    }
}

/// Best |corr| of each truth column among the given latent dims, with one-to-one matching.
pub fn recovery_scores(run: &SyntheticRun, dims: &[usize], truth_cols: &[usize]) -> Vec<f64> {
    let x = sslvm::eval::select_columns(&run.mu, dims).unwrap();
    let t = sslvm::eval::select_columns(&run.truth, truth_cols).unwrap();
    signal_recovery_report(&x, &t).unwrap().scores
}
