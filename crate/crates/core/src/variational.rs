//! Spike-and-slab variational posteriors, the switch prior, and their KL divergences.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Switch probabilities are kept inside `[GAMMA_EPS, 1 - GAMMA_EPS]`.
pub const GAMMA_EPS: f64 = 1e-8;

pub fn clip_gamma(g: f64) -> f64 {
    g.clamp(GAMMA_EPS, 1.0 - GAMMA_EPS)
}

/// Single-view posterior `q(b) q(X | b)`: slab means and variances per point and
/// latent dimension, switch probability per latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SsPosterior {
    pub mu: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub gamma: DVector<f64>,
}

impl SsPosterior {
    /// Builds a posterior, clipping `gamma` into the admissible range.
    pub fn new(mu: DMatrix<f64>, var: DMatrix<f64>, gamma: DVector<f64>) -> Result<Self> {
        check_slab(&mu, &var)?;
        if gamma.len() != mu.ncols() {
            return Err(Error::mismatch("posterior gamma length", mu.ncols(), gamma.len()));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("posterior gamma"));
        }
        Ok(SsPosterior {
            mu,
            var,
            gamma: gamma.map(clip_gamma),
        })
    }

    pub fn n(&self) -> usize {
        self.mu.nrows()
    }

    pub fn q(&self) -> usize {
        self.mu.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        check_slab(&self.mu, &self.var)?;
        if self.gamma.len() != self.q() {
            return Err(Error::mismatch("posterior gamma length", self.q(), self.gamma.len()));
        }
        check_gamma(self.gamma.iter())
    }
}

pub(crate) fn check_slab(mu: &DMatrix<f64>, var: &DMatrix<f64>) -> Result<()> {
    if mu.shape() != var.shape() {
        return Err(Error::mismatch(
            "slab variance shape",
            mu.nrows() * mu.ncols(),
            var.nrows() * var.ncols(),
        ));
    }
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("slab means"));
    }
    if let Some(s) = var.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(
            "slab variance",
            format!("must be positive and finite, got {s}"),
        ));
    }
    Ok(())
}

fn check_gamma<'a>(mut it: impl Iterator<Item = &'a f64>) -> Result<()> {
    if let Some(g) = it.find(|g| !(**g >= GAMMA_EPS && **g <= 1.0 - GAMMA_EPS)) {
        return Err(Error::invalid(
            "gamma",
            format!("must lie in [{GAMMA_EPS:e}, 1 - {GAMMA_EPS:e}], got {g}"),
        ));
    }
    Ok(())
}

/// Bernoulli switch prior with inclusion probability `pi`; the slab prior is N(0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsPrior {
    pub pi: f64,
}

impl Default for SsPrior {
    fn default() -> Self {
        SsPrior { pi: 0.5 }
    }
}

impl SsPrior {
    pub fn new(pi: f64) -> Result<Self> {
        let p = SsPrior { pi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::invalid("pi", format!("must lie in (0, 1), got {}", self.pi)));
        }
        Ok(())
    }
}

/// Per-view switch probabilities `γ_cq`, one row per view.
#[derive(Debug, Clone, PartialEq)]
pub struct MrdSwitchPosterior {
    pub gamma: DMatrix<f64>,
}

impl MrdSwitchPosterior {
    pub fn new(gamma: DMatrix<f64>) -> Result<Self> {
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("switch posterior"));
        }
        Ok(MrdSwitchPosterior {
            gamma: gamma.map(clip_gamma),
        })
    }

    pub fn n_views(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn view(&self, c: usize) -> DVector<f64> {
        self.gamma.row(c).transpose()
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma.iter())
    }
}

/// Probability that at least one view switches dimension `q` on, for each `q`.
///
/// Accumulated as `ρ ← ρ + γ_c (1 - ρ)` so that a single view gives `ρ = γ` exactly.
pub fn activation_prob(gammas: &[DVector<f64>]) -> DVector<f64> {
    let mut rho = gammas[0].clone();
    for g in &gammas[1..] {
        for (r, gc) in rho.iter_mut().zip(g.iter()) {
            *r += gc * (1.0 - *r);
        }
    }
    rho
}

pub fn bernoulli_kl(gamma: f64, pi: f64) -> f64 {
    let term = |p: f64, r: f64| if p > 0.0 { p * (p / r).ln() } else { 0.0 };
    term(gamma, pi) + term(1.0 - gamma, 1.0 - pi)
}

fn bernoulli_kl_grad(gamma: f64, pi: f64) -> f64 {
    (gamma / pi).ln() - ((1.0 - gamma) / (1.0 - pi)).ln()
}

/// `KL(N(μ, s) ‖ N(0, 1))`.
pub fn gauss_kl(mu: f64, s: f64) -> f64 {
    0.5 * (s + mu * mu - 1.0 - s.ln())
}

/// Gradients of the KL term.
#[derive(Debug, Clone)]
pub(crate) struct KlGrads {
    pub mu: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub gamma: Vec<DVector<f64>>,
}

/// Shared evaluation for single- and multi-view KL so that one view reproduces
/// the single-view result bit for bit.
pub(crate) fn kl_eval(
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    gammas: &[DVector<f64>],
    pi: f64,
    with_grads: bool,
) -> (f64, Option<KlGrads>) {
    let (n, q) = mu.shape();
    let mut total = 0.0;
    for g in gammas {
        for j in 0..q {
            total += bernoulli_kl(g[j], pi);
        }
    }
    let rho = activation_prob(gammas);
    let mut slab = DVector::zeros(q);
    for j in 0..q {
        let mut acc = 0.0;
        for i in 0..n {
            acc += gauss_kl(mu[(i, j)], var[(i, j)]);
        }
        slab[j] = acc;
        total += rho[j] * acc;
    }
    if !with_grads {
        return (total, None);
    }
    let dmu = DMatrix::from_fn(n, q, |i, j| rho[j] * mu[(i, j)]);
    let dvar = DMatrix::from_fn(n, q, |i, j| rho[j] * 0.5 * (1.0 - 1.0 / var[(i, j)]));
    let dgamma = (0..gammas.len())
        .map(|c| {
            DVector::from_fn(q, |j, _| {
                // ∂ρ/∂γ_c = ∏_{c' ≠ c} (1 - γ_c')
                let others: f64 = gammas
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != c)
                    .map(|(_, g)| 1.0 - g[j])
                    .product();
                bernoulli_kl_grad(gammas[c][j], pi) + others * slab[j]
            })
        })
        .collect();
    (
        total,
        Some(KlGrads {
            mu: dmu,
            var: dvar,
            gamma: dgamma,
        }),
    )
}

/// `KL(q(b, X) ‖ p(b) p(X))` for the single-view model.
pub fn kl_spike_slab(post: &SsPosterior, prior: &SsPrior) -> Result<f64> {
    post.validate()?;
    prior.validate()?;
    Ok(kl_eval(&post.mu, &post.var, std::slice::from_ref(&post.gamma), prior.pi, false).0)
}

/// `KL(q(B, X) ‖ p(B) p(X))` for the multi-view model with a shared slab posterior.
pub fn kl_mrd(
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    switches: &MrdSwitchPosterior,
    prior: &SsPrior,
) -> Result<f64> {
    check_slab(mu, var)?;
    if switches.gamma.ncols() != mu.ncols() {
        return Err(Error::mismatch(
            "switch posterior columns",
            mu.ncols(),
            switches.gamma.ncols(),
        ));
    }
    if switches.n_views() == 0 {
        return Err(Error::invalid("switches", "at least one view is required"));
    }
    switches.validate()?;
    prior.validate()?;
    let gammas: Vec<DVector<f64>> = (0..switches.n_views()).map(|c| switches.view(c)).collect();
    Ok(kl_eval(mu, var, &gammas, prior.pi, false).0)
}
