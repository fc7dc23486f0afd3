use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Mrd, SsGplvm, View};
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::variational::{MrdSwitchPosterior, SsPosterior, SsPrior};

const INIT_VAR: f64 = 0.5;
const INIT_GAMMA: f64 = 0.5;
/// Standard deviation of the perturbation added to sampled inducing inputs (variance 0.01).
const Z_JITTER_SD: f64 = 0.1;
/// Standard deviation of the noise added around simplex vertices.
const SIMPLEX_NOISE_SD: f64 = 0.1;

/// How slab means are initialised.
#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// Standardised principal component scores of the (concatenated) data.
    Pca,
    /// Independent standard normal draws.
    Random,
    /// Each class placed on a vertex of a regular simplex; `labels[n]` is the class of row `n`.
    Simplex(Vec<usize>),
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Standardised PCA scores, padded with small random columns when the data
/// have fewer than `q` non-degenerate directions.
fn pca_scores(y: &DMatrix<f64>, q: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, d) = y.shape();
    let mean = y.row_mean();
    let mut yc = y.clone();
    for mut r in yc.row_iter_mut() {
        r -= &mean;
    }
    let cov = (yc.transpose() * &yc) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));
    let top = eig.eigenvalues[order[0]].max(0.0);

    if q > d {
        log::warn!("q = {q} exceeds data dimension {d}; padding PCA init with random columns");
    }
    let mut out = DMatrix::zeros(n, q);
    for j in 0..q {
        let usable = j < d && eig.eigenvalues[order[j]] > 1e-12 * top && top > 0.0;
        if usable {
            let v = eig.eigenvectors.column(order[j]);
            let mut col = &yc * v;
            let sd = (col.norm_squared() / n as f64).sqrt();
            col /= sd;
            // Fix the sign so the largest-magnitude entry is positive.
            let imax = col.iamax();
            if col[imax] < 0.0 {
                col.neg_mut();
            }
            out.set_column(j, &col);
        } else {
            for i in 0..n {
                out[(i, j)] = Z_JITTER_SD * normal(rng);
            }
        }
    }
    out
}

/// `k` vertices of a regular simplex in `q` dimensions, centred at the origin with unit norm.
pub fn simplex_vertices(k: usize, q: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(Error::invalid("labels", "need at least one class"));
    }
    if k > q + 1 {
        return Err(Error::invalid(
            "labels",
            format!("{k} classes need at least {} latent dimensions for a simplex", k - 1),
        ));
    }
    let mut out = DMatrix::zeros(k, q);
    if k == 1 {
        return Ok(out);
    }
    // Helmert basis of the sum-zero subspace of R^k gives k-1 orthonormal coordinates.
    for j in 1..k {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for v in 0..k {
            let coord = if v < j {
                1.0
            } else if v == j {
                -(j as f64)
            } else {
                0.0
            };
            out[(v, j - 1)] = coord / norm;
        }
    }
    let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
    Ok(out * scale)
}

fn init_mu(
    y: &DMatrix<f64>,
    q: usize,
    strategy: &InitStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let n = y.nrows();
    match strategy {
        InitStrategy::Pca => Ok(pca_scores(y, q, rng)),
        InitStrategy::Random => Ok(DMatrix::from_fn(n, q, |_, _| normal(rng))),
        InitStrategy::Simplex(labels) => {
            if labels.len() != n {
                return Err(Error::mismatch("simplex labels", n, labels.len()));
            }
            let mut classes: Vec<usize> = labels.clone();
            classes.sort_unstable();
            classes.dedup();
            let verts = simplex_vertices(classes.len(), q)?;
            let mut mu = DMatrix::zeros(n, q);
            for (i, l) in labels.iter().enumerate() {
                let k = classes.binary_search(l).expect("label present");
                for j in 0..q {
                    mu[(i, j)] = verts[(k, j)] + SIMPLEX_NOISE_SD * normal(rng);
                }
            }
            Ok(mu)
        }
    }
}

fn init_z(mu: &DMatrix<f64>, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, q) = mu.shape();
    let idx = sample(rng, n, m).into_vec();
    DMatrix::from_fn(m, q, |a, j| mu[(idx[a], j)]) + DMatrix::from_fn(m, q, |_, _| Z_JITTER_SD * normal(rng))
}

fn init_beta(y: &DMatrix<f64>) -> f64 {
    let n = (y.nrows() * y.ncols()) as f64;
    let mean = y.sum() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (0.01 * var)
    } else {
        100.0
    }
}

fn check_inputs(y: &DMatrix<f64>, q: usize, m: usize) -> Result<usize> {
    if q == 0 {
        return Err(Error::invalid("q", "need at least one latent dimension"));
    }
    if m == 0 {
        return Err(Error::invalid("m", "need at least one inducing point"));
    }
    if y.nrows() == 0 || y.ncols() == 0 {
        return Err(Error::invalid("data", "empty data matrix"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("data"));
    }
    if m > y.nrows() {
        log::warn!("capping {m} inducing points at N = {}", y.nrows());
    }
    Ok(m.min(y.nrows()))
}

/// Initialises a single-view model. Deterministic in `seed`.
pub fn init_model(
    y: &DMatrix<f64>,
    q: usize,
    m: usize,
    family: KernelFamily,
    strategy: &InitStrategy,
    seed: u64,
) -> Result<SsGplvm> {
    let m = check_inputs(y, q, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = init_mu(y, q, strategy, &mut rng)?;
    let z = init_z(&mu, m, &mut rng);
    let n = y.nrows();
    let view = View {
        y: y.clone(),
        kernel: KernelSpec::default_for(family, q),
        beta: init_beta(y),
        z,
    };
    let post = SsPosterior::new(
        mu,
        DMatrix::from_element(n, q, INIT_VAR),
        DVector::from_element(q, INIT_GAMMA),
    )?;
    SsGplvm::new(view, post, SsPrior::default())
}

/// Initialises a multi-view model; the PCA strategy uses the column-concatenated views.
pub fn init_mrd(
    ys: &[DMatrix<f64>],
    q: usize,
    ms: &[usize],
    families: &[KernelFamily],
    strategy: &InitStrategy,
    seed: u64,
) -> Result<Mrd> {
    if ys.is_empty() {
        return Err(Error::invalid("views", "at least one view is required"));
    }
    if ms.len() != ys.len() {
        return Err(Error::mismatch("inducing counts per view", ys.len(), ms.len()));
    }
    if families.len() != ys.len() {
        return Err(Error::mismatch("kernels per view", ys.len(), families.len()));
    }
    let n = ys[0].nrows();
    for y in ys {
        if y.nrows() != n {
            return Err(Error::mismatch("view rows", n, y.nrows()));
        }
    }
    let ms: Vec<usize> = ys
        .iter()
        .zip(ms)
        .map(|(y, m)| check_inputs(y, q, *m))
        .collect::<Result<_>>()?;
    let total_d: usize = ys.iter().map(|y| y.ncols()).sum();
    let mut joint = DMatrix::zeros(n, total_d);
    let mut off = 0;
    for y in ys {
        joint.columns_mut(off, y.ncols()).copy_from(y);
        off += y.ncols();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = init_mu(&joint, q, strategy, &mut rng)?;
    let views = ys
        .iter()
        .zip(&ms)
        .zip(families)
        .map(|((y, m), fam)| View {
            y: y.clone(),
            kernel: KernelSpec::default_for(*fam, q),
            beta: init_beta(y),
            z: init_z(&mu, *m, &mut rng),
        })
        .collect::<Vec<_>>();
    let c = views.len();
    Mrd::new(
        views,
        mu,
        DMatrix::from_element(n, q, INIT_VAR),
        MrdSwitchPosterior::new(DMatrix::from_element(c, q, INIT_GAMMA))?,
        SsPrior::default(),
    )
}
