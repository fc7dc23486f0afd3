//! Flat unconstrained parameter vectors.
//!
//! Layout: slab means (N×Q, row-major), log slab variances (N×Q), then for each view:
//! switch logits (Q), inducing inputs (M×Q, row-major), log kernel variance, log
//! lengthscales (ExpQuad only), log β.
//!
//! Switches map through `γ = ε + (1 − 2ε)·sigmoid(θ)` so that every finite logit
//! stays inside the clipping range.

use std::ops::Range;

use nalgebra::DVector;

use super::LatentModel;
use crate::error::{Error, Result};
use crate::variational::{clip_gamma, GAMMA_EPS};

/// Largest magnitude a packed switch logit can take.
const MAX_LOGIT: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Mu,
    Var,
    Gamma,
    Inducing,
    Kernel,
    Beta,
}

impl ParamGroup {
    const ALL: [ParamGroup; 6] = [
        ParamGroup::Mu,
        ParamGroup::Var,
        ParamGroup::Gamma,
        ParamGroup::Inducing,
        ParamGroup::Kernel,
        ParamGroup::Beta,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// A set of parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupMask(u8);

impl GroupMask {
    pub const ALL: GroupMask = GroupMask(0b11_1111);
    pub const NONE: GroupMask = GroupMask(0);

    pub fn of(groups: &[ParamGroup]) -> Self {
        GroupMask(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn groups(self) -> impl Iterator<Item = ParamGroup> {
        ParamGroup::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

impl std::str::FromStr for GroupMask {
    type Err = Error;

    /// Parses `"all"` or a comma-separated list such as `"mu,var,beta"`.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(GroupMask::ALL);
        }
        let mut groups = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            groups.push(match part {
                "mu" => ParamGroup::Mu,
                "var" | "s" => ParamGroup::Var,
                "gamma" => ParamGroup::Gamma,
                "z" | "inducing" => ParamGroup::Inducing,
                "kernel" => ParamGroup::Kernel,
                "beta" => ParamGroup::Beta,
                other => return Err(Error::invalid("group", format!("unknown parameter group `{other}`"))),
            });
        }
        Ok(GroupMask::of(&groups))
    }
}

/// Where each parameter block lives in the packed vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub blocks: Vec<(ParamGroup, Option<usize>, Range<usize>)>,
    pub len: usize,
}

impl ParamLayout {
    pub fn of<M: LatentModel>(model: &M) -> Self {
        let (n, q) = (model.n(), model.q());
        let mut blocks = Vec::new();
        let mut off = 0;
        let mut push = |g, v, len: usize, off: &mut usize| {
            blocks.push((g, v, *off..*off + len));
            *off += len;
        };
        push(ParamGroup::Mu, None, n * q, &mut off);
        push(ParamGroup::Var, None, n * q, &mut off);
        for (c, view) in model.views().iter().enumerate() {
            push(ParamGroup::Gamma, Some(c), q, &mut off);
            push(ParamGroup::Inducing, Some(c), view.z.nrows() * q, &mut off);
            push(ParamGroup::Kernel, Some(c), view.kernel.n_params(), &mut off);
            push(ParamGroup::Beta, Some(c), 1, &mut off);
        }
        ParamLayout { blocks, len: off }
    }

    /// Indices of all coordinates belonging to groups in `mask`.
    pub fn indices(&self, mask: GroupMask) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|(g, _, _)| mask.contains(*g))
            .flat_map(|(_, _, r)| r.clone())
            .collect()
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gamma_from_logit(t: f64) -> f64 {
    GAMMA_EPS + (1.0 - 2.0 * GAMMA_EPS) * sigmoid(t)
}

/// `dγ/dθ` for the switch transform.
pub(crate) fn gamma_logit_jacobian(t: f64) -> f64 {
    let s = sigmoid(t);
    (1.0 - 2.0 * GAMMA_EPS) * s * (1.0 - s)
}

pub(crate) fn logit_from_gamma(g: f64) -> f64 {
    let p = (clip_gamma(g) - GAMMA_EPS) / (1.0 - 2.0 * GAMMA_EPS);
    (p.ln() - (1.0 - p).ln()).clamp(-MAX_LOGIT, MAX_LOGIT)
}

/// `exp(t)`, rejecting overflow and underflow.
fn positive(t: f64, what: &'static str) -> Result<f64> {
    let v = t.exp();
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Maps a model to its unconstrained parameter vector.
pub fn pack<M: LatentModel>(model: &M) -> DVector<f64> {
    let layout = ParamLayout::of(model);
    let mut out = DVector::zeros(layout.len);
    let (n, q) = (model.n(), model.q());
    let mut k = 0;
    for i in 0..n {
        for j in 0..q {
            out[k] = model.slab_mean()[(i, j)];
            k += 1;
        }
    }
    for i in 0..n {
        for j in 0..q {
            out[k] = model.slab_var()[(i, j)].ln();
            k += 1;
        }
    }
    for (c, view) in model.views().iter().enumerate() {
        for g in model.gamma(c).iter() {
            out[k] = logit_from_gamma(*g);
            k += 1;
        }
        for a in 0..view.z.nrows() {
            for j in 0..q {
                out[k] = view.z[(a, j)];
                k += 1;
            }
        }
        out[k] = view.kernel.variance.ln();
        k += 1;
        for l in &view.kernel.lengthscales {
            out[k] = l.ln();
            k += 1;
        }
        out[k] = view.beta.ln();
        k += 1;
    }
    debug_assert_eq!(k, layout.len);
    out
}

/// Writes the groups selected by `mask` from `theta` into `model`; other fields are untouched.
pub fn unpack_into<M: LatentModel>(model: &mut M, theta: &DVector<f64>, mask: GroupMask) -> Result<()> {
    let layout = ParamLayout::of(model);
    if theta.len() != layout.len {
        return Err(Error::mismatch("parameter vector length", layout.len, theta.len()));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter vector"));
    }
    let q = model.q();
    for (group, view, range) in &layout.blocks {
        if !mask.contains(*group) {
            continue;
        }
        let src = &theta.as_slice()[range.clone()];
        match (group, view) {
            (ParamGroup::Mu, _) => {
                let mu = model.slab_mean_mut();
                for (k, v) in src.iter().enumerate() {
                    mu[(k / q, k % q)] = *v;
                }
            }
            (ParamGroup::Var, _) => {
                let var = model.slab_var_mut();
                for (k, v) in src.iter().enumerate() {
                    var[(k / q, k % q)] = positive(*v, "slab variance")?;
                }
            }
            (ParamGroup::Gamma, Some(c)) => {
                let g = DVector::from_iterator(q, src.iter().map(|t| gamma_from_logit(*t)));
                model.set_gamma(*c, &g);
            }
            (ParamGroup::Inducing, Some(c)) => {
                let z = &mut model.views_mut()[*c].z;
                for (k, v) in src.iter().enumerate() {
                    z[(k / q, k % q)] = *v;
                }
            }
            (ParamGroup::Kernel, Some(c)) => {
                let kern = &mut model.views_mut()[*c].kernel;
                kern.variance = positive(src[0], "kernel variance")?;
                for (l, v) in kern.lengthscales.iter_mut().zip(&src[1..]) {
                    *l = positive(*v, "lengthscale")?;
                }
            }
            (ParamGroup::Beta, Some(c)) => {
                model.views_mut()[*c].beta = positive(src[0], "beta")?;
            }
            _ => unreachable!("per-view block without a view index"),
        }
    }
    Ok(())
}

/// Inverse of [`pack`]: a copy of `template` carrying the parameters in `theta`.
pub fn unpack<M: LatentModel>(template: &M, theta: &DVector<f64>) -> Result<M> {
    let mut m = template.clone();
    unpack_into(&mut m, theta, GroupMask::ALL)?;
    Ok(m)
}
