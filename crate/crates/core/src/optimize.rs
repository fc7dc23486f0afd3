//! Staged L-BFGS maximization of the bound over the packed parameter vector.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bound::elbo_with_gradients;
use crate::error::{Error, Result};
use crate::model::{pack, unpack_into, GroupMask, LatentModel, ParamGroup, ParamLayout};

/// A block of iterations during which only the groups in `mask` move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub mask: GroupMask,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    /// Iteration cap across all stages.
    pub max_iters: usize,
    /// Stop a stage when the infinity norm of the active gradient falls below this.
    pub gtol: f64,
    /// Stop a stage when the relative objective change falls below this.
    pub ftol: f64,
    pub stage_schedule: Vec<Stage>,
    /// Seeds initialization when the CLI builds a model; the optimizer itself is deterministic.
    pub seed: u64,
}

impl OptConfig {
    /// One stage over every group. A warm-up stage with the switches frozen is available through
    /// `stage_schedule`, but it tends to lock every γ on.
    pub fn default_schedule(max_iters: usize) -> Vec<Stage> {
        vec![Stage {
            mask: GroupMask::ALL,
            iters: max_iters.max(1),
        }]
    }

    /// Slab parameters and noise for `warmup` iterations, then everything.
    pub fn warmup_schedule(warmup: usize, max_iters: usize) -> Vec<Stage> {
        vec![
            Stage {
                mask: GroupMask::of(&[ParamGroup::Mu, ParamGroup::Var, ParamGroup::Beta]),
                iters: warmup.max(1),
            },
            Stage {
                mask: GroupMask::ALL,
                iters: max_iters.max(1),
            },
        ]
    }

    pub fn with_iters(max_iters: usize) -> Self {
        OptConfig {
            max_iters,
            stage_schedule: Self::default_schedule(max_iters),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gtol > 0.0) {
            return Err(Error::invalid("gtol", "must be positive"));
        }
        if !(self.ftol > 0.0) {
            return Err(Error::invalid("ftol", "must be positive"));
        }
        if self.stage_schedule.iter().any(|s| s.iters == 0) {
            return Err(Error::invalid("stage_schedule", "stage budgets must be positive"));
        }
        Ok(())
    }
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            max_iters: 1000,
            gtol: 1e-6,
            ftol: 1e-10,
            stage_schedule: Self::default_schedule(1000),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub elbo: f64,
    pub grad_norm: f64,
}

/// Bound and active-gradient norm after each accepted iteration; entry 0 is the start.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("iter,elbo,grad_norm\n");
        for e in &self.entries {
            out.push_str(&format!("{},{:e},{:e}\n", e.iter, e.elbo, e.grad_norm));
        }
        std::fs::File::create(path)?.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn last_elbo(&self) -> Option<f64> {
        self.entries.last().map(|e| e.elbo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StopReason {
    Gradient,
    Objective,
    Budget,
    /// The line search found no acceptable step even along steepest descent.
    NoProgress,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LbfgsOptions {
    pub max_iters: usize,
    pub gtol: f64,
    pub ftol: f64,
    pub memory: usize,
}

pub(crate) struct LbfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub iters: usize,
    pub stop: StopReason,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LS_EVALS: usize = 40;

struct Point {
    alpha: f64,
    f: f64,
    g: DVector<f64>,
    slope: f64,
}

enum Search {
    Accepted(Point),
    /// No acceptable step; `true` when every trial was non-finite.
    Failed(bool),
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Minimizes `objective` (value and gradient) with L-BFGS and a strong-Wolfe line search.
///
/// Numerical failures inside the objective count as `+∞` and shrink the step.
pub(crate) fn lbfgs<F>(
    mut objective: F,
    x0: DVector<f64>,
    opts: LbfgsOptions,
    mut on_iter: impl FnMut(usize, f64, &DVector<f64>),
) -> Result<LbfgsResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let (mut f, mut g) = objective(&x0)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimization {
            iteration: 0,
            objective: f,
            reason: "non-finite objective at the starting point".into(),
        });
    }
    let mut x = x0;
    let mut hist: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::new();
    let mut iters = 0;
    let stop = loop {
        if inf_norm(&g) <= opts.gtol {
            break StopReason::Gradient;
        }
        if iters >= opts.max_iters {
            break StopReason::Budget;
        }
        let mut eval = |x: &DVector<f64>| -> Result<Option<(f64, DVector<f64>)>> {
            match objective(x) {
                Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Ok(Some((f, g))),
                Ok(_) => Ok(None),
                Err(e) if e.is_numerical() => Ok(None),
                Err(e) => Err(e),
            }
        };
        let mut result = None;
        for attempt in 0..2 {
            let (dir, alpha0) = if attempt == 0 && !hist.is_empty() {
                (two_loop(&g, &hist), 1.0)
            } else {
                (-&g, 1.0 / g.norm().max(1.0))
            };
            let slope = g.dot(&dir);
            if !(slope < 0.0) {
                hist.clear();
                continue;
            }
            match line_search(&mut eval, &x, f, slope, &dir, alpha0)? {
                Search::Accepted(p) => {
                    result = Some((dir, p));
                    break;
                }
                Search::Failed(all_non_finite) => {
                    if attempt == 1 && all_non_finite {
                        return Err(Error::Optimization {
                            iteration: iters,
                            objective: f,
                            reason: "objective stayed non-finite while shrinking the step".into(),
                        });
                    }
                    hist.clear();
                }
            }
        }
        let Some((dir, p)) = result else {
            break StopReason::NoProgress;
        };
        let s = &dir * p.alpha;
        let y = &p.g - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if hist.len() == opts.memory {
                hist.remove(0);
            }
            hist.push((s.clone(), y, 1.0 / sy));
        }
        let f_prev = f;
        x += s;
        f = p.f;
        g = p.g;
        iters += 1;
        on_iter(iters, f, &g);
        if (f_prev - f).abs() <= opts.ftol * f_prev.abs().max(1.0) {
            break StopReason::Objective;
        }
    };
    Ok(LbfgsResult { x, f, iters, stop })
}

fn two_loop(g: &DVector<f64>, hist: &[(DVector<f64>, DVector<f64>, f64)]) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = vec![0.0; hist.len()];
    for (k, (s, y, rho)) in hist.iter().enumerate().rev() {
        alphas[k] = rho * s.dot(&q);
        q.axpy(-alphas[k], y, 1.0);
    }
    let (s, y, _) = hist.last().expect("non-empty history");
    q *= s.dot(y) / y.dot(y);
    for (k, (s, y, rho)) in hist.iter().enumerate() {
        let b = rho * y.dot(&q);
        q.axpy(alphas[k] - b, s, 1.0);
    }
    -q
}

fn line_search<E>(
    eval: &mut E,
    x: &DVector<f64>,
    f0: f64,
    slope0: f64,
    dir: &DVector<f64>,
    alpha0: f64,
) -> Result<Search>
where
    E: FnMut(&DVector<f64>) -> Result<Option<(f64, DVector<f64>)>>,
{
    let mut at = |alpha: f64| -> Result<Option<Point>> {
        let xa = x + dir * alpha;
        Ok(eval(&xa)?.map(|(f, g)| {
            let slope = g.dot(dir);
            Point { alpha, f, g, slope }
        }))
    };
    let armijo = |p: &Point| p.f <= f0 + C1 * p.alpha * slope0;
    let curvature = |p: &Point| p.slope.abs() <= -C2 * slope0;

    let mut evals = 0;
    let mut any_finite = false;
    let mut prev = Point {
        alpha: 0.0,
        f: f0,
        g: DVector::zeros(0),
        slope: slope0,
    };
    let mut alpha = alpha0;
    // Bracketing phase. `hi` carries its value when finite.
    let (mut lo, mut hi): (Point, (f64, f64)) = loop {
        if evals >= MAX_LS_EVALS {
            return Ok(Search::Failed(!any_finite));
        }
        evals += 1;
        let Some(p) = at(alpha)? else {
            alpha = prev.alpha + 0.5 * (alpha - prev.alpha);
            continue;
        };
        any_finite = true;
        if !armijo(&p) || (prev.alpha > 0.0 && p.f >= prev.f) {
            let h = (p.alpha, p.f);
            break (prev, h);
        }
        if curvature(&p) {
            return Ok(Search::Accepted(p));
        }
        if p.slope >= 0.0 {
            let h = (prev.alpha, prev.f);
            break (p, h);
        }
        prev = p;
        alpha *= 2.0;
    };
    // Zoom phase: `lo` satisfies sufficient decrease and the step lies between lo and hi.
    while evals < MAX_LS_EVALS {
        evals += 1;
        let w = hi.0 - lo.alpha;
        let mut trial = lo.alpha + 0.5 * w;
        // Safeguarded quadratic through lo's value and slope and hi's value.
        let c = (hi.1 - lo.f - lo.slope * w) / (w * w);
        if c.is_finite() && c > 0.0 {
            let cand = lo.alpha - lo.slope / (2.0 * c);
            let (a, b) = (lo.alpha + 0.1 * w, lo.alpha + 0.9 * w);
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            if cand.is_finite() && cand >= a && cand <= b {
                trial = cand;
            }
        }
        let Some(p) = at(trial)? else {
            hi = (trial, f64::INFINITY);
            continue;
        };
        any_finite = true;
        if !armijo(&p) || p.f >= lo.f {
            hi = (p.alpha, p.f);
        } else {
            if curvature(&p) {
                return Ok(Search::Accepted(p));
            }
            if p.slope * (hi.0 - lo.alpha) >= 0.0 {
                hi = (lo.alpha, lo.f);
            }
            lo = p;
        }
        if (hi.0 - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(hi.0.abs()) {
            break;
        }
    }
    if lo.alpha > 0.0 {
        // Sufficient decrease without the curvature condition still makes progress.
        Ok(Search::Accepted(lo))
    } else {
        Ok(Search::Failed(!any_finite))
    }
}

/// Maximizes the bound following the stage schedule.
///
/// Groups outside a stage's mask are never written during that stage.
pub fn fit<M: LatentModel>(model: &M, config: &OptConfig) -> Result<(M, Trace)> {
    config.validate()?;
    model.validate()?;
    let mut current = model.clone();
    let mut trace = Trace::default();
    let (t0, g0) = elbo_with_gradients(&current)?;
    let first_mask = config.stage_schedule.first().map(|s| s.mask).unwrap_or(GroupMask::ALL);
    let layout = ParamLayout::of(&current);
    let idx0 = layout.indices(first_mask);
    trace.entries.push(TraceEntry {
        iter: 0,
        elbo: t0.total,
        grad_norm: idx0.iter().fold(0.0, |a, &i| a.max(g0[i].abs())),
    });
    let mut used = 0;
    for (k, stage) in config.stage_schedule.iter().enumerate() {
        let budget = stage.iters.min(config.max_iters - used);
        if budget == 0 {
            break;
        }
        let idx = layout.indices(stage.mask);
        if idx.is_empty() {
            continue;
        }
        let base = pack(&current);
        let start = current.clone();
        let place = |x: &DVector<f64>| -> Result<M> {
            let mut theta = base.clone();
            for (v, &i) in x.iter().zip(&idx) {
                theta[i] = *v;
            }
            let mut m = start.clone();
            unpack_into(&mut m, &theta, stage.mask)?;
            Ok(m)
        };
        let objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            let m = place(x)?;
            let (t, g) = elbo_with_gradients(&m)?;
            Ok((-t.total, DVector::from_iterator(idx.len(), idx.iter().map(|&i| -g[i]))))
        };
        let x0 = DVector::from_iterator(idx.len(), idx.iter().map(|&i| base[i]));
        let offset = used;
        let res = lbfgs(
            objective,
            x0,
            LbfgsOptions {
                max_iters: budget,
                gtol: config.gtol,
                ftol: config.ftol,
                memory: 10,
            },
            |it, f, g| {
                log::debug!("stage {k} iter {it}: elbo {:.6e} |g| {:.3e}", -f, inf_norm(g));
                trace.entries.push(TraceEntry {
                    iter: offset + it,
                    elbo: -f,
                    grad_norm: inf_norm(g),
                });
            },
        )
        .map_err(|e| match e {
            Error::Optimization {
                iteration,
                objective,
                reason,
            } => Error::Optimization {
                iteration: offset + iteration,
                objective: -objective,
                reason: format!("stage {k}: {reason}"),
            },
            other => other,
        })?;
        log::info!(
            "stage {k} finished after {} iterations ({:?}), elbo {:.6e}",
            res.iters,
            res.stop,
            -res.f
        );
        if res.iters > 0 {
            current = place(&res.x)?;
        }
        used += res.iters;
        if used >= config.max_iters {
            break;
        }
    }
    Ok((current, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bound::elbo;
    use crate::kernels::KernelFamily;
    use crate::model::{init_model, InitStrategy, SsGplvm};
    use nalgebra::DMatrix;

    fn toy(family: KernelFamily, q: usize, m: usize) -> SsGplvm {
        let n = 20;
        let y = DMatrix::from_fn(n, 5, |i, j| {
            let t = i as f64 / n as f64 * 6.0;
            (t + j as f64).sin() + 0.3 * (2.0 * t).cos() * j as f64
        });
        init_model(&y, q, m, family, &InitStrategy::Pca, 7).unwrap()
    }

    fn opts(max_iters: usize) -> LbfgsOptions {
        LbfgsOptions {
            max_iters,
            gtol: 1e-8,
            ftol: 1e-14,
            memory: 8,
        }
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            Ok((v, g))
        };
        let r = lbfgs(f, DVector::from_vec(vec![-1.2, 1.0]), opts(500), |_, _, _| {}).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn non_finite_region_shrinks_the_step() {
        // Undefined for x > 2; the minimum of the defined part is at 1.5.
        let f = |x: &DVector<f64>| {
            if x[0] > 2.0 {
                return Ok((f64::NAN, DVector::from_element(1, f64::NAN)));
            }
            Ok(((x[0] - 1.5).powi(2), DVector::from_element(1, 2.0 * (x[0] - 1.5))))
        };
        let r = lbfgs(f, DVector::from_element(1, -30.0), opts(100), |_, _, _| {}).unwrap();
        assert!((r.x[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn persistent_non_finite_is_an_error() {
        let f = |x: &DVector<f64>| {
            if x[0] != 0.0 {
                return Err(Error::NonFinite("test objective"));
            }
            Ok((0.0, DVector::from_element(1, 1.0)))
        };
        match lbfgs(f, DVector::from_element(1, 0.0), opts(10), |_, _, _| {}) {
            Err(Error::Optimization { iteration: 0, .. }) => {}
            other => panic!("{:?}", other.map(|r| r.x)),
        }
    }

    #[test]
    fn zero_iterations_return_input() {
        let m = toy(KernelFamily::ExpQuad, 2, 5);
        let (out, trace) = fit(&m, &OptConfig::with_iters(0)).unwrap();
        assert_eq!(out, m);
        assert_eq!(trace.entries.len(), 1);
    }

    #[test]
    fn improves_linear_model_monotonically() {
        let m = toy(KernelFamily::Linear, 3, 3);
        let before = elbo(&m).unwrap().total;
        let cfg = OptConfig::with_iters(80);
        let (out, trace) = fit(&m, &cfg).unwrap();
        let after = elbo(&out).unwrap().total;
        assert!(after > before, "{after} <= {before}");
        assert!((trace.last_elbo().unwrap() - after).abs() <= 1e-9 * after.abs());
        for w in trace.entries.windows(2) {
            assert!(w[1].elbo >= w[0].elbo - cfg.ftol * w[0].elbo.abs());
        }
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let m = toy(KernelFamily::ExpQuad, 2, 5);
        let cfg = OptConfig {
            max_iters: 15,
            stage_schedule: vec![Stage {
                mask: GroupMask::of(&[ParamGroup::Mu, ParamGroup::Beta]),
                iters: 15,
            }],
            ..OptConfig::default()
        };
        let (out, _) = fit(&m, &cfg).unwrap();
        assert_ne!(out.posterior.mu, m.posterior.mu);
        assert_eq!(out.posterior.var, m.posterior.var);
        assert_eq!(out.posterior.gamma, m.posterior.gamma);
        assert_eq!(out.view.z, m.view.z);
        assert_eq!(out.view.kernel, m.view.kernel);
    }

    #[test]
    fn deterministic_trace() {
        let m = toy(KernelFamily::ExpQuad, 2, 4);
        let cfg = OptConfig::with_iters(30);
        let (a, ta) = fit(&m, &cfg).unwrap();
        let (b, tb) = fit(&m, &cfg).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        let m = toy(KernelFamily::Linear, 2, 2);
        let cfg = OptConfig { gtol: 0.0, ..OptConfig::default() };
        assert!(fit(&m, &cfg).is_err());
        let mut cfg = OptConfig::default();
        cfg.stage_schedule[0].iters = 0;
        assert!(fit(&m, &cfg).is_err());
    }

    #[test]
    fn trace_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        let t = Trace {
            entries: vec![TraceEntry {
                iter: 0,
                elbo: -1.5,
                grad_norm: 0.25,
            }],
        };
        t.write_csv(&p).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(s.lines().next(), Some("iter,elbo,grad_norm"));
        assert_eq!(s.lines().count(), 2);
    }
}
