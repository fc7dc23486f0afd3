//! Single-view (SSGP-LVM) and multi-view (spike-and-slab MRD) model containers.
//!
//! Inducing variables are collapsed analytically, so a model stores only the data,
//! the variational posterior, inducing inputs and hyperparameters.

mod checkpoint;
mod init;
mod params;

pub use checkpoint::{load, read_checkpoint, save, write_checkpoint, Checkpoint, DataSource, ViewRecord, CHECKPOINT_VERSION};
pub use init::{init_model, init_mrd, simplex_vertices, InitStrategy};
pub use params::{pack, unpack, unpack_into, GroupMask, ParamGroup, ParamLayout};
pub(crate) use params::{gamma_logit_jacobian, logit_from_gamma};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::variational::{check_slab, MrdSwitchPosterior, SsPosterior, SsPrior};

/// One observed view together with its GP mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    /// N×D observations.
    pub y: DMatrix<f64>,
    pub kernel: KernelSpec,
    /// Noise precision β.
    pub beta: f64,
    /// M×Q inducing inputs.
    pub z: DMatrix<f64>,
}

impl View {
    pub fn validate(&self, n: usize, q: usize) -> Result<()> {
        if self.y.nrows() != n {
            return Err(Error::mismatch("view rows", n, self.y.nrows()));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observations"));
        }
        if self.z.ncols() != q {
            return Err(Error::mismatch("inducing input columns", q, self.z.ncols()));
        }
        if self.z.nrows() == 0 {
            return Err(Error::invalid("inducing inputs", "need at least one inducing point"));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inducing inputs"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid("beta", format!("must be positive, got {}", self.beta)));
        }
        self.kernel.validate(q)
    }
}

/// Common access to the parameters of single- and multi-view models.
pub trait LatentModel: Clone {
    fn views(&self) -> &[View];
    fn views_mut(&mut self) -> &mut [View];
    fn slab_mean(&self) -> &DMatrix<f64>;
    fn slab_mean_mut(&mut self) -> &mut DMatrix<f64>;
    fn slab_var(&self) -> &DMatrix<f64>;
    fn slab_var_mut(&mut self) -> &mut DMatrix<f64>;
    /// Switch probabilities used by view `c`.
    fn gamma(&self, c: usize) -> DVector<f64>;
    fn set_gamma(&mut self, c: usize, gamma: &DVector<f64>);
    fn prior(&self) -> SsPrior;

    fn n(&self) -> usize {
        self.slab_mean().nrows()
    }

    fn q(&self) -> usize {
        self.slab_mean().ncols()
    }

    fn gammas(&self) -> Vec<DVector<f64>> {
        (0..self.views().len()).map(|c| self.gamma(c)).collect()
    }

    fn validate(&self) -> Result<()> {
        check_slab(self.slab_mean(), self.slab_var())?;
        self.prior().validate()?;
        if self.views().is_empty() {
            return Err(Error::invalid("views", "at least one view is required"));
        }
        let (n, q) = (self.n(), self.q());
        for v in self.views() {
            v.validate(n, q)?;
        }
        for c in 0..self.views().len() {
            let g = self.gamma(c);
            if g.len() != q {
                return Err(Error::mismatch("gamma length", q, g.len()));
            }
        }
        Ok(())
    }
}

/// Spike-and-slab GP-LVM on a single view.
#[derive(Debug, Clone, PartialEq)]
pub struct SsGplvm {
    pub view: View,
    pub posterior: SsPosterior,
    pub prior: SsPrior,
}

impl SsGplvm {
    pub fn new(view: View, posterior: SsPosterior, prior: SsPrior) -> Result<Self> {
        let m = SsGplvm {
            view,
            posterior,
            prior,
        };
        m.validate()?;
        m.posterior.validate()?;
        if m.view.z.nrows() > m.n() {
            log::warn!("{} inducing points exceed {} data points", m.view.z.nrows(), m.n());
        }
        Ok(m)
    }
}

impl LatentModel for SsGplvm {
    fn views(&self) -> &[View] {
        std::slice::from_ref(&self.view)
    }
    fn views_mut(&mut self) -> &mut [View] {
        std::slice::from_mut(&mut self.view)
    }
    fn slab_mean(&self) -> &DMatrix<f64> {
        &self.posterior.mu
    }
    fn slab_mean_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.posterior.mu
    }
    fn slab_var(&self) -> &DMatrix<f64> {
        &self.posterior.var
    }
    fn slab_var_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.posterior.var
    }
    fn gamma(&self, c: usize) -> DVector<f64> {
        assert_eq!(c, 0, "single-view model has one switch vector");
        self.posterior.gamma.clone()
    }
    fn set_gamma(&mut self, c: usize, gamma: &DVector<f64>) {
        assert_eq!(c, 0, "single-view model has one switch vector");
        self.posterior.gamma.copy_from(gamma);
    }
    fn prior(&self) -> SsPrior {
        self.prior
    }
}

/// Spike-and-slab MRD: views share the slab posterior and each has its own switches.
#[derive(Debug, Clone, PartialEq)]
pub struct Mrd {
    pub views: Vec<View>,
    pub mu: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub switches: MrdSwitchPosterior,
    pub prior: SsPrior,
}

impl Mrd {
    pub fn new(
        views: Vec<View>,
        mu: DMatrix<f64>,
        var: DMatrix<f64>,
        switches: MrdSwitchPosterior,
        prior: SsPrior,
    ) -> Result<Self> {
        if switches.n_views() != views.len() {
            return Err(Error::mismatch("switch rows", views.len(), switches.n_views()));
        }
        if switches.gamma.ncols() != mu.ncols() {
            return Err(Error::mismatch("switch columns", mu.ncols(), switches.gamma.ncols()));
        }
        switches.validate()?;
        let m = Mrd {
            views,
            mu,
            var,
            switches,
            prior,
        };
        m.validate()?;
        Ok(m)
    }

    /// Views `c` as a standalone single-view model with the shared posterior.
    pub fn view_model(&self, c: usize) -> Result<SsGplvm> {
        SsGplvm::new(
            self.views[c].clone(),
            SsPosterior::new(self.mu.clone(), self.var.clone(), self.switches.view(c))?,
            self.prior,
        )
    }
}

impl LatentModel for Mrd {
    fn views(&self) -> &[View] {
        &self.views
    }
    fn views_mut(&mut self) -> &mut [View] {
        &mut self.views
    }
    fn slab_mean(&self) -> &DMatrix<f64> {
        &self.mu
    }
    fn slab_mean_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.mu
    }
    fn slab_var(&self) -> &DMatrix<f64> {
        &self.var
    }
    fn slab_var_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.var
    }
    fn gamma(&self, c: usize) -> DVector<f64> {
        self.switches.view(c)
    }
    fn set_gamma(&mut self, c: usize, gamma: &DVector<f64>) {
        for (j, g) in gamma.iter().enumerate() {
            self.switches.gamma[(c, j)] = *g;
        }
    }
    fn prior(&self) -> SsPrior {
        self.prior
    }
}

/// Either model kind, as stored in checkpoints and driven by the CLI.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Single(SsGplvm),
    Multi(Mrd),
}

impl AnyModel {
    pub fn is_multi_view(&self) -> bool {
        matches!(self, AnyModel::Multi(_))
    }
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Single($m) => $e,
            AnyModel::Multi($m) => $e,
        }
    };
}

impl LatentModel for AnyModel {
    fn views(&self) -> &[View] {
        delegate!(self, m => m.views())
    }
    fn views_mut(&mut self) -> &mut [View] {
        delegate!(self, m => m.views_mut())
    }
    fn slab_mean(&self) -> &DMatrix<f64> {
        delegate!(self, m => m.slab_mean())
    }
    fn slab_mean_mut(&mut self) -> &mut DMatrix<f64> {
        delegate!(self, m => m.slab_mean_mut())
    }
    fn slab_var(&self) -> &DMatrix<f64> {
        delegate!(self, m => m.slab_var())
    }
    fn slab_var_mut(&mut self) -> &mut DMatrix<f64> {
        delegate!(self, m => m.slab_var_mut())
    }
    fn gamma(&self, c: usize) -> DVector<f64> {
        delegate!(self, m => m.gamma(c))
    }
    fn set_gamma(&mut self, c: usize, gamma: &DVector<f64>) {
        delegate!(self, m => m.set_gamma(c, gamma))
    }
    fn prior(&self) -> SsPrior {
        delegate!(self, m => m.prior())
    }
}
