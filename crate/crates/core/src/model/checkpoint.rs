//! Binary checkpoint format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic  b"SSLVMCKP"
//! 8       4     u32 LE length H of the JSON header
//! 12      H     UTF-8 JSON header (see `Header`)
//! 12+H    ...   f64 LE arrays, row-major, in the order listed in `header.arrays`
//! ```
//!
//! Arrays, in order: `mu` (N×Q), `var` (N×Q), `gamma` (C×Q), then per view `c`:
//! `z{c}` (M_c×Q), `kernel{c}` (1×(1+L): variance then lengthscales), `beta{c}` (1×1),
//! and finally `pi` (1×1). Observations are not stored; the header records each
//! view's shape and, optionally, where its data came from.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{AnyModel, LatentModel, Mrd, SsGplvm, View};
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::variational::{MrdSwitchPosterior, SsPosterior, SsPrior};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SSLVMCKP";

/// Where a view's observations were read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: String,
    #[serde(default)]
    pub header: bool,
    #[serde(default)]
    pub normalize: bool,
    /// Columns are repeated this many times after loading.
    #[serde(default = "one")]
    pub replicate: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Ssgplvm,
    Mrd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ViewHeader {
    d: usize,
    m: usize,
    kernel_family: KernelFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<DataSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: Kind,
    n: usize,
    q: usize,
    views: Vec<ViewHeader>,
    arrays: Vec<ArrayEntry>,
}

/// Per-view parameters held in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub d: usize,
    pub kernel: KernelSpec,
    pub beta: f64,
    pub z: DMatrix<f64>,
    pub source: Option<DataSource>,
}

/// Everything a checkpoint stores: all model parameters plus data metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub multi_view: bool,
    pub mu: DMatrix<f64>,
    pub var: DMatrix<f64>,
    /// C×Q switch probabilities (one row for a single-view model).
    pub gamma: DMatrix<f64>,
    pub views: Vec<ViewRecord>,
    pub prior: SsPrior,
}

impl Checkpoint {
    pub fn from_model(model: &AnyModel, sources: &[Option<DataSource>]) -> Self {
        let q = model.q();
        let c = model.views().len();
        let mut gamma = DMatrix::zeros(c, q);
        for k in 0..c {
            gamma.set_row(k, &model.gamma(k).transpose());
        }
        Checkpoint {
            multi_view: model.is_multi_view(),
            mu: model.slab_mean().clone(),
            var: model.slab_var().clone(),
            gamma,
            views: model
                .views()
                .iter()
                .enumerate()
                .map(|(k, v)| ViewRecord {
                    d: v.y.ncols(),
                    kernel: v.kernel.clone(),
                    beta: v.beta,
                    z: v.z.clone(),
                    source: sources.get(k).cloned().flatten(),
                })
                .collect(),
            prior: model.prior(),
        }
    }

    /// Rebuilds the model given the observations for each view.
    pub fn into_model(self, ys: Vec<DMatrix<f64>>) -> Result<AnyModel> {
        if ys.len() != self.views.len() {
            return Err(Error::mismatch("views supplied", self.views.len(), ys.len()));
        }
        let views: Vec<View> = self
            .views
            .into_iter()
            .zip(ys)
            .map(|(r, y)| {
                if y.ncols() != r.d {
                    return Err(Error::mismatch("view columns", r.d, y.ncols()));
                }
                Ok(View {
                    y,
                    kernel: r.kernel,
                    beta: r.beta,
                    z: r.z,
                })
            })
            .collect::<Result<_>>()?;
        if self.multi_view {
            Ok(AnyModel::Multi(Mrd::new(
                views,
                self.mu,
                self.var,
                MrdSwitchPosterior::new(self.gamma)?,
                self.prior,
            )?))
        } else {
            let view = views.into_iter().next().expect("one view");
            let gamma = self.gamma.row(0).transpose();
            Ok(AnyModel::Single(SsGplvm::new(
                view,
                SsPosterior::new(self.mu, self.var, gamma)?,
                self.prior,
            )?))
        }
    }

    pub fn sources(&self) -> Vec<Option<DataSource>> {
        self.views.iter().map(|v| v.source.clone()).collect()
    }
}

fn push_array(arrays: &mut Vec<ArrayEntry>, blob: &mut Vec<u8>, name: String, m: &DMatrix<f64>) {
    arrays.push(ArrayEntry {
        name,
        rows: m.nrows(),
        cols: m.ncols(),
    });
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            blob.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut blob = Vec::new();
    push_array(&mut arrays, &mut blob, "mu".into(), &ck.mu);
    push_array(&mut arrays, &mut blob, "var".into(), &ck.var);
    push_array(&mut arrays, &mut blob, "gamma".into(), &ck.gamma);
    for (c, v) in ck.views.iter().enumerate() {
        push_array(&mut arrays, &mut blob, format!("z{c}"), &v.z);
        let mut kp = vec![v.kernel.variance];
        kp.extend_from_slice(&v.kernel.lengthscales);
        push_array(&mut arrays, &mut blob, format!("kernel{c}"), &DMatrix::from_row_slice(1, kp.len(), &kp));
        push_array(&mut arrays, &mut blob, format!("beta{c}"), &DMatrix::from_element(1, 1, v.beta));
    }
    push_array(&mut arrays, &mut blob, "pi".into(), &DMatrix::from_element(1, 1, ck.prior.pi));

    let header = Header {
        format: "sslvm-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        kind: if ck.multi_view { Kind::Mrd } else { Kind::Ssgplvm },
        n: ck.mu.nrows(),
        q: ck.mu.ncols(),
        views: ck
            .views
            .iter()
            .map(|v| ViewHeader {
                d: v.d,
                m: v.z.nrows(),
                kernel_family: v.kernel.family,
                source: v.source.clone(),
            })
            .collect(),
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn format_err(path: &str, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_string(),
        reason: reason.into(),
    }
}

fn decode(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a checkpoint file (bad magic or truncated)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(format_err(path, "truncated header"));
    }
    let value: serde_json::Value = serde_json::from_slice(&body[..hlen])
        .map_err(|e| format_err(path, format!("bad header: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(value).map_err(|e| format_err(path, format!("bad header: {e}")))?;
    let mut data = &body[hlen..];
    let expected: usize = header.arrays.iter().map(|a| a.rows * a.cols * 8).sum();
    if data.len() != expected {
        return Err(format_err(
            path,
            format!("array payload has {} bytes, header describes {expected}", data.len()),
        ));
    }
    let mut take = |name: &str, rows: usize, cols: usize, arrays: &mut std::slice::Iter<ArrayEntry>| -> Result<DMatrix<f64>> {
        let entry = arrays
            .next()
            .ok_or_else(|| format_err(path, format!("missing array `{name}`")))?;
        if entry.name != name || entry.rows != rows || (cols != usize::MAX && entry.cols != cols) {
            return Err(format_err(
                path,
                format!("expected array `{name}` ({rows}×{cols}), found `{}` ({}×{})", entry.name, entry.rows, entry.cols),
            ));
        }
        let cols = entry.cols;
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let (head, rest) = data.split_at(8);
                m[(i, j)] = f64::from_le_bytes(head.try_into().expect("8 bytes"));
                data = rest;
            }
        }
        Ok(m)
    };

    let (n, q) = (header.n, header.q);
    let c = header.views.len();
    if c == 0 || (header.kind == Kind::Ssgplvm && c != 1) {
        return Err(format_err(path, "inconsistent view count"));
    }
    let mut it = header.arrays.iter();
    let mu = take("mu", n, q, &mut it)?;
    let var = take("var", n, q, &mut it)?;
    let gamma = take("gamma", c, q, &mut it)?;
    let mut views = Vec::with_capacity(c);
    for (k, vh) in header.views.iter().enumerate() {
        let z = take(&format!("z{k}"), vh.m, q, &mut it)?;
        let kp = take(&format!("kernel{k}"), 1, usize::MAX, &mut it)?;
        let beta = take(&format!("beta{k}"), 1, 1, &mut it)?[(0, 0)];
        let kernel = KernelSpec {
            family: vh.kernel_family,
            variance: kp[(0, 0)],
            lengthscales: kp.iter().skip(1).copied().collect(),
        };
        views.push(ViewRecord {
            d: vh.d,
            kernel,
            beta,
            z,
            source: vh.source.clone(),
        });
    }
    let pi = take("pi", 1, 1, &mut it)?[(0, 0)];
    Ok(Checkpoint {
        multi_view: header.kind == Kind::Mrd,
        mu,
        var,
        gamma,
        views,
        prior: SsPrior { pi },
    })
}

/// Writes a checkpoint atomically (temporary file then rename).
pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}

/// Saves `model` with optional per-view data provenance.
pub fn save(model: &AnyModel, sources: &[Option<DataSource>], path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(&Checkpoint::from_model(model, sources), path)
}

/// Loads a checkpoint and rebuilds the model with the supplied observations.
pub fn load(path: impl AsRef<Path>, ys: Vec<DMatrix<f64>>) -> Result<AnyModel> {
    read_checkpoint(path)?.into_model(ys)
}
