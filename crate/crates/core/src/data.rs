//! Synthetic multi-view signals, CSV matrix I/O and column standardization.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Smallest standard deviation used when standardizing a column.
pub const STD_FLOOR: f64 = 1e-12;

pub const SYNTH_POINTS: usize = 50;
pub const SYNTH_DIM: usize = 12;

/// Three latent signals and two views, each mixing two of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    /// 50×3: standardized `sin x`, `−exp(−cos 2x)`, `cos x`.
    pub latents: DMatrix<f64>,
    /// `[s1, s3]·A₁ᵀ`.
    pub view1: DMatrix<f64>,
    /// `[s2, s3]·A₂ᵀ`.
    pub view2: DMatrix<f64>,
    /// A₁, 12×2.
    pub mixing1: DMatrix<f64>,
    /// A₂, 12×2.
    pub mixing2: DMatrix<f64>,
}

/// The `k`-th latent signal before standardization.
pub fn latent_signal(k: usize, x: f64) -> f64 {
    match k {
        0 => x.sin(),
        1 => -(-(2.0 * x).cos()).exp(),
        2 => x.cos(),
        _ => panic!("there are three latent signals"),
    }
}

/// Raw signal values at 50 evenly spaced points of `[0, 2π]`, ends included.
pub fn raw_signals() -> DMatrix<f64> {
    let n = SYNTH_POINTS;
    DMatrix::from_fn(n, 3, |i, j| latent_signal(j, 2.0 * PI * i as f64 / (n - 1) as f64))
}

pub fn generate_synthetic(seed: u64) -> Synthetic {
    let (latents, _) = standardize(&raw_signals());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mixing = || DMatrix::from_fn(SYNTH_DIM, 2, |_, _| StandardNormal.sample(&mut rng));
    let mixing1: DMatrix<f64> = mixing();
    let mixing2: DMatrix<f64> = mixing();
    let pick = |a: usize, b: usize| DMatrix::from_columns(&[latents.column(a), latents.column(b)]);
    let view1 = pick(0, 2) * mixing1.transpose();
    let view2 = pick(1, 2) * mixing2.transpose();
    Synthetic {
        latents,
        view1,
        view2,
        mixing1,
        mixing2,
    }
}

/// Per-column mean and standard deviation (n − 1 denominator, floored at [`STD_FLOOR`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    pub fn of(y: &DMatrix<f64>) -> Self {
        let n = y.nrows();
        let mut mean = Vec::with_capacity(y.ncols());
        let mut std = Vec::with_capacity(y.ncols());
        for (j, col) in y.column_iter().enumerate() {
            let m = col.sum() / n as f64;
            let ss: f64 = col.iter().map(|v| (v - m).powi(2)).sum();
            let s = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
            if s < STD_FLOOR {
                log::warn!("column {j} is constant; standardized values set to zero");
            }
            mean.push(m);
            std.push(s.max(STD_FLOOR));
        }
        ColumnStats { mean, std }
    }

    /// Standardizes `y` with these statistics (e.g. test data with training statistics).
    pub fn apply(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.ncols() != self.mean.len() {
            return Err(Error::mismatch("standardized columns", self.mean.len(), y.ncols()));
        }
        Ok(DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
            let v = (y[(i, j)] - self.mean[j]) / self.std[j];
            if self.std[j] <= STD_FLOOR {
                0.0
            } else {
                v
            }
        }))
    }
}

pub fn standardize(y: &DMatrix<f64>) -> (DMatrix<f64>, ColumnStats) {
    let stats = ColumnStats::of(y);
    let z = stats.apply(y).expect("statistics match their own matrix");
    (z, stats)
}

/// Reads a comma-separated numeric matrix, optionally skipping one header line.
pub fn read_matrix_csv(path: impl AsRef<Path>, skip_header: bool) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let parse_err = |row: usize, column: usize, reason: String| Error::Parse {
        path: name.clone(),
        row,
        column,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(skip_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(0, 0, format!("{other:?}")),
        })?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1 + usize::from(skip_header);
        let record = record.map_err(|e| parse_err(row, 0, e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(row, record.len().min(w) + 1, format!("expected {w} fields, found {}", record.len())));
            }
            _ => {}
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, c + 1, format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(row, c + 1, format!("non-finite value `{cell}`")));
            }
            values.push(v);
        }
        rows += 1;
    }
    let Some(cols) = width else {
        return Err(parse_err(0, 0, "file contains no data rows".into()));
    };
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Reads a header-less CSV matrix, standardizing its columns when asked.
pub fn load_matrix_csv(path: impl AsRef<Path>, normalize: bool) -> Result<(DMatrix<f64>, Option<ColumnStats>)> {
    let y = read_matrix_csv(path, false)?;
    Ok(if normalize {
        let (z, s) = standardize(&y);
        (z, Some(s))
    } else {
        (y, None)
    })
}

/// Formats a matrix as CSV text; values use the shortest representation that reads back exactly.
pub fn matrix_to_csv(y: &DMatrix<f64>, header: Option<&[String]>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in y.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: impl AsRef<Path>, y: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    fs::write(path, matrix_to_csv(y, header))?;
    Ok(())
}

/// Repeats the columns of `y` `k` times: `[Y, Y, …, Y]`.
pub fn replicate_columns(y: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(Error::invalid("k", "replication factor must be at least 1"));
    }
    let d = y.ncols();
    Ok(DMatrix::from_fn(y.nrows(), k * d, |i, j| y[(i, j % d)]))
}
