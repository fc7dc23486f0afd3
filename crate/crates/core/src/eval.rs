//! Dimension selection, nearest-neighbour classification, retrieval metrics and
//! recovery of known latent signals.

use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Dimensions whose switch probability is at least `threshold`, ascending.
pub fn select_dims_by_gamma(gamma: &[f64], threshold: f64) -> Vec<usize> {
    (0..gamma.len()).filter(|&q| gamma[q] >= threshold).collect()
}

/// Dimensions whose lengthscale is at most `threshold`; short lengthscales are the active ones.
pub fn select_dims_by_lengthscale(lengthscales: &[f64], threshold: f64) -> Vec<usize> {
    (0..lengthscales.len()).filter(|&q| lengthscales[q] <= threshold).collect()
}

/// Both selections side by side. They are allowed to disagree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimSelection {
    pub by_gamma: Vec<usize>,
    pub by_lengthscale: Option<Vec<usize>>,
    pub agree: Option<bool>,
}

pub fn compare_selections(gamma: &[f64], gamma_threshold: f64, lengthscales: &[f64], ls_threshold: f64) -> DimSelection {
    let by_gamma = select_dims_by_gamma(gamma, gamma_threshold);
    if lengthscales.is_empty() {
        return DimSelection {
            by_gamma,
            by_lengthscale: None,
            agree: None,
        };
    }
    let by_ls = select_dims_by_lengthscale(lengthscales, ls_threshold);
    DimSelection {
        agree: Some(by_ls == by_gamma),
        by_gamma,
        by_lengthscale: Some(by_ls),
    }
}

/// Keeps the listed columns, in order.
pub fn select_columns(x: &DMatrix<f64>, dims: &[usize]) -> Result<DMatrix<f64>> {
    if let Some(&bad) = dims.iter().find(|&&d| d >= x.ncols()) {
        return Err(Error::invalid("dims", format!("column {bad} out of range for {} columns", x.ncols())));
    }
    Ok(DMatrix::from_fn(x.nrows(), dims.len(), |i, j| x[(i, dims[j])]))
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|k| (a[(i, k)] - b[(j, k)]).powi(2)).sum()
}

fn check_cols(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::mismatch("latent columns", a.ncols(), b.ncols()));
    }
    Ok(())
}

/// Euclidean 1-NN; ties go to the lowest training index.
pub fn nn_classify<L: Clone>(train: &DMatrix<f64>, labels: &[L], test: &DMatrix<f64>) -> Result<Vec<L>> {
    check_cols(train, test)?;
    if labels.len() != train.nrows() {
        return Err(Error::mismatch("training labels", train.nrows(), labels.len()));
    }
    if train.nrows() == 0 {
        return Err(Error::invalid("train", "no training points"));
    }
    Ok((0..test.nrows())
        .map(|t| {
            let mut best = (f64::INFINITY, 0);
            for i in 0..train.nrows() {
                let d = sq_dist(test, t, train, i);
                if d < best.0 {
                    best = (d, i);
                }
            }
            labels[best.1].clone()
        })
        .collect())
}

pub fn accuracy<L: PartialEq>(predicted: &[L], truth: &[L]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::mismatch("label count", truth.len(), predicted.len()));
    }
    if truth.is_empty() {
        return Err(Error::invalid("labels", "no test labels"));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// For each query, gallery indices sorted by ascending distance (stable, so ties keep index order).
pub fn rank_by_distance(queries: &DMatrix<f64>, gallery: &DMatrix<f64>) -> Result<Vec<Vec<usize>>> {
    check_cols(queries, gallery)?;
    Ok((0..queries.nrows())
        .map(|q| {
            let d: Vec<f64> = (0..gallery.nrows()).map(|g| sq_dist(queries, q, gallery, g)).collect();
            let mut idx: Vec<usize> = (0..gallery.nrows()).collect();
            idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
            idx
        })
        .collect())
}

/// Non-interpolated AP of a relevance sequence in rank order; `None` without relevant items.
pub fn average_precision(relevant_in_rank_order: &[bool]) -> Option<f64> {
    let mut hits = 0;
    let mut acc = 0.0;
    for (k, &r) in relevant_in_rank_order.iter().enumerate() {
        if r {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| acc / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalScore {
    pub map: f64,
    pub queries_scored: usize,
    /// Queries without any relevant gallery item.
    pub queries_excluded: usize,
}

/// mAP over queries; `relevance[q][g]` says whether gallery item `g` is relevant to query `q`.
pub fn mean_average_precision(rankings: &[Vec<usize>], relevance: &[Vec<bool>]) -> Result<RetrievalScore> {
    if rankings.len() != relevance.len() {
        return Err(Error::mismatch("relevance rows", rankings.len(), relevance.len()));
    }
    let mut total = 0.0;
    let mut scored = 0;
    for (q, (rank, rel)) in rankings.iter().zip(relevance).enumerate() {
        let seq: Vec<bool> = rank.iter().map(|&g| rel[g]).collect();
        match average_precision(&seq) {
            Some(ap) => {
                total += ap;
                scored += 1;
            }
            None => log::warn!("query {q} has no relevant items and is excluded from mAP"),
        }
    }
    if scored == 0 {
        return Err(Error::invalid("relevance", "no query has a relevant item"));
    }
    Ok(RetrievalScore {
        map: total / scored as f64,
        queries_scored: scored,
        queries_excluded: rankings.len() - scored,
    })
}

/// `(recall, precision)` after each rank position.
pub fn precision_recall_curve(ranking: &[usize], relevance: &[bool]) -> Vec<(f64, f64)> {
    let total = ranking.iter().filter(|&&g| relevance[g]).count();
    let mut hits = 0;
    ranking
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            if relevance[g] {
                hits += 1;
            }
            let recall = if total > 0 { hits as f64 / total as f64 } else { 0.0 };
            (recall, hits as f64 / (k + 1) as f64)
        })
        .collect()
}

/// Mean of the per-query curves at each rank position (queries without relevant items skipped).
pub fn mean_precision_recall_curve(rankings: &[Vec<usize>], relevance: &[Vec<bool>]) -> Vec<(f64, f64)> {
    let curves: Vec<Vec<(f64, f64)>> = rankings
        .iter()
        .zip(relevance)
        .filter(|(_, rel)| rel.iter().any(|&r| r))
        .map(|(rank, rel)| precision_recall_curve(rank, rel))
        .collect();
    let Some(len) = curves.iter().map(Vec::len).min() else {
        return Vec::new();
    };
    let n = curves.len() as f64;
    (0..len)
        .map(|k| {
            let (r, p) = curves.iter().fold((0.0, 0.0), |(r, p), c| (r + c[k].0, p + c[k].1));
            (r / n, p / n)
        })
        .collect()
}

pub fn write_pr_curve_csv(path: impl AsRef<Path>, curve: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from("recall,precision\n");
    for (r, p) in curve {
        out.push_str(&format!("{r},{p}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Pearson correlation; zero when either vector is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let denom = (saa * sbb).sqrt();
    if denom <= 1e-300 || saa <= 1e-24 * n || sbb <= 1e-24 * n {
        0.0
    } else {
        sab / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    /// Inferred dimension matched to each true signal (`None` when there are fewer inferred dims).
    pub assignment: Vec<Option<usize>>,
    /// |correlation| of each true signal with its matched dimension.
    pub scores: Vec<f64>,
    /// Full |correlation| table, true signals by inferred dimensions.
    pub abs_corr: Vec<Vec<f64>>,
}

/// Greedy one-to-one matching of true signals to inferred dimensions by |correlation|.
pub fn signal_recovery_report(inferred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<RecoveryReport> {
    if inferred.nrows() != truth.nrows() {
        return Err(Error::mismatch("recovery rows", truth.nrows(), inferred.nrows()));
    }
    let cols = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { m.column_iter().map(|c| c.iter().copied().collect()).collect() };
    let (inf, tru) = (cols(inferred), cols(truth));
    let abs_corr: Vec<Vec<f64>> = tru.iter().map(|t| inf.iter().map(|x| pearson(t, x).abs()).collect()).collect();
    let mut assignment = vec![None; tru.len()];
    let mut scores = vec![0.0; tru.len()];
    let mut used = vec![false; inf.len()];
    for _ in 0..tru.len().min(inf.len()) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (s, row) in abs_corr.iter().enumerate() {
            if assignment[s].is_some() {
                continue;
            }
            for (d, &c) in row.iter().enumerate() {
                if !used[d] && best.is_none_or(|(b, _, _)| c > b) {
                    best = Some((c, s, d));
                }
            }
        }
        let (c, s, d) = best.expect("an unassigned pair remains");
        assignment[s] = Some(d);
        scores[s] = c;
        used[d] = true;
    }
    Ok(RecoveryReport {
        assignment,
        scores,
        abs_corr,
    })
}
