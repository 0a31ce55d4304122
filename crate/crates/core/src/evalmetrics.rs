//! Reconstruction quality: nearest neighbours in pixel L2, rank of a claimed
//! counterpart, θ-distance, and per-cell averages for the mixing grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::initsch::MixScheme;
use crate::numcore::{sq_dist, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NNRecord {
    pub recon_index: usize,
    pub nn_index: usize,
    pub l2: f64,
    /// L2 distance to every reference row.
    pub distances: Vec<f64>,
}

impl NNRecord {
    /// 1-based position of `ref_index` when references are sorted by
    /// distance, ties broken by lower index.
    pub fn rank_of(&self, ref_index: usize) -> Result<usize> {
        let d = *self
            .distances
            .get(ref_index)
            .ok_or_else(|| Error::Config(format!("reference index {ref_index} out of {} rows", self.distances.len())))?;
        let ahead = self
            .distances
            .iter()
            .enumerate()
            .filter(|&(i, &di)| di < d || (di == d && i < ref_index))
            .count();
        Ok(ahead + 1)
    }
}

/// Exhaustive scan of `refset`; ties go to the lowest index.
pub fn nearest_neighbor(recon_index: usize, query: &[f64], refset: &Matrix) -> Result<NNRecord> {
    if refset.rows() == 0 {
        return Err(Error::Config("nearest-neighbour reference set is empty".into()));
    }
    if refset.cols() != query.len() {
        return Err(Error::Shape(format!("query has length {}, references have {}", query.len(), refset.cols())));
    }
    let distances: Vec<f64> = refset.row_iter().map(|r| sq_dist(query, r).sqrt()).collect();
    let (nn_index, l2) = distances
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &d)| if d < best.1 { (i, d) } else { best });
    Ok(NNRecord { recon_index, nn_index, l2, distances })
}

/// One record per reconstructed row.
pub fn nn_table(recon: &Matrix, refset: &Matrix) -> Result<Vec<NNRecord>> {
    recon.row_iter().enumerate().map(|(i, r)| nearest_neighbor(i, r, refset)).collect()
}

/// Average nearest-neighbour distance of the rows of `recon` to `refset`.
pub fn mean_nn_l2(recon: &Matrix, refset: &Matrix) -> Result<f64> {
    let t = nn_table(recon, refset)?;
    Ok(t.iter().map(|r| r.l2).sum::<f64>() / t.len().max(1) as f64)
}

/// `‖θ* − θ‖²`
pub fn theta_distance(theta_star: &[f64], theta: &[f64]) -> Result<f64> {
    if theta_star.len() != theta.len() {
        return Err(Error::Shape(format!("θ lengths differ: {} vs {}", theta_star.len(), theta.len())));
    }
    Ok(sq_dist(theta_star, theta))
}

/// Whether `ref_index` is among the `k` nearest references of `recon`.
pub fn topk_membership(recon: &[f64], refset: &Matrix, ref_index: usize, k: usize) -> Result<bool> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(nearest_neighbor(0, recon, refset)?.rank_of(ref_index)? <= k)
}

/// Fraction of rows strictly closer to their own initialization row than to
/// any reference row.
pub fn fraction_closer_to_init(recon: &Matrix, init: &Matrix, refset: &Matrix) -> Result<f64> {
    if recon.shape() != init.shape() {
        return Err(Error::Shape(format!("recon {:?} vs init {:?}", recon.shape(), init.shape())));
    }
    let table = nn_table(recon, refset)?;
    let hits = table
        .iter()
        .filter(|rec| sq_dist(recon.row(rec.recon_index), init.row(rec.recon_index)).sqrt() < rec.l2)
        .count();
    Ok(hits as f64 / recon.rows().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub avg_l2_to_gt: f64,
    pub avg_l2_to_partition: f64,
    pub avg_l2_to_random: f64,
}

/// Reference sets every grid cell is measured against.
#[derive(Debug, Clone, Copy)]
pub struct GridReferences<'a> {
    pub ground_truth: &'a Matrix,
    pub partition: &'a Matrix,
    pub random: &'a Matrix,
}

/// Averages NN distances per cell, in the order of `schemes`.
pub fn grid_aggregate(schemes: &[MixScheme], runs: &[(MixScheme, Matrix)], refs: GridReferences<'_>) -> Result<Vec<GridCell>> {
    schemes
        .iter()
        .map(|s| {
            let (_, recon) = runs
                .iter()
                .find(|(m, _)| m == s)
                .ok_or_else(|| Error::Config(format!("grid cell λ1={} λ2={} has no completed run", s.lambda1, s.lambda2)))?;
            Ok(GridCell {
                lambda1: s.lambda1,
                lambda2: s.lambda2,
                avg_l2_to_gt: mean_nn_l2(recon, refs.ground_truth)?,
                avg_l2_to_partition: mean_nn_l2(recon, refs.partition)?,
                avg_l2_to_random: mean_nn_l2(recon, refs.random)?,
            })
        })
        .collect()
}

pub fn grid_csv_rows(cells: &[GridCell]) -> Vec<Vec<String>> {
    cells
        .iter()
        .map(|c| {
            vec![
                c.lambda1.to_string(),
                c.lambda2.to_string(),
                c.avg_l2_to_gt.to_string(),
                c.avg_l2_to_partition.to_string(),
                c.avg_l2_to_random.to_string(),
            ]
        })
        .collect()
}

pub const GRID_CSV_HEADER: [&str; 5] = ["lambda1", "lambda2", "avg_l2_to_gt", "avg_l2_to_partition", "avg_l2_to_random"];
pub const NN_CSV_HEADER: [&str; 4] = ["recon_index", "nn_index", "l2", "rank"];

/// NN table rows; `rank` is the rank of the claimed counterpart (slot `i`
/// against reference row `i` when `counterparts` is `None`).
pub fn nn_csv_rows(table: &[NNRecord], counterparts: Option<&[usize]>) -> Result<Vec<Vec<String>>> {
    table
        .iter()
        .map(|r| {
            let claimed = counterparts.map_or(r.recon_index, |c| c[r.recon_index]);
            let rank = if claimed < r.distances.len() { r.rank_of(claimed)?.to_string() } else { String::new() };
            Ok(vec![r.recon_index.to_string(), r.nn_index.to_string(), r.l2.to_string(), rank])
        })
        .collect()
}
