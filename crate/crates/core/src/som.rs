//! Kohonen self-organizing map, per-node covariance estimation, and the
//! hybrid Mahalanobis / spectral-angle distance used to compare spectra
//! against map nodes.
//!
//! Euclidean distance treats every band alike and separates the same
//! material under different illumination; the hybrid distance combines a
//! per-node Mahalanobis term (band variances) with a spectral-angle term
//! (illumination invariant):
//!
//! `d(x, node j) = sqrt((x-w_j)^T (S_j + lambda I)^-1 (x-w_j))
//!                 + angle_weight * arccos(cos(x, w_j))`
//!
//! Distances here operate on raw reflectance, not standardized spectra:
//! the angle term is only meaningful on unstandardized data.

use crate::data::Spectrum;
use crate::error::{Error, Result};
use crate::seed;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Weight on the spectral-angle term of the hybrid distance.
pub const ANGLE_WEIGHT: f64 = 40.0;

/// Rectangular node lattice. Node `(r, c)` has flat index `r * cols + c`;
/// weights are stored one node per row, `node_count x bands`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SomGrid {
    pub rows: usize,
    pub cols: usize,
    pub weights: Array2<f64>,
}

impl SomGrid {
    pub fn node_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn bands(&self) -> usize {
        self.weights.ncols()
    }

    pub fn coords(&self, j: usize) -> (usize, usize) {
        (j / self.cols, j % self.cols)
    }

    pub fn flat_index(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    pub fn weight(&self, j: usize) -> ArrayView1<'_, f64> {
        self.weights.row(j)
    }
}

/// Kohonen training schedule. Learning rate and neighborhood radius decay
/// exponentially from their initial to final values across epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SomConfig {
    pub epochs: usize,
    pub eta0: f64,
    pub eta1: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    /// Covariance ridge, strictly positive. See [`ridge_for`].
    pub ridge: f64,
    pub seed: u64,
}

impl SomConfig {
    /// Default schedule for a `rows x cols` grid: 40 epochs, eta 0.5 -> 0.01,
    /// sigma max(rows, cols)/2 -> 0.5.
    pub fn defaults(rows: usize, cols: usize, ridge: f64, seed: u64) -> Self {
        SomConfig {
            epochs: 40,
            eta0: 0.5,
            eta1: 0.01,
            sigma0: (rows.max(cols) as f64) / 2.0,
            sigma1: 0.5,
            ridge,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("som epochs must be >= 1".into()));
        }
        if !(self.eta0 >= self.eta1 && self.eta1 > 0.0) {
            return Err(Error::Config(format!(
                "learning rate schedule must satisfy eta0 >= eta1 > 0, got {} -> {}",
                self.eta0, self.eta1
            )));
        }
        if !(self.sigma0 >= self.sigma1 && self.sigma1 > 0.0) {
            return Err(Error::Config(format!(
                "neighborhood schedule must satisfy sigma0 >= sigma1 > 0, got {} -> {}",
                self.sigma0, self.sigma1
            )));
        }
        if !(self.ridge > 0.0) {
            return Err(Error::Config(format!(
                "ridge must be > 0, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// Default covariance ridge: `1e-3 * mean band variance` of the training
/// data (population convention), so the regularization tracks the data scale.
pub fn ridge_for(data: &[Spectrum]) -> f64 {
    if data.is_empty() {
        return 1e-3;
    }
    let b = data[0].bands();
    let n = data.len() as f64;
    let mut mean = vec![0.0; b];
    for s in data {
        for (m, v) in mean.iter_mut().zip(s.values()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut total = 0.0;
    for s in data {
        for (v, m) in s.values().iter().zip(&mean) {
            total += (v - m) * (v - m);
        }
    }
    let mean_var = total / (n * b as f64);
    // keep strictly positive even for constant data
    (1e-3 * mean_var).max(1e-12)
}

fn check_bands(context: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dimension(context, expected, got));
    }
    Ok(())
}

/// Train a SOM with online Kohonen updates.
///
/// Weights start as training samples drawn under `cfg.seed`; each epoch
/// visits the data in a seeded shuffle, moves every node toward the sample
/// with a Gaussian grid-distance neighborhood around the Euclidean BMU, and
/// decays `eta`/`sigma` exponentially per epoch. Deterministic given the
/// seed.
pub fn train_som(data: &[Spectrum], cfg: &SomConfig, rows: usize, cols: usize) -> Result<SomGrid> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("som training data".into()));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!(
            "grid shape must be at least 1x1, got {rows}x{cols}"
        )));
    }
    let bands = data[0].bands();
    for (i, s) in data.iter().enumerate() {
        check_bands(&format!("som training sample {i}"), bands, s.bands())?;
    }

    let n_nodes = rows * cols;
    let mut rng = seed::stream(cfg.seed, &[seed::stage::SOM]);
    let mut weights = Array2::zeros((n_nodes, bands));
    for j in 0..n_nodes {
        let pick = rng.random_range(0..data.len());
        weights
            .row_mut(j)
            .assign(&ArrayView1::from(data[pick].values()));
    }
    let mut grid = SomGrid {
        rows,
        cols,
        weights,
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let frac = if cfg.epochs > 1 {
            epoch as f64 / (cfg.epochs - 1) as f64
        } else {
            0.0
        };
        let eta = cfg.eta0 * (cfg.eta1 / cfg.eta0).powf(frac);
        let sigma = cfg.sigma0 * (cfg.sigma1 / cfg.sigma0).powf(frac);
        let two_sigma_sq = 2.0 * sigma * sigma;

        order.shuffle(&mut rng);
        for &idx in &order {
            let x = data[idx].values();
            let b = bmu_euclidean_values(&grid, x);
            let (br, bc) = grid.coords(b);
            for j in 0..n_nodes {
                let (jr, jc) = grid.coords(j);
                let dr = jr as f64 - br as f64;
                let dc = jc as f64 - bc as f64;
                let h = (-(dr * dr + dc * dc) / two_sigma_sq).exp();
                let step = eta * h;
                let mut w = grid.weights.row_mut(j);
                for (wv, xv) in w.iter_mut().zip(x) {
                    *wv += step * (xv - *wv);
                }
            }
        }
    }
    Ok(grid)
}

fn squared_euclidean(a: &[f64], b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn bmu_euclidean_values(grid: &SomGrid, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..grid.node_count() {
        let d = squared_euclidean(x, grid.weights.row(j));
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Flat index of the node nearest to `x` in Euclidean distance. Ties break
/// toward the smallest flat index.
pub fn bmu_euclidean(grid: &SomGrid, x: &Spectrum) -> Result<usize> {
    check_bands("bmu_euclidean", grid.bands(), x.bands())?;
    Ok(bmu_euclidean_values(grid, x.values()))
}

/// Per-node second-order statistics: the population covariance of the
/// samples whose Euclidean BMU is that node, plus the Cholesky factor of
/// `S_j + lambda I` used by the Mahalanobis term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeStats {
    /// Population covariance per node; zero matrix when `n_j <= 1`.
    pub cov: Vec<Array2<f64>>,
    /// Lower Cholesky factor `L` with `L L^T = S_j + lambda I`.
    pub chol: Vec<Array2<f64>>,
    /// Explicit `L^{-1}`, kept for the batched distance path.
    chol_inv: Vec<Array2<f64>>,
    /// Samples assigned to each node.
    pub counts: Vec<usize>,
    /// Mahalanobis distance from each node weight to its own sample mean,
    /// in the node's regularized metric; 0 for empty nodes. Large values
    /// flag nodes whose weight does not represent the cloud that defines
    /// their covariance, so distances measured from them are uncalibrated.
    pub offset: Vec<f64>,
    pub lambda: f64,
}

impl NodeStats {
    pub fn node_count(&self) -> usize {
        self.cov.len()
    }

    pub fn bands(&self) -> usize {
        self.cov[0].nrows()
    }
}

/// Lower-triangular Cholesky factorization. Fails only if the matrix is not
/// positive definite.
fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "cholesky pivot {i} is not positive ({sum})"
                    )));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

fn lower_triangular_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::zeros((n, n));
    for i in 0..n {
        inv[[i, i]] = 1.0 / l[[i, i]];
        for j in 0..i {
            let mut sum = 0.0;
            for k in j..i {
                sum += l[[i, k]] * inv[[k, j]];
            }
            inv[[i, j]] = -sum / l[[i, i]];
        }
    }
    inv
}

/// Solve `L z = d` by forward substitution.
fn forward_solve(l: &Array2<f64>, d: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut sum = d[i];
        for k in 0..i {
            sum -= l[[i, k]] * z[k];
        }
        z[i] = sum / l[[i, i]];
    }
    z
}

/// Partition `data` by Euclidean BMU and estimate one regularized covariance
/// per node. Nodes with at most one sample get the zero covariance, so their
/// distance reduces to a ridge-scaled Euclidean distance.
pub fn estimate_node_stats(grid: &SomGrid, data: &[Spectrum], lambda: f64) -> Result<NodeStats> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("ridge must be > 0, got {lambda}")));
    }
    let bands = grid.bands();
    let n_nodes = grid.node_count();
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for (i, s) in data.iter().enumerate() {
        check_bands(&format!("node stats sample {i}"), bands, s.bands())?;
        assigned[bmu_euclidean_values(grid, s.values())].push(i);
    }

    let mut cov = Vec::with_capacity(n_nodes);
    let mut chol = Vec::with_capacity(n_nodes);
    let mut chol_inv = Vec::with_capacity(n_nodes);
    let mut counts = Vec::with_capacity(n_nodes);
    let mut offset = Vec::with_capacity(n_nodes);
    for (node, members) in assigned.iter().enumerate() {
        let n = members.len();
        let mut s = Array2::<f64>::zeros((bands, bands));
        let mut mean = Array1::<f64>::zeros(bands);
        if n > 0 {
            for &i in members {
                mean += &ArrayView1::from(data[i].values());
            }
            mean /= n as f64;
        }
        if n > 1 {
            for &i in members {
                let d = &ArrayView1::from(data[i].values()) - &mean;
                for r in 0..bands {
                    for c in 0..=r {
                        s[[r, c]] += d[r] * d[c];
                    }
                }
            }
            for r in 0..bands {
                for c in 0..=r {
                    s[[r, c]] /= n as f64;
                    s[[c, r]] = s[[r, c]];
                }
            }
        }
        let mut ridged = s.clone();
        for i in 0..bands {
            ridged[[i, i]] += lambda;
        }
        let l = cholesky(&ridged)?;
        let off = if n > 0 {
            let d: Vec<f64> = mean
                .iter()
                .zip(grid.weight(node))
                .map(|(m, w)| m - w)
                .collect();
            let z = forward_solve(&l, &d);
            z.iter().map(|v| v * v).sum::<f64>().sqrt()
        } else {
            0.0
        };
        chol_inv.push(lower_triangular_inverse(&l));
        chol.push(l);
        cov.push(s);
        counts.push(n);
        offset.push(off);
    }
    Ok(NodeStats {
        cov,
        chol,
        chol_inv,
        counts,
        offset,
        lambda,
    })
}

fn mahalanobis_values(grid: &SomGrid, stats: &NodeStats, j: usize, x: &[f64]) -> f64 {
    let w = grid.weights.row(j);
    let diff: Vec<f64> = x.iter().zip(w.iter()).map(|(a, b)| a - b).collect();
    let z = forward_solve(&stats.chol[j], &diff);
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mahalanobis distance from `x` to node `j`:
/// `sqrt((x - w_j)^T (S_j + lambda I)^{-1} (x - w_j))`, computed through the
/// stored Cholesky factor.
pub fn mahalanobis(grid: &SomGrid, stats: &NodeStats, j: usize, x: &Spectrum) -> Result<f64> {
    check_bands("mahalanobis", grid.bands(), x.bands())?;
    Ok(mahalanobis_values(grid, stats, j, x.values()))
}

fn spectral_angle_values(x: &[f64], y: &[f64]) -> Result<f64> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Numerical(
            "spectral angle of a zero-norm vector".into(),
        ));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    // rounding can push |cos| just past 1
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0).acos())
}

/// Angle between two spectra in radians, in `[0, pi]`. Invariant to positive
/// rescaling of either argument.
pub fn spectral_angle(x: &Spectrum, y: &Spectrum) -> Result<f64> {
    check_bands("spectral_angle", x.bands(), y.bands())?;
    spectral_angle_values(x.values(), y.values())
}

fn hybrid_distance_values(
    grid: &SomGrid,
    stats: &NodeStats,
    j: usize,
    x: &[f64],
    angle_weight: f64,
) -> Result<f64> {
    let w = grid.weights.row(j);
    let angle = spectral_angle_values(x, w.as_slice().expect("contiguous row"))?;
    Ok(mahalanobis_values(grid, stats, j, x) + angle_weight * angle)
}

/// The hybrid node distance: Mahalanobis plus `angle_weight` times the
/// spectral angle to the node weights.
pub fn hybrid_distance(
    grid: &SomGrid,
    stats: &NodeStats,
    j: usize,
    x: &Spectrum,
    angle_weight: f64,
) -> Result<f64> {
    check_bands("hybrid_distance", grid.bands(), x.bands())?;
    hybrid_distance_values(grid, stats, j, x.values(), angle_weight)
}

/// Hybrid distance from `x` to every node, in flat-index order.
pub fn hybrid_features(
    grid: &SomGrid,
    stats: &NodeStats,
    x: &Spectrum,
    angle_weight: f64,
) -> Result<Vec<f64>> {
    check_bands("hybrid_features", grid.bands(), x.bands())?;
    (0..grid.node_count())
        .map(|j| hybrid_distance_values(grid, stats, j, x.values(), angle_weight))
        .collect()
}

/// Hybrid distances for a batch (rows are spectra): returns
/// `batch x node_count`. Uses the stored `L^{-1}` so each node costs one
/// matrix product over the batch; agrees with [`hybrid_features`] to within
/// rounding.
pub fn hybrid_features_batch(
    grid: &SomGrid,
    stats: &NodeStats,
    batch: &Array2<f64>,
    angle_weight: f64,
) -> Result<Array2<f64>> {
    check_bands("hybrid_features_batch", grid.bands(), batch.ncols())?;
    let n = batch.nrows();
    let n_nodes = grid.node_count();
    let mut out = Array2::zeros((n, n_nodes));

    let row_norms: Vec<f64> = batch
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt())
        .collect();
    if let Some(i) = row_norms.iter().position(|&v| v == 0.0) {
        return Err(Error::Numerical(format!(
            "spectral angle of a zero-norm vector (batch row {i})"
        )));
    }

    for j in 0..n_nodes {
        let w = grid.weights.row(j);
        let w_norm = w.dot(&w).sqrt();
        if w_norm == 0.0 {
            return Err(Error::Numerical(format!(
                "spectral angle of a zero-norm node weight (node {j})"
            )));
        }
        // diff = batch - w_j, z = diff L^{-T}; mahalanobis = row norm of z
        let diff = batch - &w.insert_axis(Axis(0));
        let z = diff.dot(&stats.chol_inv[j].t());
        let dots = batch.dot(&w);
        for i in 0..n {
            let m = z.row(i).dot(&z.row(i)).sqrt();
            let cosine = (dots[i] / (row_norms[i] * w_norm)).clamp(-1.0, 1.0);
            out[[i, j]] = m + angle_weight * cosine.acos();
        }
    }
    Ok(out)
}

/// Metric used to pick best matching units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Euclidean,
    Hybrid,
}

/// BMU of `x` under the chosen metric; ties break toward the smallest flat
/// index.
pub fn bmu(
    grid: &SomGrid,
    stats: &NodeStats,
    x: &Spectrum,
    metric: Metric,
    angle_weight: f64,
) -> Result<usize> {
    check_bands("bmu", grid.bands(), x.bands())?;
    match metric {
        Metric::Euclidean => Ok(bmu_euclidean_values(grid, x.values())),
        Metric::Hybrid => {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..grid.node_count() {
                let d = hybrid_distance_values(grid, stats, j, x.values(), angle_weight)?;
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            Ok(best)
        }
    }
}

/// Per-class counts of how often each node is the BMU.
#[derive(Debug, Clone)]
pub struct BmuHistogram {
    pub classes: Vec<String>,
    /// `classes.len() x node_count`, each row sums to the class sample count.
    pub counts: Vec<Vec<usize>>,
}

/// Count BMUs per node for each named group of samples.
pub fn bmu_histogram(
    grid: &SomGrid,
    stats: &NodeStats,
    groups: &[(String, Vec<Spectrum>)],
    metric: Metric,
    angle_weight: f64,
) -> Result<BmuHistogram> {
    if groups.is_empty() || groups.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::EmptyInput("bmu_histogram needs non-empty groups".into()));
    }
    let mut classes = Vec::with_capacity(groups.len());
    let mut counts = Vec::with_capacity(groups.len());
    for (name, samples) in groups {
        let mut row = vec![0usize; grid.node_count()];
        for s in samples {
            row[bmu(grid, stats, s, metric, angle_weight)?] += 1;
        }
        classes.push(name.clone());
        counts.push(row);
    }
    Ok(BmuHistogram { classes, counts })
}

/// Write node weights as CSV rows `r,c,b0,...,b{B-1}`.
pub fn save_som_csv(path: impl AsRef<Path>, grid: &SomGrid) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    let header: Vec<String> = ["r", "c"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..grid.bands()).map(|i| format!("b{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for j in 0..grid.node_count() {
        let (r, c) = grid.coords(j);
        let mut row = vec![r.to_string(), c.to_string()];
        row.extend(grid.weights.row(j).iter().map(|v| v.to_string()));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Read node weights written by [`save_som_csv`].
pub fn load_som_csv(path: impl AsRef<Path>) -> Result<SomGrid> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::EmptyInput("som csv is empty".into()))?;
    let bands = header.split(',').count().saturating_sub(2);
    if bands == 0 || !header.starts_with("r,c,") {
        return Err(Error::Parse {
            row: 0,
            msg: format!("som csv header must be r,c,b0,...; got {header:?}"),
        });
    }
    let mut entries: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let (mut max_r, mut max_c) = (0usize, 0usize);
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != bands + 2 {
            return Err(Error::dimension(
                format!("som csv row {row}"),
                bands + 2,
                cells.len(),
            ));
        }
        let parse = |cell: &str, what: &str| -> Result<f64> {
            cell.parse().map_err(|_| Error::Parse {
                row,
                msg: format!("{what} value {cell:?} is not a number"),
            })
        };
        let r = parse(cells[0], "row")? as usize;
        let c = parse(cells[1], "col")? as usize;
        let mut w = Vec::with_capacity(bands);
        for cell in &cells[2..] {
            w.push(parse(cell, "weight")?);
        }
        max_r = max_r.max(r);
        max_c = max_c.max(c);
        entries.push((r, c, w));
    }
    let (rows, cols) = (max_r + 1, max_c + 1);
    if entries.len() != rows * cols {
        return Err(Error::dimension("som csv node count", rows * cols, entries.len()));
    }
    let mut weights = Array2::zeros((rows * cols, bands));
    for (r, c, w) in entries {
        weights
            .row_mut(r * cols + c)
            .assign(&ArrayView1::from(&w[..]));
    }
    Ok(SomGrid {
        rows,
        cols,
        weights,
    })
}

/// Write a BMU histogram as CSV rows `class,node,count` (all nodes listed).
pub fn save_histogram_csv(path: impl AsRef<Path>, hist: &BmuHistogram) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "class,node,count")?;
    for (class, counts) in hist.classes.iter().zip(&hist.counts) {
        for (node, count) in counts.iter().enumerate() {
            writeln!(out, "{class},{node},{count}")?;
        }
    }
    Ok(())
}
