//! Trainable per-node sigmoid memberships.
//!
//! Raw hybrid distances are unbounded and node scales differ, so each node
//! gets a falling sigmoid `O_j(d) = 1 / (1 + exp(alpha_j (d - beta_j)))`
//! that maps its distance to a membership in (0, 1). The parameters are fit
//! by gradient descent against neighborhood targets: a sample should have
//! membership 1 at its best node, 0.5 at the 4-connected neighbors, 0.25 at
//! the remaining ring of the 3x3 patch, and 0 elsewhere. The resulting
//! membership vector is the map-derived feature set consumed by the
//! classifier.

use crate::data::Spectrum;
use crate::error::{Error, Result};
use crate::som::{bmu_euclidean, hybrid_features_batch, NodeStats, SomGrid};
use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Gradient descent settings for sigmoid fitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MembershipConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Lower clamp on every `alpha_j`; keeps sigmoids falling.
    pub alpha_floor: f64,
}

impl Default for MembershipConfig {
    fn default() -> Self {
        MembershipConfig {
            lr: 0.05,
            epochs: 500,
            alpha_floor: 1e-4,
        }
    }
}

impl MembershipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("membership lr must be > 0, got {}", self.lr)));
        }
        if !(self.alpha_floor > 0.0) {
            return Err(Error::Config(format!(
                "alpha floor must be > 0, got {}",
                self.alpha_floor
            )));
        }
        Ok(())
    }
}

/// One falling sigmoid per node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmoidLayer {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Boundary assigned to nodes with no covariance data; with `alpha = 1` the
/// sigmoid output is indistinguishable from zero for every distance `>= 0`.
pub const PINNED_BETA: f64 = -1e6;

/// `1 / (1 + exp(a))` without overflow for any finite `a`.
fn stable_logistic(a: f64) -> f64 {
    // logistic(-a); split on sign so exp never sees a large positive argument
    if a <= 0.0 {
        1.0 / (1.0 + a.exp())
    } else {
        let e = (-a).exp();
        e / (1.0 + e)
    }
}

impl SigmoidLayer {
    pub fn node_count(&self) -> usize {
        self.alpha.len()
    }

    /// Membership of a distance `d` at node `j`, in (0, 1).
    pub fn membership(&self, j: usize, d: f64) -> f64 {
        stable_logistic(self.alpha[j] * (d - self.beta[j]))
    }

    /// Apply each node's sigmoid to its distance.
    pub fn memberships(&self, dists: &[f64]) -> Vec<f64> {
        dists
            .iter()
            .enumerate()
            .map(|(j, d)| self.membership(j, *d))
            .collect()
    }
}

/// Neighborhood target vector for a sample whose best node is `bmu`:
/// 1 there, 0.5 at 4-connected neighbors, 0.25 at the diagonal ring, 0
/// elsewhere. Patch cells outside the grid are simply absent.
pub fn make_targets(grid: &SomGrid, bmu: usize) -> Vec<f64> {
    let mut t = vec![0.0; grid.node_count()];
    let (br, bc) = grid.coords(bmu);
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            let r = br as i64 + dr;
            let c = bc as i64 + dc;
            if r < 0 || c < 0 || r >= grid.rows as i64 || c >= grid.cols as i64 {
                continue;
            }
            let j = grid.flat_index(r as usize, c as usize);
            t[j] = match dr.abs() + dc.abs() {
                0 => 1.0,
                1 => 0.5,
                _ => 0.25,
            };
        }
    }
    t
}

/// Squared-error objective and its gradients, full batch.
///
/// `E = sum_i 1/2 sum_j (t_ij - O_ij)^2` with
/// `dO/dalpha = -(d - beta) O (1 - O)` and `dO/dbeta = alpha O (1 - O)`.
/// Public so gradient-check suites can difference it directly.
pub fn objective_and_grads(
    dists: &Array2<f64>,
    targets: &Array2<f64>,
    alpha: &[f64],
    beta: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let nodes = alpha.len();
    let mut loss = 0.0;
    let mut g_alpha = vec![0.0; nodes];
    let mut g_beta = vec![0.0; nodes];
    for (drow, trow) in dists.axis_iter(Axis(0)).zip(targets.axis_iter(Axis(0))) {
        for j in 0..nodes {
            let d = drow[j];
            let o = stable_logistic(alpha[j] * (d - beta[j]));
            let err = trow[j] - o;
            loss += 0.5 * err * err;
            let oo = o * (1.0 - o);
            // dE/dO = -(t - O)
            g_alpha[j] += err * (d - beta[j]) * oo;
            g_beta[j] += -err * alpha[j] * oo;
        }
    }
    (loss, g_alpha, g_beta)
}

/// Fit the sigmoid layer on `data` against neighborhood targets.
///
/// Distances and best nodes come from the hybrid metric. `beta_j` starts at
/// the mean distance of the samples matched to node `j` (grand mean over all
/// distances if the node matched nothing) and `alpha_j` at `4 / beta_j`, so
/// every sigmoid begins centered on its node's distance scale.
pub fn train_sigmoids(
    grid: &SomGrid,
    stats: &NodeStats,
    data: &[Spectrum],
    angle_weight: f64,
    cfg: &MembershipConfig,
) -> Result<SigmoidLayer> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("sigmoid training data".into()));
    }
    let bands = grid.bands();
    let mut batch = Array2::zeros((data.len(), bands));
    for (i, s) in data.iter().enumerate() {
        if s.bands() != bands {
            return Err(Error::dimension(format!("sigmoid sample {i}"), bands, s.bands()));
        }
        batch.row_mut(i).assign(&ArrayView1::from(s.values()));
    }
    let dists = hybrid_features_batch(grid, stats, &batch, angle_weight)?;

    let nodes = grid.node_count();
    // Distance band of each node's covariance cloud (Euclidean partition),
    // used to bound the fitted boundary below.
    let mut own_sums = vec![0.0; nodes];
    let mut own_sq_sums = vec![0.0; nodes];
    let mut own_hits = vec![0usize; nodes];
    for (i, s) in data.iter().enumerate() {
        let j = bmu_euclidean(grid, s)?;
        let d = dists[[i, j]];
        own_sums[j] += d;
        own_sq_sums[j] += d * d;
        own_hits[j] += 1;
    }

    let mut targets = Array2::zeros((data.len(), nodes));
    let mut sums = vec![0.0; nodes];
    let mut sq_sums = vec![0.0; nodes];
    let mut hits = vec![0usize; nodes];
    for (i, drow) in dists.axis_iter(Axis(0)).enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, &d) in drow.iter().enumerate() {
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        targets
            .row_mut(i)
            .assign(&ArrayView1::from(&make_targets(grid, best)[..]));
        sums[best] += best_d;
        sq_sums[best] += best_d * best_d;
        hits[best] += 1;
    }
    let grand_mean = dists.mean().unwrap_or(1.0).max(cfg.alpha_floor);
    let mut beta: Vec<f64> = (0..nodes)
        .map(|j| {
            if hits[j] > 0 {
                (sums[j] / hits[j] as f64).max(cfg.alpha_floor)
            } else {
                grand_mean
            }
        })
        .collect();
    // Slope init: the transition width tracks the spread of the node's own
    // matched distances rather than their absolute scale (4/beta leaves the
    // sigmoid so shallow that squared-error gradients saturate before the
    // slope can recover). Singleton and empty nodes fall back to 8/beta.
    let mut alpha: Vec<f64> = (0..nodes)
        .map(|j| {
            let fallback = beta[j] / 4.0;
            let spread = if hits[j] > 1 {
                let m = sums[j] / hits[j] as f64;
                let var = (sq_sums[j] / hits[j] as f64 - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    fallback
                }
            } else {
                fallback
            };
            (2.0 / spread.max(1e-12)).clamp(cfg.alpha_floor, 1e4)
        })
        .collect();

    for _ in 0..cfg.epochs {
        let (_, g_alpha, g_beta) = objective_and_grads(&dists, &targets, &alpha, &beta);
        for j in 0..nodes {
            alpha[j] = (alpha[j] - cfg.lr * g_alpha[j]).max(cfg.alpha_floor);
            beta[j] -= cfg.lr * g_beta[j];
        }
    }
    // Boundary cap: neighborhood targets attach 0.5/0.25 values to samples
    // from adjacent clouds, and in this node's metric those can sit orders of
    // magnitude beyond its own samples, dragging the fitted boundary far into
    // space that should read as dissimilar. A membership boundary may not
    // exceed the node's own distance band (mean + 6 std over the samples that
    // define its covariance); outliers must stay uniformly low.
    for j in 0..nodes {
        if own_hits[j] > 1 {
            let m = own_sums[j] / own_hits[j] as f64;
            let var = (own_sq_sums[j] / own_hits[j] as f64 - m * m).max(0.0);
            beta[j] = beta[j].min(m + 6.0 * var.sqrt());
        }
    }
    // Two classes of node cannot be calibrated and are pinned to zero
    // membership. Empty nodes run on the isotropic fallback scale, so their
    // fitted boundary is arbitrary and can accept anything that lands closer
    // than the training cloud. Offset nodes have a weight far from the cloud
    // that defines their covariance (in that covariance's own metric), so
    // every distance they measure carries a large constant bias and the
    // boundary lands far outside the data, again accepting arbitrary points.
    let offset_limit = 2.0 * (bands as f64).sqrt();
    for j in 0..nodes {
        if stats.counts[j] == 0 || stats.offset[j] > offset_limit {
            alpha[j] = 1.0;
            beta[j] = PINNED_BETA;
        }
    }
    Ok(SigmoidLayer { alpha, beta })
}

/// Membership vector of one spectrum: hybrid distances to every node passed
/// through the node sigmoids.
pub fn som_feature_vector(
    grid: &SomGrid,
    stats: &NodeStats,
    layer: &SigmoidLayer,
    x: &Spectrum,
    angle_weight: f64,
) -> Result<Vec<f64>> {
    let dists = crate::som::hybrid_features(grid, stats, x, angle_weight)?;
    Ok(layer.memberships(&dists))
}

/// Batched [`som_feature_vector`]: rows are spectra, output is
/// `batch x node_count`.
pub fn som_features_batch(
    grid: &SomGrid,
    stats: &NodeStats,
    layer: &SigmoidLayer,
    batch: &Array2<f64>,
    angle_weight: f64,
) -> Result<Array2<f64>> {
    let mut dists = hybrid_features_batch(grid, stats, batch, angle_weight)?;
    for mut row in dists.axis_iter_mut(Axis(0)) {
        for (j, d) in row.iter_mut().enumerate() {
            *d = layer.membership(j, *d);
        }
    }
    Ok(dists)
}

/// Write sigmoid parameters as CSV rows `j,alpha,beta`.
pub fn save_sigmoid_csv(path: impl AsRef<Path>, layer: &SigmoidLayer) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "j,alpha,beta")?;
    for j in 0..layer.node_count() {
        writeln!(out, "{},{},{}", j, layer.alpha[j], layer.beta[j])?;
    }
    Ok(())
}

/// Read sigmoid parameters written by [`save_sigmoid_csv`].
pub fn load_sigmoid_csv(path: impl AsRef<Path>) -> Result<SigmoidLayer> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines();
    match lines.next() {
        Some("j,alpha,beta") => {}
        Some(other) => {
            return Err(Error::Parse {
                row: 0,
                msg: format!("sigmoid csv header must be j,alpha,beta, got {other:?}"),
            })
        }
        None => return Err(Error::EmptyInput("sigmoid csv is empty".into())),
    }
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(Error::dimension(format!("sigmoid csv row {row}"), 3, cells.len()));
        }
        let j: usize = cells[0].parse().map_err(|_| Error::Parse {
            row,
            msg: format!("node index {:?} is not an integer", cells[0]),
        })?;
        if j != alpha.len() {
            return Err(Error::Parse {
                row,
                msg: format!("node indices must be 0,1,2,...; got {j}"),
            });
        }
        let num = |cell: &str, what: &str| -> Result<f64> {
            cell.parse().map_err(|_| Error::Parse {
                row,
                msg: format!("{what} value {cell:?} is not a number"),
            })
        };
        alpha.push(num(cells[1], "alpha")?);
        beta.push(num(cells[2], "beta")?);
    }
    if alpha.is_empty() {
        return Err(Error::EmptyInput("sigmoid csv has no rows".into()));
    }
    Ok(SigmoidLayer { alpha, beta })
}
