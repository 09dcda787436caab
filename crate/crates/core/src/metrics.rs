//! Loss functions and evaluation metrics: correspondence RMSE, Chamfer
//! distance, and the one-sided nearest-neighbor losses driving training.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PointCloud;

/// Balance between the global loss and the rigid-module loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidSpec(format!("alpha {alpha} outside [0,1]")));
        }
        Ok(Self { alpha })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

/// Per-pair evaluation record, serialized as JSON by the CLI `eval` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub pair_id: String,
    pub pre_rmse: f64,
    pub rmse: f64,
    pub cd: f64,
}

/// Correspondence-based RMSE: sqrt(mean ||p_i - q_i||^2), uses point order.
pub fn rmse_corresponded(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(p, q)| (p - q).norm_squared())
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Index and squared distance of the nearest point in `cloud`. Brute force;
/// ties go to the lowest index (strict `<` comparison).
pub fn nearest_in(p: &Vector3<f64>, cloud: &PointCloud) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (j, q) in cloud.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if d2 < best.1 {
            best = (j, d2);
        }
    }
    best
}

/// Symmetric Chamfer distance: mean-min squared distances in both directions.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let dir = |from: &PointCloud, to: &PointCloud| -> f64 {
        from.iter().map(|p| nearest_in(p, to).1).sum::<f64>() / from.len() as f64
    };
    Ok(dir(a, b) + dir(b, a))
}

/// One-directional loss: sqrt(mean_i min_j ||a_i - t_j||^2), from `aligned`
/// onto `target`. Used for both the global and the rigid-module loss.
pub fn loss_global(aligned: &PointCloud, target: &PointCloud) -> Result<f64> {
    Ok(loss_global_with_grad(aligned, target)?.0)
}

/// Loss plus its analytic gradient w.r.t. each point of `aligned`.
///
/// grad_i = (a_i - t_nn(i)) / (N * loss); defined as zero at loss = 0, and the
/// lowest-index nearest neighbor is used at ties (subgradient).
pub fn loss_global_with_grad(
    aligned: &PointCloud,
    target: &PointCloud,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    if aligned.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = aligned.len() as f64;
    let mut nn = Vec::with_capacity(aligned.len());
    let mut mean_sq = 0.0;
    for p in aligned.iter() {
        let (j, d2) = nearest_in(p, target);
        nn.push(j);
        mean_sq += d2 / n;
    }
    let loss = mean_sq.sqrt();
    let grad = if loss == 0.0 {
        vec![Vector3::zeros(); aligned.len()]
    } else {
        aligned
            .iter()
            .zip(nn.iter())
            .map(|(p, &j)| (p - target.points()[j]) / (n * loss))
            .collect()
    };
    Ok((loss, grad))
}

/// Identical contract to [`loss_global`], applied to the rigid stage output.
pub fn loss_rigid(rigid_out: &PointCloud, target: &PointCloud) -> Result<f64> {
    loss_global(rigid_out, target)
}

/// alpha * gl + (1 - alpha) * rd.
pub fn loss_total(gl: f64, rd: f64, w: &LossWeights) -> f64 {
    w.alpha * gl + (1.0 - w.alpha) * rd
}
