use super::{knn, Point3};
use crate::error::{Error, Result};

/// Inverse-squared-distance weights over the nearest sources of each target.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpWeights {
    pub k: usize,
    /// Row-major `T × k`.
    pub indices: Vec<usize>,
    /// Row-major `T × k`, each row summing to one.
    pub weights: Vec<f64>,
}

impl InterpWeights {
    pub fn num_targets(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }
}

/// Three-nearest-neighbour interpolation weights, `w ∝ 1/d²`.
///
/// A target that coincides with a source takes weight 1 on it.
pub fn interp_weights(targets: &[Point3], sources: &[Point3]) -> Result<InterpWeights> {
    if sources.len() < 3 {
        return Err(Error::invalid(format!("interpolation needs at least 3 sources, got {}", sources.len())));
    }
    interp_weights_k(targets, sources, 3)
}

/// As [`interp_weights`] with `k` neighbours (`1 <= k <= sources`).
pub fn interp_weights_k(targets: &[Point3], sources: &[Point3], k: usize) -> Result<InterpWeights> {
    if k == 0 {
        return Err(Error::invalid("interpolation needs k >= 1"));
    }
    let table = knn(targets, sources, k)?;
    let mut weights = Vec::with_capacity(targets.len() * k);
    for t in 0..targets.len() {
        let d = table.distance_row(t);
        if d[0] == 0.0 {
            weights.push(1.0);
            weights.extend(std::iter::repeat_n(0.0, k - 1));
            continue;
        }
        let inv: Vec<f64> = d.iter().map(|&d| 1.0 / (d * d)).collect();
        let total: f64 = inv.iter().sum();
        weights.extend(inv.iter().map(|w| w / total));
    }
    Ok(InterpWeights {
        k,
        indices: table.indices,
        weights,
    })
}
