//! Point-cloud spatial primitives.
//!
//! Every tie between equally distant or equally ranked points is broken on
//! coordinates (lexicographic x, y, z), never on input order, so each
//! operation returns the same set of points however the input is permuted.

mod augment;
mod interp;
mod knn;
mod sampling;
mod window;

use std::cmp::Ordering;

pub use augment::{augment, inverse_permutation, perturb, random_permutation, Augmentation, Perturbation};
pub use interp::{interp_weights, interp_weights_k, InterpWeights};
pub use knn::{knn, knn_brute_force, NeighborTable};
pub use sampling::{fps, grid_sample};
pub use window::{window_assign, window_assign_offset, WindowId};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Lexicographic order on coordinates using IEEE total ordering.
pub fn lex_cmp(a: &Point3, b: &Point3) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}

pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Positions, per-point features and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    /// Row-major `N × channels`.
    pub features: Vec<f64>,
    pub channels: usize,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, features: Vec<f64>, channels: usize, labels: Option<Vec<u32>>) -> Result<Self> {
        let cloud = PointCloud {
            positions,
            features,
            channels,
            labels,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn empty(channels: usize) -> Self {
        PointCloud {
            positions: Vec::new(),
            features: Vec::new(),
            channels,
            labels: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.features.len() != n * self.channels {
            return Err(Error::invalid(format!(
                "features hold {} values, expected {n} points × {} channels",
                self.features.len(),
                self.channels
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::invalid(format!("{} labels for {n} points", l.len())));
            }
        }
        if let Some(i) = self.positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("non-finite position at point {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Reorders points so that output point `i` is input point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> PointCloud {
        let c = self.channels;
        PointCloud {
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            features: order.iter().flat_map(|&i| self.features[i * c..(i + 1) * c].iter().copied()).collect(),
            channels: c,
            labels: self.labels.as_ref().map(|l| order.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Rounds every value to `f32` precision, the resolution of the binary file format.
    pub fn round_to_f32(&self) -> PointCloud {
        let r = |v: f64| v as f32 as f64;
        PointCloud {
            positions: self.positions.iter().map(|p| [r(p[0]), r(p[1]), r(p[2])]).collect(),
            features: self.features.iter().map(|&v| r(v)).collect(),
            channels: self.channels,
            labels: self.labels.clone(),
        }
    }

    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.positions.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }
}
