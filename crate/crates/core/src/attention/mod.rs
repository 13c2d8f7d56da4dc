//! Stratified multi-head self-attention over flat query/key pair lists.
//!
//! Execution follows three steps over the `M` pairs of an [`IndexPairs`]:
//! gather a per-pair logit, softmax within each query's segment, then sum
//! probability-weighted values back per query. Relative positions enter through
//! quantized lookup tables (cRPE) or a small MLP bias.

mod kernel;
mod layer;
mod memory;
mod op;
mod oracle;

pub use kernel::{attention_core_backward, attention_core_forward, crpe_encode, crpe_encode_backward, scatter_softmax, CoreGrads, CoreOutput};
pub use layer::{AttentionGrads, AttentionLayer, AttentionSession, PositionEncoding, CRPE_INIT_SCALE};
pub use memory::{memory_footprint, MemoryFootprint};
pub use op::{attention_block, mlp_position_bias, stratified_attention, AttentionGeometry, AttentionVars, AttentionWorkspace};
pub use oracle::padded_attention_oracle;

use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::indexing::IndexPairs;

/// Table roles, in storage order.
pub const ROLES: [&str; 3] = ["q", "k", "v"];
/// Axes, in storage order.
pub const AXES: [&str; 3] = ["x", "y", "z"];

pub const ROLE_Q: usize = 0;
pub const ROLE_K: usize = 1;
pub const ROLE_V: usize = 2;

/// Bin of a relative coordinate: `floor((r + s_range) / (2 s_range / L))`,
/// clamped to `[0, L - 1]`.
pub fn quantize_rel(r: f64, s_range: f64, bins: usize) -> usize {
    let step = 2.0 * s_range / bins as f64;
    let idx = ((r + s_range) / step).floor();
    if idx.is_nan() || idx < 0.0 {
        0
    } else {
        (idx as usize).min(bins - 1)
    }
}

/// Per-pair relative coordinates `p_i - p_j` and their bins.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativePositions {
    pub r: Vec<[f64; 3]>,
    pub bins: Vec<[u16; 3]>,
    pub num_bins: usize,
    pub s_range: f64,
}

impl RelativePositions {
    pub fn new(positions: &[Point3], pairs: &IndexPairs, s_range: f64, num_bins: usize) -> Result<Self> {
        if num_bins < 2 || !num_bins.is_multiple_of(2) || num_bins > usize::from(u16::MAX) {
            return Err(Error::invalid(format!("bin count must be even and >= 2, got {num_bins}")));
        }
        if !(s_range > 0.0) {
            return Err(Error::invalid(format!("quantization range must be positive, got {s_range}")));
        }
        if pairs.num_points() != positions.len() {
            return Err(Error::invalid(format!(
                "pairs cover {} points but {} positions were given",
                pairs.num_points(),
                positions.len()
            )));
        }
        let r: Vec<[f64; 3]> = pairs
            .iter()
            .map(|(i, j)| {
                let (a, b) = (positions[i], positions[j]);
                [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
            })
            .collect();
        let bins = r.iter().map(|d| d.map(|v| quantize_rel(v, s_range, num_bins) as u16)).collect();
        Ok(RelativePositions { r, bins, num_bins, s_range })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Borrowed view of the nine cRPE tables, each `L × C`, ordered role-major
/// (`q_x, q_y, q_z, k_x, ...`).
#[derive(Clone, Copy, Debug)]
pub struct CrpeView<'a, T> {
    pub tables: [&'a [T]; 9],
    pub num_bins: usize,
    pub channels: usize,
}

impl<'a, T: Real> CrpeView<'a, T> {
    pub fn new(tables: [&'a [T]; 9], num_bins: usize, channels: usize) -> Result<Self> {
        if let Some(t) = tables.iter().find(|t| t.len() != num_bins * channels) {
            return Err(Error::Shape {
                op: "crpe tables",
                lhs: vec![num_bins, channels],
                rhs: vec![t.len()],
            });
        }
        Ok(CrpeView { tables, num_bins, channels })
    }

    pub fn table(&self, role: usize, axis: usize) -> &'a [T] {
        self.tables[role * 3 + axis]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_edges() {
        assert_eq!(quantize_rel(-0.16 + 1e-9, 0.16, 16), 0);
        assert_eq!(quantize_rel(0.0, 0.16, 16), 8);
        assert_eq!(quantize_rel(1.5 * 0.16, 0.16, 16), 15);
        assert_eq!(quantize_rel(-10.0, 0.16, 16), 0);
    }

    #[test]
    fn quantize_matches_bin_edges() {
        // bin b covers [-s + b*step, -s + (b+1)*step)
        let (s, l) = (0.32, 16);
        let step = 2.0 * s / l as f64;
        for b in 0..l {
            let centre = -s + (b as f64 + 0.5) * step;
            assert_eq!(quantize_rel(centre, s, l), b);
        }
    }

    #[test]
    fn relative_positions_rejects_odd_bins() {
        let pairs = IndexPairs::from_pairs(1, [(0, 0)]).unwrap();
        assert!(RelativePositions::new(&[[0.0; 3]], &pairs, 0.1, 7).is_err());
        let rel = RelativePositions::new(&[[0.0; 3]], &pairs, 0.1, 8).unwrap();
        assert_eq!(rel.bins, vec![[4, 4, 4]]);
    }
}
