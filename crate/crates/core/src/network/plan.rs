use std::cmp::Ordering;
use std::sync::Arc;

use super::ops::{KernelPointSet, NeighborWeights};
use super::{EmbeddingVariant, ModelConfig};
use crate::attention::{AttentionGeometry, PositionEncoding, RelativePositions};
use crate::error::{Error, Result};
use crate::geometry::{fps, interp_weights_k, knn, lex_cmp, NeighborTable, Point3, PointCloud};
use crate::indexing::{build_stratified_pairs, SparseParams, StratifiedParams};

/// Farthest-point centroids of a finer level and their kNN groups.
#[derive(Clone, Debug)]
pub struct DownPlan {
    pub centroids: Vec<usize>,
    /// One row per centroid over the finer points.
    pub groups: NeighborTable,
}

#[derive(Clone, Debug)]
pub struct StagePlan {
    pub positions: Vec<Point3>,
    /// Pairs for even (unshifted) and odd (shifted) blocks.
    pub geoms: [AttentionGeometry; 2],
}

#[derive(Clone, Debug)]
pub enum EmbedPlan {
    Linear,
    Max(NeighborTable),
    Mix(Arc<NeighborWeights>),
}

/// Everything the forward pass needs that depends only on point positions.
///
/// Points are processed in a canonical order (sorted by position, then
/// features), which makes the whole forward pass independent of input order.
#[derive(Clone, Debug)]
pub struct Plan {
    /// Canonical point `i` is input point `order[i]`.
    pub order: Vec<usize>,
    pub positions: Vec<Point3>,
    /// Canonical `N × input_channels` model input.
    pub input: Vec<f64>,
    pub input_channels: usize,
    pub embed: EmbedPlan,
    pub early: Option<DownPlan>,
    /// Interpolation from the first stage back to the input points.
    pub early_up: Option<Arc<NeighborWeights>>,
    pub stages: Vec<StagePlan>,
    /// `downs[s]` maps stage `s` to stage `s + 1`.
    pub downs: Vec<DownPlan>,
    /// `ups[s]` interpolates stage `s + 1` features onto stage `s` points.
    pub ups: Vec<Arc<NeighborWeights>>,
}

fn canonical_order(cloud: &PointCloud) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| {
        lex_cmp(&cloud.positions[a], &cloud.positions[b]).then_with(|| {
            cloud
                .feature_row(a)
                .iter()
                .zip(cloud.feature_row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    order
}

fn down_plan(positions: &[Point3], k: usize) -> Result<DownPlan> {
    let centroids = fps(positions, positions.len().div_ceil(4))?;
    let cpos: Vec<Point3> = centroids.iter().map(|&i| positions[i]).collect();
    let groups = knn(&cpos, positions, k.min(positions.len()))?;
    Ok(DownPlan { centroids, groups })
}

fn up_weights(targets: &[Point3], sources: &[Point3]) -> Result<Arc<NeighborWeights>> {
    let w = interp_weights_k(targets, sources, 3.min(sources.len()))?;
    Ok(Arc::new(NeighborWeights {
        k: w.k,
        blocks: 1,
        indices: w.indices,
        weights: w.weights,
        num_sources: sources.len(),
    }))
}

fn stage_plan(config: &ModelConfig, stage: usize, positions: Vec<Point3>) -> Result<StagePlan> {
    let s_win = config.s_win(stage);
    let sparse = config.use_stratified.then(|| SparseParams {
        scale: config.downsample_scale,
        s_win_large: config.s_win_large(stage),
        shift_large: false,
    });
    let candidates = match sparse {
        Some(_) => Some(fps(&positions, positions.len().div_ceil(config.downsample_scale))?),
        None => None,
    };
    let plain = StratifiedParams {
        s_win,
        shift_small: false,
        sparse,
    };
    let shifted = StratifiedParams {
        s_win,
        shift_small: config.use_shift && config.shift_small,
        sparse: sparse.map(|sp| SparseParams {
            shift_large: config.use_shift && config.shift_large,
            ..sp
        }),
    };
    let geom = |params: &StratifiedParams| -> Result<AttentionGeometry> {
        let pairs = build_stratified_pairs(&positions, params, candidates.as_deref())?;
        let rel = match config.position_encoding() {
            PositionEncoding::None => None,
            _ => Some(Arc::new(RelativePositions::new(&positions, &pairs, s_win, config.num_bins)?)),
        };
        Ok(AttentionGeometry { pairs: Arc::new(pairs), rel })
    };
    let even = geom(&plain)?;
    let odd = if shifted == plain || config.depths[stage] < 2 {
        even.clone()
    } else {
        geom(&shifted)?
    };
    Ok(StagePlan {
        positions,
        geoms: [even, odd],
    })
}

impl Plan {
    pub fn build(config: &ModelConfig, cloud: &PointCloud) -> Result<Plan> {
        config.validate()?;
        cloud.validate()?;
        if cloud.is_empty() {
            return Err(Error::invalid("the model needs at least one point"));
        }
        if cloud.channels != config.in_channels {
            return Err(Error::invalid(format!(
                "cloud has {} feature channels, model expects {}",
                cloud.channels, config.in_channels
            )));
        }
        let order = canonical_order(cloud);
        let origin = if config.recenter {
            cloud.bounds().expect("non-empty").0
        } else {
            [0.0; 3]
        };
        let positions: Vec<Point3> = order
            .iter()
            .map(|&i| {
                let p = cloud.positions[i];
                [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]]
            })
            .collect();
        let cin = config.input_channels();
        let mut input = Vec::with_capacity(order.len() * cin);
        for (&i, p) in order.iter().zip(&positions) {
            input.extend_from_slice(cloud.feature_row(i));
            if config.use_xyz_features {
                input.extend_from_slice(p);
            }
        }

        let k = config.knn_k.min(positions.len());
        let embed = match config.embedding {
            EmbeddingVariant::Linear => EmbedPlan::Linear,
            EmbeddingVariant::Maxpool => EmbedPlan::Max(knn(&positions, &positions, k)?),
            EmbeddingVariant::Avgpool => EmbedPlan::Mix(Arc::new(NeighborWeights::mean(&knn(&positions, &positions, k)?, positions.len()))),
            EmbeddingVariant::Kpconv => {
                let kp = KernelPointSet::icosahedral(config.kp_radius(), config.kp_sigma())?;
                EmbedPlan::Mix(Arc::new(kp.weights(&positions, &knn(&positions, &positions, k)?)))
            }
        };

        let (early, mut level) = if config.extra_early_downsample {
            let d = down_plan(&positions, config.knn_k)?;
            let p: Vec<Point3> = d.centroids.iter().map(|&i| positions[i]).collect();
            (Some(d), p)
        } else {
            (None, positions.clone())
        };
        let early_up = if early.is_some() { Some(up_weights(&positions, &level)?) } else { None };

        let mut stages = Vec::with_capacity(config.num_stages());
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        for s in 0..config.num_stages() {
            if s > 0 {
                let d = down_plan(&level, config.knn_k)?;
                let next: Vec<Point3> = d.centroids.iter().map(|&i| level[i]).collect();
                ups.push(up_weights(&level, &next)?);
                downs.push(d);
                level = next;
            }
            stages.push(stage_plan(config, s, level.clone())?);
        }
        Ok(Plan {
            order,
            positions,
            input,
            input_channels: cin,
            embed,
            early,
            early_up,
            stages,
            downs,
            ups,
        })
    }

    pub fn num_points(&self) -> usize {
        self.order.len()
    }

    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.positions.len()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_cloud(n: usize) -> PointCloud {
        let positions = (0..n).map(|i| [i as f64 * 0.03, 0.0, 0.0]).collect();
        PointCloud::new(positions, vec![0.5; n * 3], 3, None).unwrap()
    }

    #[test]
    fn stage_sizes_follow_quarter_chain() {
        let cfg = ModelConfig {
            depths: vec![1, 1, 1, 1],
            ..ModelConfig::toy()
        };
        for n in [1, 2, 5, 10, 37] {
            let plan = Plan::build(&cfg, &line_cloud(n)).unwrap();
            let mut want = vec![n];
            for _ in 1..4 {
                want.push(want.last().unwrap().div_ceil(4));
            }
            assert_eq!(plan.stage_sizes(), want);
        }
        assert_eq!(10usize.div_ceil(4), 3);
    }

    #[test]
    fn canonical_order_is_permutation_independent() {
        let c = line_cloud(9);
        let rev: Vec<usize> = (0..9).rev().collect();
        let p = c.permuted(&rev);
        let a = Plan::build(&ModelConfig::toy(), &c).unwrap();
        let b = Plan::build(&ModelConfig::toy(), &p).unwrap();
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.input, b.input);
        assert_eq!(a.stages[0].geoms[1].pairs, b.stages[0].geoms[1].pairs);
    }
}
