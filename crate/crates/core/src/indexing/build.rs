use std::collections::HashMap;

use super::IndexPairs;
use crate::error::{Error, Result};
use crate::geometry::{fps, window_assign, Point3, WindowId};

/// Members of each window, in ascending point index.
fn group_by_window(ids: &[WindowId]) -> HashMap<WindowId, Vec<u32>> {
    let mut groups: HashMap<WindowId, Vec<u32>> = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        groups.entry(*id).or_default().push(i as u32);
    }
    groups
}

/// Point counts of the occupied windows, ordered by window id.
pub fn window_occupancies(ids: &[WindowId]) -> Vec<usize> {
    let mut counts: Vec<(WindowId, usize)> = group_by_window(ids).into_iter().map(|(w, m)| (w, m.len())).collect();
    counts.sort_unstable();
    counts.into_iter().map(|(_, c)| c).collect()
}

/// All `(i, j)` with `i` and `j` in the same window, self-pairs included.
pub fn build_dense_pairs(window_ids: &[WindowId]) -> IndexPairs {
    let groups = group_by_window(window_ids);
    let lists: Vec<Vec<u32>> = window_ids.iter().map(|w| groups[w].clone()).collect();
    IndexPairs::from_key_lists(&lists)
}

/// Pairs `(i, j)` where `j` is one of the `ceil(N/s)` farthest-point samples and
/// shares `i`'s large window.
pub fn build_sparse_pairs(positions: &[Point3], s: usize, s_win_large: f64, shifted: bool) -> Result<IndexPairs> {
    if s == 0 {
        return Err(Error::invalid("downsample scale s must be >= 1"));
    }
    if !(s_win_large > 0.0) {
        return Err(Error::invalid(format!("large window size must be positive, got {s_win_large}")));
    }
    let n = positions.len();
    if n == 0 {
        return Ok(IndexPairs::empty(0));
    }
    let candidates = fps(positions, n.div_ceil(s))?;
    Ok(sparse_from_candidates(positions, &candidates, s_win_large, shifted))
}

fn sparse_from_candidates(positions: &[Point3], candidates: &[usize], s_win_large: f64, shifted: bool) -> IndexPairs {
    let ids = window_assign(positions, s_win_large, shifted);
    let mut groups: HashMap<WindowId, Vec<u32>> = HashMap::new();
    for &c in candidates {
        groups.entry(ids[c]).or_default().push(c as u32);
    }
    for g in groups.values_mut() {
        g.sort_unstable();
    }
    let lists: Vec<Vec<u32>> = ids.iter().map(|w| groups.get(w).cloned().unwrap_or_default()).collect();
    IndexPairs::from_key_lists(&lists)
}

/// Set union of two pair lists over the same points.
pub fn merge_dedup(dense: &IndexPairs, sparse: &IndexPairs) -> Result<IndexPairs> {
    if dense.num_points() != sparse.num_points() {
        return Err(Error::invalid(format!(
            "cannot merge pairs over {} and {} points",
            dense.num_points(),
            sparse.num_points()
        )));
    }
    let n = dense.num_points();
    let mut index_q = Vec::with_capacity(dense.len() + sparse.len());
    let mut index_k = Vec::with_capacity(dense.len() + sparse.len());
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for q in 0..n {
        let (a, b) = (dense.keys(q), sparse.keys(q));
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            let k = match (a.get(i), b.get(j)) {
                (Some(&x), Some(&y)) if x == y => {
                    i += 1;
                    j += 1;
                    x
                }
                (Some(&x), Some(&y)) if x < y => {
                    i += 1;
                    x
                }
                (Some(_), Some(&y)) => {
                    j += 1;
                    y
                }
                (Some(&x), None) => {
                    i += 1;
                    x
                }
                (None, Some(&y)) => {
                    j += 1;
                    y
                }
                (None, None) => unreachable!(),
            };
            index_q.push(q as u32);
            index_k.push(k);
        }
        offsets.push(index_k.len());
    }
    Ok(IndexPairs { index_q, index_k, offsets })
}

/// Window configuration for one attention layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StratifiedParams {
    pub s_win: f64,
    pub shift_small: bool,
    /// `None` disables the sparse keys (plain window attention).
    pub sparse: Option<SparseParams>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseParams {
    pub scale: usize,
    pub s_win_large: f64,
    pub shift_large: bool,
}

/// Dense window pairs merged with sparse far keys.
///
/// `candidates` may carry precomputed farthest-point samples to share them
/// between the shifted and unshifted layers of a stage.
pub fn build_stratified_pairs(positions: &[Point3], params: &StratifiedParams, candidates: Option<&[usize]>) -> Result<IndexPairs> {
    if !(params.s_win > 0.0) {
        return Err(Error::invalid(format!("window size must be positive, got {}", params.s_win)));
    }
    let dense = build_dense_pairs(&window_assign(positions, params.s_win, params.shift_small));
    let Some(sp) = params.sparse else {
        return Ok(dense);
    };
    let sparse = match candidates {
        Some(c) => sparse_from_candidates(positions, c, sp.s_win_large, sp.shift_large),
        None => build_sparse_pairs(positions, sp.scale, sp.s_win_large, sp.shift_large)?,
    };
    merge_dedup(&dense, &sparse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::window_assign;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, extent: f64, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..extent))).collect()
    }

    #[test]
    fn dense_pair_counts() {
        let same = [WindowId([0, 0, 0]); 2];
        assert_eq!(build_dense_pairs(&same).len(), 4);
        let apart = [WindowId([0, 0, 0]), WindowId([1, 0, 0]), WindowId([0, 0, 5])];
        let p = build_dense_pairs(&apart);
        assert_eq!(p.iter().collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn dense_count_matches_occupancy_histogram() {
        let pts = random_cloud(40, 0.5, 3);
        let ids = window_assign(&pts, 0.16, false);
        // histogram oracle
        let mut hist: Vec<(WindowId, usize)> = Vec::new();
        for id in &ids {
            match hist.iter_mut().find(|(w, _)| w == id) {
                Some((_, c)) => *c += 1,
                None => hist.push((*id, 1)),
            }
        }
        let expected: usize = hist.iter().map(|(_, c)| c * c).sum();
        assert!(hist.iter().any(|(_, c)| *c > 1) && hist.len() > 1);
        let p = build_dense_pairs(&ids);
        p.validate().unwrap();
        assert_eq!(p.len(), expected);
    }

    #[test]
    fn sparse_degenerate_scale_has_one_candidate() {
        let pts = random_cloud(30, 0.3, 4);
        let p = build_sparse_pairs(&pts, 100, 0.32, false).unwrap();
        let cand: Vec<u32> = p.index_k.clone();
        assert!(cand.windows(2).all(|w| w[0] == w[1]));
        let c = cand[0] as usize;
        let ids = window_assign(&pts, 0.32, false);
        for i in 0..pts.len() {
            let expect = usize::from(ids[i] == ids[c]);
            assert_eq!(p.keys(i).len(), expect);
        }
    }

    #[test]
    fn sparse_with_unit_scale_equals_dense_large() {
        let pts = random_cloud(50, 0.7, 5);
        for shifted in [false, true] {
            let sparse = build_sparse_pairs(&pts, 1, 0.32, shifted).unwrap();
            let dense = build_dense_pairs(&window_assign(&pts, 0.32, shifted));
            assert_eq!(sparse, dense);
        }
    }

    #[test]
    fn merge_examples() {
        let dense = IndexPairs::from_pairs(6, [(0, 1)]).unwrap();
        let sparse = IndexPairs::from_pairs(6, [(0, 1), (0, 5)]).unwrap();
        let m = merge_dedup(&dense, &sparse).unwrap();
        assert_eq!(m.iter().collect::<Vec<_>>(), vec![(0, 1), (0, 5)]);
        assert_eq!(merge_dedup(&dense, &IndexPairs::empty(6)).unwrap(), dense);
        assert!(merge_dedup(&dense, &IndexPairs::empty(5)).is_err());
    }

    #[test]
    fn merge_matches_set_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 20;
        let a: Vec<(usize, usize)> = (0..60).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
        let b: Vec<(usize, usize)> = (0..60).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
        let m = merge_dedup(
            &IndexPairs::from_pairs(n, a.clone()).unwrap(),
            &IndexPairs::from_pairs(n, b.clone()).unwrap(),
        )
        .unwrap();
        let mut union: Vec<(usize, usize)> = a.into_iter().chain(b).collect();
        union.sort_unstable();
        union.dedup();
        assert_eq!(m.iter().collect::<Vec<_>>(), union);
        m.validate().unwrap();
    }

    #[test]
    fn occupancies_sum_to_n() {
        let pts = random_cloud(33, 0.5, 2);
        let occ = window_occupancies(&window_assign(&pts, 0.16, false));
        assert_eq!(occ.iter().sum::<usize>(), 33);
    }
}
