use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;

use super::{dist2, lex_cmp, Point3};
use crate::error::{Error, Result};

/// `k` nearest references per query, sorted by distance then coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    pub k: usize,
    /// Row-major `Q × k` reference indices.
    pub indices: Vec<usize>,
    /// Row-major `Q × k` Euclidean distances in meters.
    pub distances: Vec<f64>,
}

impl NeighborTable {
    pub fn num_queries(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn distance_row(&self, q: usize) -> &[f64] {
        &self.distances[q * self.k..(q + 1) * self.k]
    }
}

fn rank(refs: &[Point3], a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| lex_cmp(&refs[a.1], &refs[b.1])).then(a.1.cmp(&b.1))
}

fn take_k(refs: &[Point3], mut cand: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, |a, b| rank(refs, a, b));
        cand.truncate(k);
    }
    cand.sort_by(|a, b| rank(refs, a, b));
    cand
}

fn into_table(rows: Vec<Vec<(f64, usize)>>, k: usize) -> NeighborTable {
    let mut indices = Vec::with_capacity(rows.len() * k);
    let mut distances = Vec::with_capacity(rows.len() * k);
    for row in rows {
        for (d2, i) in row {
            indices.push(i);
            distances.push(d2.sqrt());
        }
    }
    NeighborTable { k, indices, distances }
}

fn check(k: usize, r: usize) -> Result<()> {
    if k > r {
        return Err(Error::invalid(format!("knn needs k <= number of references, got k={k}, R={r}")));
    }
    Ok(())
}

/// Exhaustive `O(QR)` search. Used as the fallback and as the test oracle.
pub fn knn_brute_force(queries: &[Point3], refs: &[Point3], k: usize) -> Result<NeighborTable> {
    check(k, refs.len())?;
    if k == 0 {
        return Ok(NeighborTable::empty_rows(queries.len()));
    }
    let rows = queries
        .iter()
        .map(|q| {
            let cand = refs.iter().enumerate().map(|(i, r)| (dist2(q, r), i)).collect();
            take_k(refs, cand, k)
        })
        .collect();
    Ok(into_table(rows, k))
}

impl NeighborTable {
    fn empty_rows(_q: usize) -> Self {
        NeighborTable {
            k: 0,
            indices: Vec::new(),
            distances: Vec::new(),
        }
    }
}

struct Buckets {
    origin: Point3,
    cell: f64,
    map: HashMap<[i64; 3], Vec<usize>>,
    extent: [i64; 3],
}

impl Buckets {
    fn build(refs: &[Point3]) -> Option<Self> {
        let mut lo = refs[0];
        let mut hi = refs[0];
        for p in refs {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let span = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        if !(span > 0.0) {
            return None;
        }
        // Roughly four references per cell along a cube of the largest extent.
        let cell = span / (refs.len() as f64 / 4.0).cbrt().max(1.0);
        let mut map: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let key = |p: &Point3| [0, 1, 2].map(|a| ((p[a] - lo[a]) / cell).floor() as i64);
        for (i, p) in refs.iter().enumerate() {
            map.entry(key(p)).or_default().push(i);
        }
        let extent = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / cell).floor() as i64 + 1);
        Some(Buckets {
            origin: lo,
            cell,
            map,
            extent,
        })
    }

    fn key(&self, p: &Point3) -> [i64; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    /// Exact search by expanding Chebyshev shells of cells; `None` if the
    /// query is too far outside the grid for shells to be worthwhile.
    fn search(&self, refs: &[Point3], q: &Point3, k: usize) -> Option<Vec<(f64, usize)>> {
        const MAX_RING: i64 = 24;
        let c = self.key(q);
        // Rings needed to cover every cell from the query's cell.
        let cover = (0..3).map(|a| c[a].abs().max((self.extent[a] - 1 - c[a]).abs())).max().unwrap_or(0);
        let mut cand: Vec<(f64, usize)> = Vec::new();
        let mut r = 0i64;
        loop {
            if r > MAX_RING {
                return None;
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(members) = self.map.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            cand.extend(members.iter().map(|&i| (dist2(q, &refs[i]), i)));
                        }
                    }
                }
            }
            if r >= cover {
                break;
            }
            if cand.len() >= k {
                let bound = r as f64 * self.cell;
                let mut d: Vec<f64> = cand.iter().map(|c| c.0).collect();
                let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
                if *kth < bound * bound {
                    break;
                }
            }
            r += 1;
        }
        Some(take_k(refs, cand, k))
    }
}

/// Exact k nearest neighbours of each query among `refs`.
///
/// Uses uniform grid buckets with shell expansion; falls back to brute force
/// for small or degenerate reference sets.
pub fn knn(queries: &[Point3], refs: &[Point3], k: usize) -> Result<NeighborTable> {
    check(k, refs.len())?;
    if k == 0 {
        return Ok(NeighborTable::empty_rows(queries.len()));
    }
    let buckets = if refs.len() >= 64 { Buckets::build(refs) } else { None };
    let Some(buckets) = buckets else {
        return knn_brute_force(queries, refs, k);
    };
    let rows: Vec<Vec<(f64, usize)>> = queries
        .par_iter()
        .map(|q| {
            buckets.search(refs, q, k).unwrap_or_else(|| {
                let cand = refs.iter().enumerate().map(|(i, r)| (dist2(q, r), i)).collect();
                take_k(refs, cand, k)
            })
        })
        .collect();
    Ok(into_table(rows, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coincident_reference_comes_first() {
        let refs = [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let t = knn(&[[0.0, 0.0, 0.0]], &refs, 2).unwrap();
        assert_eq!(t.row(0)[0], 1);
        assert_eq!(t.distance_row(0)[0], 0.0);
    }

    #[test]
    fn equidistant_tie_prefers_smaller_coordinates() {
        let refs = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let t = knn(&[[0.0, 0.0, 0.0]], &refs, 2).unwrap();
        assert_eq!(t.row(0), &[1, 0]);
    }

    #[test]
    fn k_larger_than_references_is_an_error() {
        assert!(knn(&[[0.0; 3]], &[[1.0; 3]], 2).is_err());
    }

    #[test]
    fn bucketed_search_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let n = 64 + trial * 37;
            let refs: Vec<Point3> = (0..n)
                .map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.1)])
                .collect();
            let queries: Vec<Point3> = (0..50)
                .map(|_| [rng.random_range(-0.5..2.5), rng.random_range(-0.5..1.5), rng.random_range(-0.2..0.3)])
                .collect();
            let fast = knn(&queries, &refs, 7).unwrap();
            let slow = knn_brute_force(&queries, &refs, 7).unwrap();
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn far_queries_fall_back() {
        let refs: Vec<Point3> = (0..100).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
        let q = [[1000.0, 0.0, 0.0]];
        assert_eq!(knn(&q, &refs, 3).unwrap(), knn_brute_force(&q, &refs, 3).unwrap());
    }
}
