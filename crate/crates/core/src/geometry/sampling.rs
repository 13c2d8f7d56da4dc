use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::{dist2, lex_cmp, Point3, PointCloud};
use crate::error::{Error, Result};

/// Indices of `positions` in lexicographic coordinate order.
pub(crate) fn lex_order(positions: &[Point3]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&positions[a], &positions[b]).then(a.cmp(&b)));
    order
}

/// Voxel-grid downsampling: one point per occupied cell.
///
/// Each output point carries the mean position and features of its cell and
/// the cell's majority label (ties go to the smaller label). Cells are emitted
/// in lexicographic cell order. Members of a cell are summed in coordinate
/// order, so the result does not depend on input order.
pub fn grid_sample(cloud: &PointCloud, cell_size: f64) -> Result<PointCloud> {
    if !(cell_size > 0.0) {
        return Err(Error::invalid(format!("grid cell size must be positive, got {cell_size}")));
    }
    let c = cloud.channels;
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let key = [0, 1, 2].map(|a| (p[a] / cell_size).floor() as i64);
        cells.entry(key).or_default().push(i);
    }

    let mut out = PointCloud::empty(c);
    let mut labels = cloud.labels.as_ref().map(|_| Vec::with_capacity(cells.len()));
    for members in cells.values_mut() {
        members.sort_by(|&a, &b| {
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
        let k = members.len() as f64;
        let mut pos = [0.0; 3];
        let mut feat = vec![0.0; c];
        for &i in members.iter() {
            for a in 0..3 {
                pos[a] += cloud.positions[i][a];
            }
            for (f, v) in feat.iter_mut().zip(cloud.feature_row(i)) {
                *f += v;
            }
        }
        out.positions.push(pos.map(|v| v / k));
        out.features.extend(feat.iter().map(|v| v / k));
        if let (Some(out_labels), Some(src)) = (&mut labels, &cloud.labels) {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for &i in members.iter() {
                *counts.entry(src[i]).or_default() += 1;
            }
            // BTreeMap iterates ascending, and max_by_key keeps the last maximum,
            // so iterate in reverse to keep the smallest label on ties.
            let (&label, _) = counts.iter().rev().max_by_key(|(_, &n)| n).expect("cell is nonempty");
            out_labels.push(label);
        }
    }
    out.labels = labels;
    Ok(out)
}

/// Farthest point sampling of `m` indices, returned in pick order.
///
/// The first pick is the point nearest the centroid; every later pick
/// maximises the distance to the already chosen set. Ties go to the
/// lexicographically smallest position.
pub fn fps(positions: &[Point3], m: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("fps needs 1 <= m <= N, got m={m}, N={n}")));
    }
    let order = lex_order(positions);
    let sorted: Vec<Point3> = order.iter().map(|&i| positions[i]).collect();

    let mut centroid = [0.0; 3];
    for p in &sorted {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    let centroid = centroid.map(|v| v / n as f64);

    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in sorted.iter().enumerate() {
        let d = dist2(p, &centroid);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }

    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut picks = Vec::with_capacity(m);
    let mut current = best;
    loop {
        chosen[current] = true;
        picks.push(order[current]);
        if picks.len() == m {
            break;
        }
        let cp = sorted[current];
        let mut next = usize::MAX;
        let mut next_d = f64::NEG_INFINITY;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let d = dist2(&sorted[i], &cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > next_d {
                next_d = min_d[i];
                next = i;
            }
        }
        current = next;
    }
    Ok(picks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xs(values: &[f64]) -> Vec<Point3> {
        values.iter().map(|&x| [x, 0.0, 0.0]).collect()
    }

    #[test]
    fn grid_sample_mean_rule() {
        let cloud = PointCloud::new(xs(&[0.01, 0.02, 0.05]), vec![0.0, 1.0, 1.0], 1, Some(vec![3, 3, 1])).unwrap();
        let out = grid_sample(&cloud, 0.04).unwrap();
        assert_eq!(out.len(), 2);
        assert!((out.positions[0][0] - 0.015).abs() < 1e-15);
        assert_eq!(out.positions[1][0], 0.05);
        assert_eq!(out.features, vec![0.5, 1.0]);
        assert_eq!(out.labels.unwrap(), vec![3, 1]);
    }

    #[test]
    fn grid_sample_single_cell_and_label_tie() {
        let cloud = PointCloud::new(
            vec![[0.0, 0.0, 0.0], [0.02, 0.02, 0.0], [0.01, 0.0, 0.03], [0.03, 0.01, 0.01]],
            vec![0.0; 4],
            1,
            Some(vec![5, 2, 5, 2]),
        )
        .unwrap();
        let out = grid_sample(&cloud, 0.04).unwrap();
        assert_eq!(out.len(), 1);
        let c = out.positions[0];
        assert!((c[0] - 0.015).abs() < 1e-15 && (c[1] - 0.0075).abs() < 1e-15 && (c[2] - 0.01).abs() < 1e-15);
        assert_eq!(out.labels.unwrap(), vec![2]);
    }

    #[test]
    fn grid_sample_edge_cases() {
        assert!(grid_sample(&PointCloud::empty(3), 0.04).unwrap().is_empty());
        assert!(grid_sample(&PointCloud::empty(3), 0.0).is_err());
    }

    #[test]
    fn fps_tie_breaks_on_coordinates() {
        let p = xs(&[1.0, 0.5, 0.0]);
        assert_eq!(fps(&p, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn fps_exhausts_and_rejects_oversampling() {
        let p = xs(&[0.3, 0.1, 0.9, 0.4]);
        let mut all = fps(&p, 4).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(fps(&p, 5).is_err());
        assert!(fps(&p, 0).is_err());
    }

    #[test]
    fn fps_handles_duplicates() {
        let p = vec![[0.0; 3]; 4];
        let mut picks = fps(&p, 4).unwrap();
        picks.sort_unstable();
        assert_eq!(picks, vec![0, 1, 2, 3]);
    }
}
