use rayon::prelude::*;

use crate::diffcore::{Backward, BackwardCtx, GradSink, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{NeighborTable, Point3};

const PAR_TARGETS: usize = 128;

/// Fixed linear mixing of source rows: `out[t, b·C + c] = Σ_n w[t, n, b] · x[idx[t, n], c]`.
///
/// With one block this covers interpolation and mean pooling; kernel-point
/// aggregation uses one block per kernel point.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborWeights {
    pub k: usize,
    pub blocks: usize,
    /// `T × k` source rows.
    pub indices: Vec<usize>,
    /// `T × k × blocks`.
    pub weights: Vec<f64>,
    pub num_sources: usize,
}

impl NeighborWeights {
    pub fn num_targets(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.indices.len() * self.blocks {
            return Err(Error::invalid("neighbour weights do not match the index table"));
        }
        if let Some(&i) = self.indices.iter().find(|&&i| i >= self.num_sources) {
            return Err(Error::IndexOutOfRange {
                context: "neighbour source",
                index: i,
                len: self.num_sources,
            });
        }
        Ok(())
    }

    /// Uniform `1/k` weights over each row of `table`.
    pub fn mean(table: &NeighborTable, num_sources: usize) -> Self {
        let w = 1.0 / table.k as f64;
        NeighborWeights {
            k: table.k,
            blocks: 1,
            indices: table.indices.clone(),
            weights: vec![w; table.indices.len()],
            num_sources,
        }
    }
}

struct AggregateOp<T> {
    x: Var,
    w: std::sync::Arc<NeighborWeights>,
    weights: Vec<T>,
}

impl<T: Real> Backward<T> for AggregateOp<T> {
    fn name(&self) -> &'static str {
        "neighbor_aggregate"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let c = ctx.value(self.x).cols();
        let nw = &self.w;
        let width = nw.blocks * c;
        let dx = sink.buffer(self.x);
        for t in 0..nw.num_targets() {
            let dyt = &dy[t * width..(t + 1) * width];
            for n in 0..nw.k {
                let s = nw.indices[t * nw.k + n];
                let row = &mut dx[s * c..(s + 1) * c];
                for b in 0..nw.blocks {
                    let w = self.weights[(t * nw.k + n) * nw.blocks + b];
                    if w == T::zero() {
                        continue;
                    }
                    for (d, &g) in row.iter_mut().zip(&dyt[b * c..(b + 1) * c]) {
                        *d = *d + w * g;
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn neighbor_aggregate<T: Real>(g: &mut Graph<T>, x: Var, w: &std::sync::Arc<NeighborWeights>) -> Result<Var> {
    w.validate()?;
    let xv = g.value(x);
    if xv.rows() != w.num_sources {
        return Err(Error::Shape {
            op: "neighbor_aggregate",
            lhs: xv.shape().to_vec(),
            rhs: vec![w.num_sources],
        });
    }
    let c = xv.cols();
    let width = w.blocks * c;
    let weights: Vec<T> = w.weights.iter().map(|&v| T::lit(v)).collect();
    let mut out = vec![T::zero(); w.num_targets() * width];
    let data = xv.data();
    let row = |(t, o): (usize, &mut [T])| {
        for n in 0..w.k {
            let s = w.indices[t * w.k + n];
            let src = &data[s * c..(s + 1) * c];
            for b in 0..w.blocks {
                let wt = weights[(t * w.k + n) * w.blocks + b];
                if wt == T::zero() {
                    continue;
                }
                for (d, &v) in o[b * c..(b + 1) * c].iter_mut().zip(src) {
                    *d = *d + wt * v;
                }
            }
        }
    };
    if width > 0 {
        if w.num_targets() >= PAR_TARGETS {
            out.par_chunks_mut(width).enumerate().for_each(row);
        } else {
            out.chunks_mut(width).enumerate().for_each(row);
        }
    }
    let t = Tensor::new(&[w.num_targets(), width], out)?;
    Ok(g.record(t, AggregateOp { x, w: w.clone(), weights }))
}

struct GroupMaxOp {
    x: Var,
    /// Source row of each output element.
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for GroupMaxOp {
    fn name(&self) -> &'static str {
        "group_max"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let c = ctx.value(self.x).cols();
        let dx = sink.buffer(self.x);
        for (e, (&src, &g)) in self.argmax.iter().zip(dy).enumerate() {
            let idx = src * c + e % c;
            dx[idx] = dx[idx] + g;
        }
        Ok(())
    }
}

/// Channel-wise max over each row of `groups`; ties go to the earliest neighbour.
pub fn group_max<T: Real>(g: &mut Graph<T>, x: Var, groups: &NeighborTable) -> Result<Var> {
    let xv = g.value(x);
    let (n, c) = (xv.rows(), xv.cols());
    if let Some(&i) = groups.indices.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange {
            context: "group_max source",
            index: i,
            len: n,
        });
    }
    if groups.k == 0 {
        return Err(Error::invalid("group_max needs non-empty groups"));
    }
    let q = groups.num_queries();
    let data = xv.data();
    let mut out = vec![T::zero(); q * c];
    let mut argmax = vec![0usize; q * c];
    let row = |(t, (o, a)): (usize, (&mut [T], &mut [usize]))| {
        let nbrs = groups.row(t);
        for ch in 0..c {
            let mut best = nbrs[0];
            for &s in &nbrs[1..] {
                if data[s * c + ch] > data[best * c + ch] {
                    best = s;
                }
            }
            o[ch] = data[best * c + ch];
            a[ch] = best;
        }
    };
    if c > 0 {
        if q >= PAR_TARGETS {
            out.par_chunks_mut(c).zip(argmax.par_chunks_mut(c)).enumerate().for_each(row);
        } else {
            out.chunks_mut(c).zip(argmax.chunks_mut(c)).enumerate().for_each(row);
        }
    }
    let t = Tensor::new(&[q, c], out)?;
    Ok(g.record(t, GroupMaxOp { x, argmax }))
}

/// Rigid kernel points: the centre plus the 12 icosahedron vertices at `radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPointSet {
    pub offsets: Vec<Point3>,
    pub sigma: f64,
}

impl KernelPointSet {
    pub fn icosahedral(radius: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !(radius >= 0.0) {
            return Err(Error::invalid(format!("kernel radius {radius} / sigma {sigma} out of range")));
        }
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let norm = (1.0 + phi * phi).sqrt();
        let mut offsets = vec![[0.0; 3]];
        for a in [-1.0, 1.0] {
            for b in [-phi, phi] {
                offsets.push([0.0, a, b]);
                offsets.push([a, b, 0.0]);
                offsets.push([b, 0.0, a]);
            }
        }
        for p in offsets.iter_mut().skip(1) {
            *p = p.map(|v| v / norm * radius);
        }
        Ok(KernelPointSet { offsets, sigma })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Linear correlation `max(0, 1 - ‖d - x_k‖ / σ)`.
    pub fn correlation(&self, d: Point3, kernel: usize) -> f64 {
        let x = self.offsets[kernel];
        let dist = ((d[0] - x[0]).powi(2) + (d[1] - x[1]).powi(2) + (d[2] - x[2]).powi(2)).sqrt();
        (1.0 - dist / self.sigma).max(0.0)
    }

    /// Aggregation weights for `kpconv_lite`: block `k` of target `i` collects
    /// `h(p_j - p_i, x_k) f_j` over the neighbours `j` of `i`.
    pub fn weights(&self, positions: &[Point3], neighbors: &NeighborTable) -> NeighborWeights {
        let kk = self.len();
        let mut weights = Vec::with_capacity(neighbors.indices.len() * kk);
        for i in 0..neighbors.num_queries() {
            for &j in neighbors.row(i) {
                let d = [0, 1, 2].map(|a| positions[j][a] - positions[i][a]);
                weights.extend((0..kk).map(|k| self.correlation(d, k)));
            }
        }
        NeighborWeights {
            k: neighbors.k,
            blocks: kk,
            indices: neighbors.indices.clone(),
            weights,
            num_sources: positions.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck;
    use crate::geometry::knn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn table(k: usize, indices: Vec<usize>) -> NeighborTable {
        let distances = vec![0.0; indices.len()];
        NeighborTable { k, indices, distances }
    }

    #[test]
    fn icosahedron_is_regular() {
        let kp = KernelPointSet::icosahedral(0.5, 0.1).unwrap();
        assert_eq!(kp.len(), 13);
        for p in &kp.offsets[1..] {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 0.5).abs() < 1e-12);
        }
        assert_eq!(kp.correlation(kp.offsets[4], 4), 1.0);
        // at distance sigma from the kernel point, correlation vanishes
        let d = [kp.offsets[4][0] + 0.1, kp.offsets[4][1], kp.offsets[4][2]];
        assert_eq!(kp.correlation(d, 4), 0.0);
    }

    #[test]
    fn group_max_picks_channel_maxima() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0], vec![0.0, 9.0]]).unwrap());
        let out = group_max(&mut g, x, &table(2, vec![0, 1, 1, 2])).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 5.0, 3.0, 9.0]);
        g.backward_seeded(out, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 2.0, 4.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn aggregate_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let positions: Vec<Point3> = (0..9).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..0.2))).collect();
        let nbrs = knn(&positions, &positions, 4).unwrap();
        let kp = KernelPointSet::icosahedral(0.08, 0.1).unwrap();
        let w = Arc::new(kp.weights(&positions, &nbrs));
        let x = Tensor::new(&[9, 3], (0..27).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let report = gradcheck(|g, v| neighbor_aggregate(g, v[0], &w), std::slice::from_ref(&x), 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
        let gm = |g: &mut Graph<f64>, v: &[Var]| group_max(g, v[0], &nbrs);
        assert!(gradcheck(gm, &[x], 1e-6).unwrap().passed());
    }
}
