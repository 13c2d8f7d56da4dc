use std::sync::Arc;

use super::kernel::{attention_core_backward, attention_core_forward};
use super::{CrpeView, RelativePositions};
use crate::diffcore::{gelu, linear, Backward, BackwardCtx, GradSink, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::indexing::IndexPairs;

/// Pairs of one attention layer plus, when positions are encoded, their
/// relative coordinates and bins.
#[derive(Clone, Debug)]
pub struct AttentionGeometry {
    pub pairs: Arc<IndexPairs>,
    pub rel: Option<Arc<RelativePositions>>,
}

/// Forward state kept for the backward pass, one row per pair.
#[derive(Clone, Debug)]
pub struct AttentionWorkspace<T> {
    pub pairs: Arc<IndexPairs>,
    pub rel: Option<Arc<RelativePositions>>,
    pub heads: usize,
    pub scale: T,
    /// `M × H` logits.
    pub attn: Vec<T>,
    /// `M × H` softmax probabilities.
    pub probs: Vec<T>,
    /// `M × H` positional part of the logits; empty without position encoding.
    pub pos_bias: Vec<T>,
}

struct AttentionOp<T> {
    q: Var,
    k: Var,
    v: Var,
    tables: Option<[Var; 9]>,
    bias: Option<Var>,
    ws: Arc<AttentionWorkspace<T>>,
}

fn crpe_view<'a, T: Real>(tables: &[&'a Tensor<T>; 9]) -> Result<CrpeView<'a, T>> {
    let shape = tables[0].shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "crpe table",
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        });
    }
    CrpeView::new(std::array::from_fn(|i| tables[i].data()), shape[0], shape[1])
}

impl<T: Real> Backward<T> for AttentionOp<T> {
    fn name(&self) -> &'static str {
        "stratified_attention"
    }
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.q, self.k, self.v];
        if let Some(t) = self.tables {
            v.extend(t);
        }
        v.extend(self.bias);
        v
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>, dy: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let ws = &self.ws;
        let tables = self.tables.map(|t| t.map(|v| ctx.value(v)));
        let view = tables.as_ref().map(crpe_view).transpose()?;
        let crpe = match (view, &ws.rel) {
            (Some(view), Some(rel)) => Some((view, rel.bins.as_slice())),
            _ => None,
        };
        let g = attention_core_backward(
            dy,
            ctx.value(self.q).data(),
            ctx.value(self.k).data(),
            ctx.value(self.v).data(),
            &ws.pairs,
            ws.heads,
            crpe,
            &ws.probs,
            ws.scale,
        )?;
        sink.accumulate(self.q, &g.dq);
        sink.accumulate(self.k, &g.dk);
        sink.accumulate(self.v, &g.dv);
        if let (Some(vars), Some(dt)) = (self.tables, &g.dtables) {
            for (var, d) in vars.iter().zip(dt) {
                sink.accumulate(*var, d);
            }
        }
        if let Some(b) = self.bias {
            sink.accumulate(b, &g.dlogits);
        }
        Ok(())
    }
}

/// Attention over projected `q, k, v` (`N × C`). `tables` are the nine cRPE
/// tables (`L × C`, role-major); `bias` is an extra `M × H` logit term.
#[allow(clippy::too_many_arguments)]
pub fn stratified_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    tables: Option<[Var; 9]>,
    bias: Option<Var>,
    geom: &AttentionGeometry,
    heads: usize,
    scale_logits: bool,
) -> Result<(Var, Arc<AttentionWorkspace<T>>)> {
    let n = geom.pairs.num_points();
    let qv = g.value(q);
    if qv.shape().len() != 2 || qv.shape()[0] != n {
        return Err(Error::Shape {
            op: "stratified_attention",
            lhs: qv.shape().to_vec(),
            rhs: vec![n],
        });
    }
    let c = qv.shape()[1];
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::invalid(format!("{c} channels do not split into {heads} heads")));
    }
    let scale = if scale_logits {
        T::lit(1.0 / ((c / heads) as f64).sqrt())
    } else {
        T::one()
    };
    let table_vals = tables.map(|t| t.map(|v| g.value(v)));
    let view = table_vals.as_ref().map(crpe_view).transpose()?;
    let crpe = match (view, &geom.rel) {
        (Some(view), Some(rel)) => {
            if rel.num_bins != view.num_bins {
                return Err(Error::invalid(format!(
                    "tables have {} bins but positions were quantized into {}",
                    view.num_bins, rel.num_bins
                )));
            }
            Some((view, rel.bins.as_slice()))
        }
        (Some(_), None) => return Err(Error::invalid("cRPE tables given without relative positions")),
        _ => None,
    };
    let bias_vals = bias.map(|b| g.value(b).data());
    let out = attention_core_forward(
        qv.data(),
        g.value(k).data(),
        g.value(v).data(),
        &geom.pairs,
        heads,
        crpe,
        bias_vals,
        scale,
    )?;
    let pos_bias = if crpe.is_some() || bias.is_some() {
        let (qd, kd) = (qv.data(), g.value(k).data());
        let d = c / heads;
        let mut pb = out.logits.clone();
        for (m, (i, j)) in geom.pairs.iter().enumerate() {
            for h in 0..heads {
                let r = h * d..(h + 1) * d;
                let qk = r.map(|t| qd[i * c + t] * kd[j * c + t]).fold(T::zero(), |a, b| a + b);
                pb[m * heads + h] = pb[m * heads + h] - scale * qk;
            }
        }
        pb
    } else {
        Vec::new()
    };
    let ws = Arc::new(AttentionWorkspace {
        pairs: geom.pairs.clone(),
        rel: geom.rel.clone(),
        heads,
        scale,
        attn: out.logits,
        probs: out.probs,
        pos_bias,
    });
    let y = Tensor::new(&[n, c], out.y)?;
    let var = g.record(
        y,
        AttentionOp {
            q,
            k,
            v,
            tables,
            bias,
            ws: ws.clone(),
        },
    );
    Ok((var, ws))
}

/// Two-layer position bias `Linear(GELU(Linear(r)))`, `M × 3 → M × H`.
pub fn mlp_position_bias<T: Real>(g: &mut Graph<T>, r: Var, mlp: [Var; 4]) -> Result<Var> {
    let h = linear(g, r, mlp[0], Some(mlp[1]))?;
    let h = gelu(g, h)?;
    linear(g, h, mlp[2], Some(mlp[3]))
}

/// Graph variables of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `[w_q, b_q, w_k, b_k, w_v, b_v, w_out, b_out]`.
    pub proj: [Var; 8],
    pub crpe: Option<[Var; 9]>,
    /// `[w1, b1, w2, b2]` of the MLP position bias.
    pub mlp: Option<[Var; 4]>,
}

/// Full attention sublayer: projections, position terms, attention, output
/// projection. Returns the output and the attention workspace.
pub fn attention_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    vars: &AttentionVars,
    geom: &AttentionGeometry,
    heads: usize,
    scale_logits: bool,
) -> Result<(Var, Arc<AttentionWorkspace<T>>)> {
    let p = vars.proj;
    let q = linear(g, x, p[0], Some(p[1]))?;
    let k = linear(g, x, p[2], Some(p[3]))?;
    let v = linear(g, x, p[4], Some(p[5]))?;
    let bias = match vars.mlp {
        Some(mlp) => {
            let rel = geom
                .rel
                .as_ref()
                .ok_or_else(|| Error::invalid("MLP position bias needs relative positions"))?;
            let flat: Vec<T> = rel.r.iter().flatten().map(|&v| T::lit(v)).collect();
            let r = g.constant(Tensor::new(&[rel.len(), 3], flat)?);
            Some(mlp_position_bias(g, r, mlp)?)
        }
        None => None,
    };
    let (y, ws) = stratified_attention(g, q, k, v, vars.crpe, bias, geom, heads, scale_logits)?;
    let out = linear(g, y, p[6], Some(p[7]))?;
    Ok((out, ws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{crpe_encode, ROLE_Q};
    use crate::diffcore::{gradcheck_with, GradcheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn random_geom(rng: &mut ChaCha8Rng, n: usize, bins: usize) -> AttentionGeometry {
        let positions: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..0.3))).collect();
        let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        for _ in 0..n * 2 {
            pairs.push((rng.random_range(0..n), rng.random_range(0..n)));
        }
        let pairs = IndexPairs::from_pairs(n, pairs).unwrap();
        let rel = RelativePositions::new(&positions, &pairs, 0.16, bins).unwrap();
        AttentionGeometry {
            pairs: Arc::new(pairs),
            rel: Some(Arc::new(rel)),
        }
    }

    #[test]
    fn mlp_bias_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, hidden, heads) = (7, 5, 2);
        let r = rand_tensor(&mut rng, &[m, 3], 0.3);
        let w1 = rand_tensor(&mut rng, &[3, hidden], 1.0);
        let b1 = rand_tensor(&mut rng, &[hidden], 1.0);
        let w2 = rand_tensor(&mut rng, &[hidden, heads], 1.0);
        let b2 = rand_tensor(&mut rng, &[heads], 1.0);
        let mut g = Graph::new();
        let vars = [w1.clone(), b1.clone(), w2.clone(), b2.clone()].map(|t| g.constant(t));
        let rv = g.constant(r.clone());
        let out = mlp_position_bias(&mut g, rv, vars).unwrap();
        let phi = |x: f64| 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        for row in 0..m {
            for o in 0..heads {
                let mut acc = b2.data()[o];
                for u in 0..hidden {
                    let mut pre = b1.data()[u];
                    for a in 0..3 {
                        pre += r.data()[row * 3 + a] * w1.data()[a * hidden + u];
                    }
                    acc += pre * phi(pre) * w2.data()[u * heads + o];
                }
                assert!((g.value(out).data()[row * heads + o] - acc).abs() < 1e-12);
            }
        }
        // identical r rows give identical bias
        let zero = g.constant(Tensor::zeros(&[2, 3]));
        let z = mlp_position_bias(&mut g, zero, vars).unwrap();
        let zv = g.value(z).data();
        assert_eq!(zv[..heads], zv[heads..]);
    }

    #[test]
    fn pos_bias_is_crpe_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, c, heads, bins) = (6, 4, 2, 8);
        let geom = random_geom(&mut rng, n, bins);
        let mut g = Graph::new();
        let [q, k, v] = [0; 3].map(|_| g.constant(rand_tensor(&mut rng, &[n, c], 1.0)));
        let tables: [Var; 9] = std::array::from_fn(|_| g.constant(rand_tensor(&mut rng, &[bins, c], 0.5)));
        let (_, ws) = stratified_attention(&mut g, q, k, v, Some(tables), None, &geom, heads, true).unwrap();
        let scale = 1.0 / ((c / heads) as f64).sqrt();
        let tv: [&[f64]; 9] = std::array::from_fn(|i| g.value(tables[i]).data());
        let view = CrpeView::new(tv, bins, c).unwrap();
        let rel = geom.rel.as_ref().unwrap();
        let eq = crpe_encode(&rel.bins, &view, ROLE_Q);
        let ek = crpe_encode(&rel.bins, &view, crate::attention::ROLE_K);
        let (qd, kd) = (g.value(q).data(), g.value(k).data());
        for (m, (i, j)) in geom.pairs.iter().enumerate() {
            for h in 0..heads {
                let want: f64 = (h * 2..h * 2 + 2)
                    .map(|t| scale * qd[i * c + t] * eq[m * c + t] + kd[j * c + t] * ek[m * c + t])
                    .sum();
                assert!((ws.pos_bias[m * heads + h] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradcheck_block_with_crpe_and_mlp() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let (n, c, heads, bins, hidden) = (7, 4, 2, 8, 3);
            let geom = random_geom(&mut rng, n, bins);
            let mut inputs = vec![rand_tensor(&mut rng, &[n, c], 1.0)];
            for _ in 0..4 {
                inputs.push(rand_tensor(&mut rng, &[c, c], 0.8));
                inputs.push(rand_tensor(&mut rng, &[c], 0.3));
            }
            for _ in 0..9 {
                inputs.push(rand_tensor(&mut rng, &[bins, c], 0.5));
            }
            inputs.push(rand_tensor(&mut rng, &[3, hidden], 1.0));
            inputs.push(rand_tensor(&mut rng, &[hidden], 0.5));
            inputs.push(rand_tensor(&mut rng, &[hidden, heads], 1.0));
            inputs.push(rand_tensor(&mut rng, &[heads], 0.5));
            let geom2 = geom.clone();
            let op = move |g: &mut Graph<f64>, v: &[Var]| {
                let vars = AttentionVars {
                    proj: std::array::from_fn(|i| v[1 + i]),
                    crpe: Some(std::array::from_fn(|i| v[9 + i])),
                    mlp: Some(std::array::from_fn(|i| v[18 + i])),
                };
                Ok(attention_block(g, v[0], &vars, &geom2, heads, true)?.0)
            };
            let report = gradcheck_with(op, &inputs, &GradcheckOptions { seed, ..Default::default() }).unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }
}
