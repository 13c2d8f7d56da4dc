use rayon::prelude::*;

use super::{CrpeView, ROLE_K, ROLE_Q, ROLE_V};
use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::indexing::IndexPairs;

/// Queries per parallel task; per-query work is independent, so the split
/// never changes results.
const PAR_QUERIES: usize = 64;

/// Gathered encodings `e_m = t_x[b_x] + t_y[b_y] + t_z[b_z]` for one role, `M × C`.
pub fn crpe_encode<T: Real>(bins: &[[u16; 3]], view: &CrpeView<'_, T>, role: usize) -> Vec<T> {
    let c = view.channels;
    let (tx, ty, tz) = (view.table(role, 0), view.table(role, 1), view.table(role, 2));
    let mut e = vec![T::zero(); bins.len() * c];
    let row = |(b, out): (&[u16; 3], &mut [T])| {
        let (rx, ry, rz) = (
            &tx[b[0] as usize * c..][..c],
            &ty[b[1] as usize * c..][..c],
            &tz[b[2] as usize * c..][..c],
        );
        for (o, ((&x, &y), &z)) in out.iter_mut().zip(rx.iter().zip(ry).zip(rz)) {
            *o = x + y + z;
        }
    };
    if c == 0 {
        return e;
    }
    if bins.len() >= PAR_QUERIES * 16 {
        bins.par_iter().zip(e.par_chunks_mut(c)).for_each(row);
    } else {
        bins.iter().zip(e.chunks_mut(c)).for_each(row);
    }
    e
}

/// Scatters `de` (`M × C`) into the three axis tables of one role, in pair order.
pub fn crpe_encode_backward<T: Real>(bins: &[[u16; 3]], de: &[T], num_bins: usize, channels: usize) -> [Vec<T>; 3] {
    let c = channels;
    let mut out = [
        vec![T::zero(); num_bins * c],
        vec![T::zero(); num_bins * c],
        vec![T::zero(); num_bins * c],
    ];
    for (b, d) in bins.iter().zip(de.chunks(c.max(1))) {
        for (axis, table) in out.iter_mut().enumerate() {
            let row = &mut table[b[axis] as usize * c..][..c];
            for (t, &g) in row.iter_mut().zip(d) {
                *t = *t + g;
            }
        }
    }
    out
}

/// Splits `buf` into per-query chunks of `width` values per pair.
fn split_segments<'a, T>(mut buf: &'a mut [T], offsets: &[usize], width: usize) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(offsets.len().saturating_sub(1));
    for w in offsets.windows(2) {
        let (head, tail) = buf.split_at_mut((w[1] - w[0]) * width);
        out.push(head);
        buf = tail;
    }
    out
}

/// Max-subtracted softmax over the pairs of one segment, independently per head.
fn softmax_segment<T: Real>(logits: &[T], probs: &mut [T], heads: usize) {
    let len = logits.len() / heads.max(1);
    for h in 0..heads {
        let mut max = T::neg_infinity();
        for m in 0..len {
            max = max.max(logits[m * heads + h]);
        }
        let mut sum = T::zero();
        for m in 0..len {
            let e = (logits[m * heads + h] - max).exp();
            probs[m * heads + h] = e;
            sum = sum + e;
        }
        for m in 0..len {
            probs[m * heads + h] = probs[m * heads + h] / sum;
        }
    }
}

/// Softmax of `M × H` logits within each query segment of `pairs`.
pub fn scatter_softmax<T: Real>(logits: &[T], pairs: &IndexPairs, heads: usize) -> Result<Vec<T>> {
    if logits.len() != pairs.len() * heads {
        return Err(Error::Shape {
            op: "scatter_softmax",
            lhs: vec![pairs.len(), heads],
            rhs: vec![logits.len()],
        });
    }
    let mut probs = vec![T::zero(); logits.len()];
    for q in 0..pairs.num_points() {
        let seg = pairs.segment(q);
        let r = seg.start * heads..seg.end * heads;
        softmax_segment(&logits[r.clone()], &mut probs[r], heads);
    }
    Ok(probs)
}

#[derive(Clone, Debug)]
pub struct CoreOutput<T> {
    /// `N × C` attended values before the output projection.
    pub y: Vec<T>,
    /// `M × H` pre-softmax logits.
    pub logits: Vec<T>,
    /// `M × H` probabilities.
    pub probs: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct CoreGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    /// Gradients of the nine tables, same order as [`CrpeView`].
    pub dtables: Option<Vec<Vec<T>>>,
    /// `M × H`; also the gradient of an additive logit bias.
    pub dlogits: Vec<T>,
}

struct Dims {
    n: usize,
    c: usize,
    heads: usize,
    d: usize,
}

fn check_dims<T: Real>(q: &[T], k: &[T], v: &[T], pairs: &IndexPairs, heads: usize) -> Result<Dims> {
    let n = pairs.num_points();
    if heads == 0 {
        return Err(Error::invalid("attention needs at least one head"));
    }
    if n == 0 {
        return Ok(Dims { n, c: 0, heads, d: 0 });
    }
    let c = q.len() / n;
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.len() != n * c {
            return Err(Error::Shape {
                op: if name == "q" {
                    "attention q"
                } else if name == "k" {
                    "attention k"
                } else {
                    "attention v"
                },
                lhs: vec![n, c],
                rhs: vec![t.len()],
            });
        }
    }
    if !c.is_multiple_of(heads) {
        return Err(Error::invalid(format!("{c} channels do not split into {heads} heads")));
    }
    if let Some(&j) = pairs.index_k.iter().find(|&&j| j as usize >= n) {
        return Err(Error::IndexOutOfRange {
            context: "attention key",
            index: j as usize,
            len: n,
        });
    }
    Ok(Dims { n, c, heads, d: c / heads })
}

fn gather_encodings<T: Real>(crpe: Option<(CrpeView<'_, T>, &[[u16; 3]])>, pairs: &IndexPairs, c: usize) -> Result<Option<[Vec<T>; 3]>> {
    let Some((view, bins)) = crpe else { return Ok(None) };
    if bins.len() != pairs.len() {
        return Err(Error::invalid(format!("{} bin rows for {} pairs", bins.len(), pairs.len())));
    }
    if view.channels != c {
        return Err(Error::Shape {
            op: "crpe channels",
            lhs: vec![view.num_bins, view.channels],
            rhs: vec![c],
        });
    }
    if let Some(b) = bins.iter().flatten().find(|&&b| b as usize >= view.num_bins) {
        return Err(Error::IndexOutOfRange {
            context: "crpe bin",
            index: *b as usize,
            len: view.num_bins,
        });
    }
    Ok(Some([
        crpe_encode(bins, &view, ROLE_Q),
        crpe_encode(bins, &view, ROLE_K),
        crpe_encode(bins, &view, ROLE_V),
    ]))
}

/// Forward pass on projected `q, k, v` (each `N × C`, `C = H · D`).
///
/// `logit_m = s q_i·(k_j + e^q_m) + k_j·e^k_m + bias_m` per head, with `s` the
/// query scale; `y_i = Σ_m p_m (v_j + e^v_m)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_core_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    pairs: &IndexPairs,
    heads: usize,
    crpe: Option<(CrpeView<'_, T>, &[[u16; 3]])>,
    bias: Option<&[T]>,
    scale: T,
) -> Result<CoreOutput<T>> {
    let Dims { n, c, heads, d } = check_dims(q, k, v, pairs, heads)?;
    let m_total = pairs.len();
    if let Some(b) = bias {
        if b.len() != m_total * heads {
            return Err(Error::Shape {
                op: "attention bias",
                lhs: vec![m_total, heads],
                rhs: vec![b.len()],
            });
        }
    }
    let enc = gather_encodings(crpe, pairs, c)?;
    let mut y = vec![T::zero(); n * c];
    let mut logits = vec![T::zero(); m_total * heads];
    let mut probs = vec![T::zero(); m_total * heads];

    let run = |(i, ((yi, lg), pr)): (usize, ((&mut [T], &mut [T]), &mut [T]))| {
        let seg = pairs.segment(i);
        let qi = &q[i * c..(i + 1) * c];
        for (s, m) in seg.clone().enumerate() {
            let j = pairs.index_k[m] as usize;
            let kj = &k[j * c..(j + 1) * c];
            for h in 0..heads {
                let r = h * d..(h + 1) * d;
                let mut acc = T::zero();
                match &enc {
                    Some([eq, ek, _]) => {
                        let (eq, ek) = (&eq[m * c..][r.clone()], &ek[m * c..][r.clone()]);
                        for t in 0..d {
                            acc = acc + scale * qi[r.start + t] * (kj[r.start + t] + eq[t]) + kj[r.start + t] * ek[t];
                        }
                    }
                    None => {
                        for t in r {
                            acc = acc + scale * qi[t] * kj[t];
                        }
                    }
                }
                if let Some(b) = bias {
                    acc = acc + b[m * heads + h];
                }
                lg[s * heads + h] = acc;
            }
        }
        softmax_segment(lg, pr, heads);
        for (s, m) in seg.enumerate() {
            let j = pairs.index_k[m] as usize;
            let vj = &v[j * c..(j + 1) * c];
            for h in 0..heads {
                let p = pr[s * heads + h];
                let r = h * d..(h + 1) * d;
                match &enc {
                    Some([_, _, ev]) => {
                        let ev = &ev[m * c..][r.clone()];
                        for (t, &e) in r.zip(ev) {
                            yi[t] = yi[t] + p * (vj[t] + e);
                        }
                    }
                    None => {
                        for t in r {
                            yi[t] = yi[t] + p * vj[t];
                        }
                    }
                }
            }
        }
    };
    if c > 0 {
        let lg = split_segments(&mut logits, &pairs.offsets, heads);
        let pr = split_segments(&mut probs, &pairs.offsets, heads);
        if n >= PAR_QUERIES {
            y.par_chunks_mut(c).zip(lg).zip(pr).enumerate().for_each(run);
        } else {
            y.chunks_mut(c).zip(lg).zip(pr).enumerate().for_each(run);
        }
    }
    Ok(CoreOutput { y, logits, probs })
}

/// Pair indices grouped by key, ascending within each key.
fn key_transpose(pairs: &IndexPairs) -> (Vec<usize>, Vec<u32>) {
    let n = pairs.num_points();
    let mut offsets = vec![0usize; n + 1];
    for &j in &pairs.index_k {
        offsets[j as usize + 1] += 1;
    }
    for j in 0..n {
        offsets[j + 1] += offsets[j];
    }
    let mut fill = offsets.clone();
    let mut order = vec![0u32; pairs.len()];
    for (m, &j) in pairs.index_k.iter().enumerate() {
        order[fill[j as usize]] = m as u32;
        fill[j as usize] += 1;
    }
    (offsets, order)
}

/// VJP of [`attention_core_forward`] given the upstream gradient `dy` (`N × C`).
#[allow(clippy::too_many_arguments)]
pub fn attention_core_backward<T: Real>(
    dy: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    pairs: &IndexPairs,
    heads: usize,
    crpe: Option<(CrpeView<'_, T>, &[[u16; 3]])>,
    probs: &[T],
    scale: T,
) -> Result<CoreGrads<T>> {
    let Dims { n, c, heads, d } = check_dims(q, k, v, pairs, heads)?;
    let m_total = pairs.len();
    if dy.len() != n * c || probs.len() != m_total * heads {
        return Err(Error::Shape {
            op: "attention backward",
            lhs: vec![n, c, m_total, heads],
            rhs: vec![dy.len(), probs.len()],
        });
    }
    let enc = gather_encodings(crpe, pairs, c)?;
    let mut dq = vec![T::zero(); n * c];
    let mut dlogits = vec![T::zero(); m_total * heads];

    let per_query = |(i, (dqi, dl)): (usize, (&mut [T], &mut [T]))| {
        let seg = pairs.segment(i);
        let dyi = &dy[i * c..(i + 1) * c];
        let pr = &probs[seg.start * heads..seg.end * heads];
        for h in 0..heads {
            let r = h * d..(h + 1) * d;
            let mut weighted = T::zero();
            for (s, m) in seg.clone().enumerate() {
                let j = pairs.index_k[m] as usize;
                let vj = &v[j * c..][r.clone()];
                let mut dp = T::zero();
                match &enc {
                    Some([_, _, ev]) => {
                        let ev = &ev[m * c..][r.clone()];
                        for t in 0..d {
                            dp = dp + dyi[r.start + t] * (vj[t] + ev[t]);
                        }
                    }
                    None => {
                        for t in 0..d {
                            dp = dp + dyi[r.start + t] * vj[t];
                        }
                    }
                }
                dl[s * heads + h] = dp;
                weighted = weighted + pr[s * heads + h] * dp;
            }
            for (s, m) in seg.clone().enumerate() {
                let g = pr[s * heads + h] * (dl[s * heads + h] - weighted);
                dl[s * heads + h] = g;
                let j = pairs.index_k[m] as usize;
                let kj = &k[j * c..][r.clone()];
                match &enc {
                    Some([eq, _, _]) => {
                        let eq = &eq[m * c..][r.clone()];
                        for t in 0..d {
                            dqi[r.start + t] = dqi[r.start + t] + g * (kj[t] + eq[t]);
                        }
                    }
                    None => {
                        for t in 0..d {
                            dqi[r.start + t] = dqi[r.start + t] + g * kj[t];
                        }
                    }
                }
            }
        }
        for v in dqi.iter_mut() {
            *v = *v * scale;
        }
    };
    if c > 0 {
        let dl = split_segments(&mut dlogits, &pairs.offsets, heads);
        if n >= PAR_QUERIES {
            dq.par_chunks_mut(c).zip(dl).enumerate().for_each(per_query);
        } else {
            dq.chunks_mut(c).zip(dl).enumerate().for_each(per_query);
        }
    }

    let (k_offsets, k_order) = key_transpose(pairs);
    let mut dk = vec![T::zero(); n * c];
    let mut dv = vec![T::zero(); n * c];
    let per_key = |(j, (dkj, dvj)): (usize, (&mut [T], &mut [T]))| {
        for &m in &k_order[k_offsets[j]..k_offsets[j + 1]] {
            let m = m as usize;
            let i = pairs.index_q[m] as usize;
            let (qi, dyi) = (&q[i * c..(i + 1) * c], &dy[i * c..(i + 1) * c]);
            for h in 0..heads {
                let g = dlogits[m * heads + h];
                let p = probs[m * heads + h];
                for t in h * d..(h + 1) * d {
                    let ek = enc.as_ref().map_or(T::zero(), |e| e[1][m * c + t]);
                    dkj[t] = dkj[t] + g * (scale * qi[t] + ek);
                    dvj[t] = dvj[t] + p * dyi[t];
                }
            }
        }
    };
    if c > 0 {
        if n >= PAR_QUERIES {
            dk.par_chunks_mut(c).zip(dv.par_chunks_mut(c)).enumerate().for_each(per_key);
        } else {
            dk.chunks_mut(c).zip(dv.chunks_mut(c)).enumerate().for_each(per_key);
        }
    }

    let dtables = match crpe {
        None => None,
        Some((view, bins)) => {
            let mut out = Vec::with_capacity(9);
            for role in [ROLE_Q, ROLE_K, ROLE_V] {
                let mut de = vec![T::zero(); m_total * c];
                for (m, (i, j)) in pairs.iter().enumerate() {
                    for h in 0..heads {
                        let w = match role {
                            ROLE_V => probs[m * heads + h],
                            _ => dlogits[m * heads + h],
                        };
                        for t in h * d..(h + 1) * d {
                            let src = match role {
                                ROLE_Q => scale * q[i * c + t],
                                ROLE_K => k[j * c + t],
                                _ => dy[i * c + t],
                            };
                            de[m * c + t] = w * src;
                        }
                    }
                }
                out.extend(crpe_encode_backward(bins, &de, view.num_bins, c));
            }
            Some(out)
        }
    };
    Ok(CoreGrads {
        dq,
        dk,
        dv,
        dtables,
        dlogits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let pairs = IndexPairs::from_pairs(3, [(0, 0), (0, 1), (0, 2), (1, 1), (2, 2)]).unwrap();
        let logits = [1.0f64, 1.0, 1.0, 5.0, 7.0];
        let p = scatter_softmax(&logits, &pairs, 1).unwrap();
        for v in &p[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(&p[3..], &[1.0, 1.0]);

        let pairs = IndexPairs::from_pairs(1, [(0, 0)]).unwrap();
        let two = IndexPairs::from_pairs(2, [(0, 0), (0, 1)]).unwrap();
        assert_eq!(scatter_softmax(&[3.0], &pairs, 1).unwrap(), vec![1.0]);
        let p = scatter_softmax(&[0.0f64, std::f64::consts::LN_2], &two, 1).unwrap();
        // naive: e^0 / (e^0 + 2), 2 / 3
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let pairs = IndexPairs::from_pairs(2, [(0, 0), (0, 1)]).unwrap();
        let p = scatter_softmax(&[1000.0f64, 999.0], &pairs, 1).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_self_pair_returns_value() {
        let pairs = IndexPairs::from_pairs(1, [(0, 0)]).unwrap();
        let out = attention_core_forward(&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &pairs, 1, None, None, 1.0).unwrap();
        assert_eq!(out.y, vec![5.0, 6.0]);
        let g = attention_core_backward(&[1.0, -1.0], &[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &pairs, 1, None, &out.probs, 1.0).unwrap();
        assert_eq!(g.dv, vec![1.0, -1.0]);
        assert_eq!(g.dq, vec![0.0, 0.0]);
    }

    #[test]
    fn encode_matches_naive_lookup() {
        let (l, c) = (4, 3);
        let tables: Vec<Vec<f64>> = (0..9).map(|t| (0..l * c).map(|i| (t * 100 + i) as f64).collect()).collect();
        let refs: [&[f64]; 9] = std::array::from_fn(|i| tables[i].as_slice());
        let view = CrpeView::new(refs, l, c).unwrap();
        let bins = [[0u16, 3, 1], [2, 2, 2]];
        let e = crpe_encode(&bins, &view, ROLE_K);
        for (m, b) in bins.iter().enumerate() {
            for ch in 0..c {
                let want = tables[3][b[0] as usize * c + ch] + tables[4][b[1] as usize * c + ch] + tables[5][b[2] as usize * c + ch];
                assert_eq!(e[m * c + ch], want);
            }
        }
        let back = crpe_encode_backward(&bins, &vec![1.0; 2 * c], l, c);
        assert_eq!(back[0][0], 1.0);
        assert_eq!(back[0][2 * c], 1.0);
        assert_eq!((back[2][c], back[2][2 * c]), (1.0, 1.0));
        assert_eq!(back[1].iter().sum::<f64>(), 6.0);
    }
}
