use super::{quantize_rel, CrpeView, ROLE_K, ROLE_Q, ROLE_V};
use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::indexing::{build_padded_oracle, IndexPairs};

/// Reference attention via padded blocks and a dense masked softmax.
///
/// Shares no code with the gather/scatter kernel: bins are recomputed from
/// `positions`, encodings are looked up per slot, and padding slots carry
/// `-inf` logits. `crpe` carries the tables and their quantization range.
#[allow(clippy::too_many_arguments)]
pub fn padded_attention_oracle<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    positions: &[Point3],
    pairs: &IndexPairs,
    heads: usize,
    crpe: Option<(CrpeView<'_, T>, f64)>,
    bias: Option<&[T]>,
    scale: T,
) -> Result<Vec<T>> {
    let n = positions.len();
    let mask = build_padded_oracle(pairs, n)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let c = q.len() / n;
    if heads == 0 || !c.is_multiple_of(heads) || k.len() != n * c || v.len() != n * c {
        return Err(Error::invalid("oracle inputs do not share an N × H·D layout"));
    }
    let d = c / heads;
    let (qm, km) = (mask.q_max, mask.k_max);
    let valid = mask.dense_mask();
    let enc = |role: usize, i: usize, j: usize, t: usize| -> T {
        let Some((view, s_range)) = crpe else { return T::zero() };
        let mut acc = T::zero();
        for axis in 0..3 {
            let b = quantize_rel(positions[i][axis] - positions[j][axis], s_range, view.num_bins);
            acc = acc + view.table(role, axis)[b * view.channels + t];
        }
        acc
    };
    let bias_at = |i: usize, j: usize, h: usize| -> T {
        let Some(b) = bias else { return T::zero() };
        let seg = pairs.segment(i);
        let pos = pairs.keys(i).binary_search(&(j as u32)).expect("slot is a pair");
        b[(seg.start + pos) * heads + h]
    };

    let mut y = vec![T::zero(); n * c];
    let mut logits = vec![T::neg_infinity(); qm * km];
    for (w, block) in mask.blocks.iter().enumerate() {
        for h in 0..heads {
            logits.iter_mut().for_each(|l| *l = T::neg_infinity());
            for (a, &i) in block.queries.iter().enumerate() {
                for (b, &j) in block.keys.iter().enumerate() {
                    if !valid[(w * qm + a) * km + b] {
                        continue;
                    }
                    let (i, j) = (i as usize, j as usize);
                    let mut s = bias_at(i, j, h);
                    for t in h * d..(h + 1) * d {
                        let qs = scale * q[i * c + t];
                        s = s + qs * k[j * c + t] + qs * enc(ROLE_Q, i, j, t) + k[j * c + t] * enc(ROLE_K, i, j, t);
                    }
                    logits[a * km + b] = s;
                }
            }
            for (a, &i) in block.queries.iter().enumerate() {
                let row = &logits[a * km..(a + 1) * km];
                let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let z: T = row.iter().map(|&x| (x - max).exp()).sum();
                let i = i as usize;
                for (b, &j) in block.keys.iter().enumerate() {
                    let p = (row[b] - max).exp() / z;
                    if p == T::zero() {
                        continue;
                    }
                    let j = j as usize;
                    for t in h * d..(h + 1) * d {
                        y[i * c + t] = y[i * c + t] + p * (v[j * c + t] + enc(ROLE_V, i, j, t));
                    }
                }
            }
        }
    }
    Ok(y)
}
