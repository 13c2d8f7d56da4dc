use crate::indexing::IndexPairs;

/// Scalar counts of the per-layer attention buffers in the two execution styles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryFootprint {
    /// Logits and probabilities over the `M` pairs, plus gathered cRPE rows when enabled.
    pub gather_scatter: usize,
    /// Windows padded to `k_max`: the attention map plus padded q/k/v tokens.
    pub padded: usize,
    /// Attention map only, `M · H`.
    pub gather_attn: usize,
    /// Padded attention map only, `W · k_max² · H`.
    pub padded_attn: usize,
}

impl MemoryFootprint {
    pub fn ratio(&self) -> f64 {
        ratio(self.gather_scatter, self.padded)
    }

    pub fn attn_ratio(&self) -> f64 {
        ratio(self.gather_attn, self.padded_attn)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        if a == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a as f64 / b as f64
    }
}

/// Buffer accounting for one attention layer over `pairs`, whose dense windows
/// hold `window_occupancies` points each.
pub fn memory_footprint(pairs: &IndexPairs, window_occupancies: &[usize], heads: usize, head_dim: usize, crpe: bool) -> MemoryFootprint {
    let m = pairs.len();
    let c = heads * head_dim;
    let w = window_occupancies.iter().filter(|&&k| k > 0).count();
    let k_max = window_occupancies.iter().copied().max().unwrap_or(0);
    let gather_attn = m * heads;
    let padded_attn = w * k_max * k_max * heads;
    MemoryFootprint {
        gather_scatter: 2 * gather_attn + if crpe { 3 * m * c } else { 0 },
        padded: padded_attn + 3 * w * k_max * c,
        gather_attn,
        padded_attn,
    }
}
