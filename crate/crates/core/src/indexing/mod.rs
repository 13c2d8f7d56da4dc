//! Query/key index pairs for window attention.
//!
//! Pairs are stored flat as `index_q`/`index_k`, sorted by `(query, key)` and
//! grouped by query through an offsets array, so each query's keys form one
//! contiguous segment. Keys always index the same point set as queries.

mod build;
mod padded;

use std::fmt::Write as _;
use std::ops::Range;

pub use build::{build_dense_pairs, build_sparse_pairs, build_stratified_pairs, merge_dedup, window_occupancies, SparseParams, StratifiedParams};
pub use padded::{build_padded_oracle, PaddedBlock, PaddedMask};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexPairs {
    pub index_q: Vec<u32>,
    pub index_k: Vec<u32>,
    /// `num_points + 1` entries; query `i` owns `offsets[i]..offsets[i + 1]`.
    pub offsets: Vec<usize>,
}

impl IndexPairs {
    /// Builds from per-query key lists, each sorted ascending without duplicates.
    pub fn from_key_lists(lists: &[Vec<u32>]) -> Self {
        let total = lists.iter().map(Vec::len).sum();
        let mut index_q = Vec::with_capacity(total);
        let mut index_k = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        for (q, keys) in lists.iter().enumerate() {
            debug_assert!(keys.windows(2).all(|w| w[0] < w[1]));
            index_q.extend(std::iter::repeat_n(q as u32, keys.len()));
            index_k.extend_from_slice(keys);
            offsets.push(index_k.len());
        }
        IndexPairs { index_q, index_k, offsets }
    }

    /// Builds from arbitrary `(query, key)` pairs; duplicates are dropped.
    pub fn from_pairs(num_points: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); num_points];
        for (q, k) in pairs {
            for (idx, what) in [(q, "query"), (k, "key")] {
                if idx >= num_points {
                    return Err(Error::IndexOutOfRange {
                        context: if what == "query" { "pair query" } else { "pair key" },
                        index: idx,
                        len: num_points,
                    });
                }
            }
            lists[q].push(k as u32);
        }
        for l in &mut lists {
            l.sort_unstable();
            l.dedup();
        }
        Ok(Self::from_key_lists(&lists))
    }

    pub fn empty(num_points: usize) -> Self {
        IndexPairs {
            index_q: Vec::new(),
            index_k: Vec::new(),
            offsets: vec![0; num_points + 1],
        }
    }

    pub fn num_points(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of pairs, `M`.
    pub fn len(&self) -> usize {
        self.index_k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_k.is_empty()
    }

    pub fn segment(&self, q: usize) -> Range<usize> {
        self.offsets[q]..self.offsets[q + 1]
    }

    pub fn keys(&self, q: usize) -> &[u32] {
        &self.index_k[self.segment(q)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.index_q.iter().zip(&self.index_k).map(|(&q, &k)| (q as usize, k as usize))
    }

    pub fn contains(&self, q: usize, k: usize) -> bool {
        q < self.num_points() && self.keys(q).binary_search(&(k as u32)).is_ok()
    }

    /// Checks sorting, grouping and index ranges.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_points();
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.index_q.len() != self.index_k.len() {
            return bad(format!("index_q has {} entries, index_k {}", self.index_q.len(), self.index_k.len()));
        }
        if self.offsets[0] != 0 || self.offsets[n] != self.len() {
            return bad("offsets do not span the pair list".into());
        }
        for q in 0..n {
            let seg = self.segment(q);
            if seg.start > seg.end {
                return bad(format!("offsets decrease at query {q}"));
            }
            if self.index_q[seg.clone()].iter().any(|&v| v as usize != q) {
                return bad(format!("pairs of query {q} are not contiguous"));
            }
            let keys = &self.index_k[seg];
            if let Some(&k) = keys.iter().find(|&&k| k as usize >= n) {
                return Err(Error::IndexOutOfRange {
                    context: "pair key",
                    index: k as usize,
                    len: n,
                });
            }
            if keys.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("keys of query {q} are not strictly increasing"));
            }
        }
        Ok(())
    }

    /// One `"q k"` line per pair, for diffing against other implementations.
    pub fn to_debug_text(&self) -> String {
        let mut s = String::with_capacity(self.len() * 8);
        for (q, k) in self.iter() {
            let _ = writeln!(s, "{q} {k}");
        }
        s
    }
}
