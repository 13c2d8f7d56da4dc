use std::collections::BTreeMap;

use super::IndexPairs;
use crate::error::{Error, Result};

/// Queries sharing one key set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBlock {
    pub queries: Vec<u32>,
    pub keys: Vec<u32>,
}

/// Pairs laid out as `W` blocks padded to `q_max × k_max`, the layout a
/// dense batched attention would use. Padding slots are masked out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedMask {
    pub num_points: usize,
    pub blocks: Vec<PaddedBlock>,
    pub q_max: usize,
    pub k_max: usize,
}

/// Groups queries by identical key set; blocks are ordered by first query.
pub fn build_padded_oracle(pairs: &IndexPairs, num_points: usize) -> Result<PaddedMask> {
    if pairs.num_points() != num_points {
        return Err(Error::invalid(format!(
            "pairs cover {} points, expected {num_points}",
            pairs.num_points()
        )));
    }
    pairs.validate()?;
    let mut by_keys: BTreeMap<&[u32], usize> = BTreeMap::new();
    let mut blocks: Vec<PaddedBlock> = Vec::new();
    for q in 0..num_points {
        let keys = pairs.keys(q);
        if keys.is_empty() {
            continue;
        }
        let b = *by_keys.entry(keys).or_insert_with(|| {
            blocks.push(PaddedBlock {
                queries: Vec::new(),
                keys: keys.to_vec(),
            });
            blocks.len() - 1
        });
        blocks[b].queries.push(q as u32);
    }
    let q_max = blocks.iter().map(|b| b.queries.len()).max().unwrap_or(0);
    let k_max = blocks.iter().map(|b| b.keys.len()).max().unwrap_or(0);
    Ok(PaddedMask {
        num_points,
        blocks,
        q_max,
        k_max,
    })
}

impl PaddedMask {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Slots in the padded attention map, `W · q_max · k_max`.
    pub fn padded_slots(&self) -> usize {
        self.blocks.len() * self.q_max * self.k_max
    }

    /// Row-major `W × q_max × k_max` validity mask.
    pub fn dense_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.padded_slots()];
        for (w, b) in self.blocks.iter().enumerate() {
            for qi in 0..b.queries.len() {
                let row = (w * self.q_max + qi) * self.k_max;
                mask[row..row + b.keys.len()].fill(true);
            }
        }
        mask
    }

    /// Recovers the pair list from the unmasked slots.
    pub fn to_pairs(&self) -> IndexPairs {
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); self.num_points];
        for b in &self.blocks {
            for &q in &b.queries {
                lists[q as usize] = b.keys.clone();
            }
        }
        IndexPairs::from_key_lists(&lists)
    }
}
