//! Hierarchical semantic-ID tokenization.
//!
//! Items are encoded to fixed-length code sequences by residual
//! quantization: level 0 clusters raw embeddings, each deeper level
//! clusters what the shallower levels left unexplained (coarse→fine).
//! The trie over all catalog SIDs drives constrained decoding and the
//! valid-SID-rate metric.

mod codec;
mod trie;

pub use codec::{fit_codebooks, CodebookSet};
pub use trie::SidTrie;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type ItemId = u32;

/// Fixed-length sequence of hierarchical codebook indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId(pub Vec<u16>);

impl SemanticId {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn codes(&self) -> &[u16] {
        &self.0
    }
}

/// Codebook usage and catalog collision statistics.
///
/// Formulas (implementer-defined; the source material names the metrics
/// but not their definitions):
/// - `codebook_usage_rate` = (Σ_l distinct codes used at level l) / (L·K)
/// - `item_uniqueness_rate` = distinct SIDs / items
///   (1.0 when every item has its own SID; 1/N when all N items collide)
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageMetrics {
    pub codebook_usage_rate: f64,
    pub item_uniqueness_rate: f64,
    pub collided_items: usize,
}

pub fn usage_metrics(cb: &CodebookSet, catalog: &[(ItemId, SemanticId)]) -> Result<UsageMetrics> {
    if catalog.is_empty() {
        return Err(CoreError::InvalidInput(
            "usage metrics on empty catalog".into(),
        ));
    }
    let mut used: Vec<std::collections::BTreeSet<u16>> = vec![Default::default(); cb.levels()];
    let mut sid_counts: std::collections::BTreeMap<&SemanticId, usize> = Default::default();
    for (_, sid) in catalog {
        for (l, &c) in sid.codes().iter().enumerate() {
            used[l].insert(c);
        }
        *sid_counts.entry(sid).or_insert(0) += 1;
    }
    let total_used: usize = used.iter().map(|s| s.len()).sum();
    let cur = total_used as f64 / (cb.levels() * cb.codebook_size()) as f64;
    let distinct = sid_counts.len();
    let collided_items = sid_counts
        .values()
        .filter(|&&n| n > 1)
        .map(|&n| n)
        .sum::<usize>();
    Ok(UsageMetrics {
        codebook_usage_rate: cur,
        item_uniqueness_rate: distinct as f64 / catalog.len() as f64,
        collided_items,
    })
}

/// On-disk schema for fitted codebooks plus the catalog SID assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecFile {
    pub version: u32,
    pub sid_len: usize,
    pub codebook_size: usize,
    pub dim: usize,
    /// `levels[l][k]` is the d-dimensional centroid `k` of level `l`.
    pub levels: Vec<Vec<Vec<f64>>>,
    pub catalog: Vec<(ItemId, SemanticId)>,
}

pub const CODEC_FILE_VERSION: u32 = 1;

impl CodecFile {
    pub fn new(cb: &CodebookSet, catalog: Vec<(ItemId, SemanticId)>) -> Self {
        CodecFile {
            version: CODEC_FILE_VERSION,
            sid_len: cb.levels(),
            codebook_size: cb.codebook_size(),
            dim: cb.dim(),
            levels: cb.to_nested(),
            catalog,
        }
    }

    pub fn to_codebooks(&self) -> Result<CodebookSet> {
        if self.version != CODEC_FILE_VERSION {
            return Err(CoreError::config(
                "codec.version",
                format!("unsupported version {}", self.version),
            ));
        }
        CodebookSet::from_nested(&self.levels)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&raw)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(codes: &[u16]) -> SemanticId {
        SemanticId(codes.to_vec())
    }

    #[test]
    fn uniqueness_rate_boundaries() {
        let cb = CodebookSet::from_nested(&vec![vec![vec![0.0]; 4]; 2]).unwrap();
        let all_distinct = vec![(0, sid(&[0, 1])), (1, sid(&[1, 2])), (2, sid(&[2, 3]))];
        let m = usage_metrics(&cb, &all_distinct).unwrap();
        assert_eq!(m.item_uniqueness_rate, 1.0);
        assert_eq!(m.collided_items, 0);

        let all_same = vec![(0, sid(&[1, 1])), (1, sid(&[1, 1])), (2, sid(&[1, 1]))];
        let m = usage_metrics(&cb, &all_same).unwrap();
        assert!((m.item_uniqueness_rate - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.collided_items, 3);
        // one code used at each of two levels, K=4
        assert!((m.codebook_usage_rate - 2.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_set_counting_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(5);
        let cb = CodebookSet::from_nested(&vec![vec![vec![0.0]; 8]; 3]).unwrap();
        let catalog: Vec<(ItemId, SemanticId)> = (0..200)
            .map(|i| {
                (
                    i,
                    sid(&[
                        rng.gen_range(0..8) as u16,
                        rng.gen_range(0..8) as u16,
                        rng.gen_range(0..8) as u16,
                    ]),
                )
            })
            .collect();
        let m = usage_metrics(&cb, &catalog).unwrap();

        // brute-force set arithmetic
        let mut per_level: Vec<std::collections::HashSet<u16>> = vec![Default::default(); 3];
        let mut sids: std::collections::HashSet<Vec<u16>> = Default::default();
        for (_, s) in &catalog {
            sids.insert(s.0.clone());
            for (l, &c) in s.0.iter().enumerate() {
                per_level[l].insert(c);
            }
        }
        let cur = per_level.iter().map(|s| s.len()).sum::<usize>() as f64 / 24.0;
        assert!((m.codebook_usage_rate - cur).abs() < 1e-12);
        assert!((m.item_uniqueness_rate - sids.len() as f64 / 200.0).abs() < 1e-12);
    }
}
