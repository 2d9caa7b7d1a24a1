//! Coarse-grained candidate selection over cached query embeddings.
//!
//! [`VectorIndex::query`] is an exact linear scan. [`VectorIndex::approx_query`]
//! walks an HNSW graph and re-ranks what it finds with exact cosine, so both
//! report true similarities; the approximate path may only miss entries.
//! Results are sorted by descending similarity with ties broken by ascending
//! id, and only entries with similarity `>= tau_sim` are returned.

mod hnsw;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

pub use hnsw::HnswParams;
use hnsw::Hnsw;

use crate::model::{ElementId, EmbeddingVector, ModelError};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("{0} is already indexed")]
    DuplicateId(ElementId),
    #[error("{0} is not indexed")]
    UnknownId(ElementId),
    #[error("embedding dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("snapshot is malformed: {0}")]
    BadSnapshot(String),
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub element_id: ElementId,
    pub similarity: f64,
}

/// Indexes at or below this size are always scanned exactly.
pub const EXACT_FALLBACK_MAX: usize = 64;

const SNAPSHOT_MAGIC: &[u8; 8] = b"SEMIDX01";

#[derive(Debug, Clone)]
pub struct VectorIndex {
    dimension: usize,
    seed: u64,
    entries: BTreeMap<ElementId, EmbeddingVector>,
    graph: Hnsw,
}

fn sort_and_truncate(candidates: &mut Vec<Candidate>, k: usize) {
    candidates.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.element_id.cmp(&b.element_id))
    });
    candidates.truncate(k);
}

impl VectorIndex {
    /// `seed` records which embedder seed produced the vectors.
    pub fn new(dimension: usize, seed: u64) -> Self {
        Self::with_params(dimension, seed, HnswParams::default())
    }

    pub fn with_params(dimension: usize, seed: u64, params: HnswParams) -> Self {
        VectorIndex {
            dimension,
            seed,
            entries: BTreeMap::new(),
            graph: Hnsw::new(params),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: ElementId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ElementId> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, id: ElementId) -> Option<&EmbeddingVector> {
        self.entries.get(&id)
    }

    pub fn insert(&mut self, id: ElementId, embedding: EmbeddingVector) -> Result<(), IndexError> {
        if embedding.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                got: embedding.dimension(),
            });
        }
        if self.entries.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        self.graph.insert(id.0, embedding.components().to_vec());
        self.entries.insert(id, embedding);
        Ok(())
    }

    pub fn remove(&mut self, id: ElementId) -> Result<(), IndexError> {
        if self.entries.remove(&id).is_none() {
            return Err(IndexError::UnknownId(id));
        }
        self.graph.remove(id.0);
        if self.graph.tombstones() > self.graph.live_len().max(EXACT_FALLBACK_MAX) {
            self.rebuild_graph();
        }
        Ok(())
    }

    fn rebuild_graph(&mut self) {
        let mut graph = Hnsw::new(self.graph.params().clone());
        for (id, emb) in &self.entries {
            graph.insert(id.0, emb.components().to_vec());
        }
        self.graph = graph;
    }

    fn check_query(&self, q: &EmbeddingVector) -> bool {
        q.dimension() == self.dimension
    }

    /// Exact top-`k` by full scan.
    pub fn query(&self, q: &EmbeddingVector, tau_sim: f64, k: usize) -> Vec<Candidate> {
        if k == 0 || !self.check_query(q) {
            return Vec::new();
        }
        let mut out: Vec<Candidate> = self
            .entries
            .iter()
            .map(|(&id, e)| Candidate {
                element_id: id,
                similarity: q.cosine(e),
            })
            .filter(|c| c.similarity >= tau_sim)
            .collect();
        sort_and_truncate(&mut out, k);
        out
    }

    /// Graph search with exact re-ranking. Falls back to [`Self::query`] for
    /// small indexes.
    pub fn approx_query(&self, q: &EmbeddingVector, tau_sim: f64, k: usize) -> Vec<Candidate> {
        if self.entries.len() <= EXACT_FALLBACK_MAX {
            return self.query(q, tau_sim, k);
        }
        if k == 0 || !self.check_query(q) {
            return Vec::new();
        }
        let mut out: Vec<Candidate> = self
            .graph
            .search(q.components(), k)
            .into_iter()
            .filter_map(|(key, _)| {
                let id = ElementId(key);
                self.entries.get(&id).map(|e| Candidate {
                    element_id: id,
                    similarity: q.cosine(e),
                })
            })
            .filter(|c| c.similarity >= tau_sim)
            .collect();
        sort_and_truncate(&mut out, k);
        out
    }

    /// Binary snapshot: magic `SEMIDX01`, dimension (u32 LE), seed (u64 LE),
    /// count (u64 LE), then per entry in ascending id order the id (u64 LE)
    /// followed by `dimension` little-endian f32 components.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<(), IndexError> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&(self.dimension as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (id, emb) in &self.entries {
            w.write_all(&id.0.to_le_bytes())?;
            for c in emb.components() {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R, params: HnswParams) -> Result<Self, IndexError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(IndexError::BadSnapshot("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let dimension = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8);
        if dimension == 0 {
            return Err(IndexError::BadSnapshot("zero dimension".into()));
        }
        let mut index = VectorIndex::with_params(dimension, seed, params);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            let id = ElementId(u64::from_le_bytes(b8));
            let mut components = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                r.read_exact(&mut b4)?;
                components.push(f32::from_le_bytes(b4));
            }
            index.insert(id, EmbeddingVector::from_unit(components)?)?;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(IndexError::BadSnapshot(format!("{} trailing bytes", rest.len())));
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_of(raw: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(raw).unwrap()
    }

    /// Unit vector at cosine `c` to e0 in the (e0, e1) plane.
    fn at_cosine(c: f64, dim: usize) -> EmbeddingVector {
        let mut raw = vec![0.0; dim];
        raw[0] = c;
        raw[1] = (1.0 - c * c).sqrt();
        vec_of(&raw)
    }

    fn e0(dim: usize) -> EmbeddingVector {
        at_cosine(1.0, dim)
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        let raw: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        vec_of(&raw)
    }

    /// Independent oracle: every entry scored, filtered, fully sorted.
    fn linear_scan(
        entries: &[(ElementId, EmbeddingVector)],
        q: &EmbeddingVector,
        tau: f64,
        k: usize,
    ) -> Vec<ElementId> {
        let mut scored: Vec<(f64, ElementId)> = entries
            .iter()
            .map(|(id, e)| {
                let dot: f64 = q
                    .components()
                    .iter()
                    .zip(e.components())
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                (dot, *id)
            })
            .filter(|(s, _)| *s >= tau)
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, id)| id).collect()
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = VectorIndex::new(8, 1);
        assert!(idx.query(&e0(8), 0.0, 5).is_empty());
        assert!(idx.approx_query(&e0(8), 0.0, 5).is_empty());
    }

    #[test]
    fn self_match_has_similarity_one() {
        let mut idx = VectorIndex::new(8, 1);
        idx.insert(ElementId(7), e0(8)).unwrap();
        let got = idx.query(&e0(8), 0.9, 5);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].element_id, ElementId(7));
        assert!((got[0].similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut idx = VectorIndex::new(8, 1);
        idx.insert(ElementId(9), e0(8)).unwrap();
        idx.insert(ElementId(3), e0(8)).unwrap();
        let ids: Vec<_> = idx.query(&e0(8), 0.5, 5).iter().map(|c| c.element_id).collect();
        assert_eq!(ids, vec![ElementId(3), ElementId(9)]);
    }

    #[test]
    fn insert_errors() {
        let mut idx = VectorIndex::new(256, 1);
        assert!(matches!(
            idx.insert(ElementId(1), e0(128)),
            Err(IndexError::DimensionMismatch { expected: 256, got: 128 })
        ));
        idx.insert(ElementId(1), e0(256)).unwrap();
        assert!(matches!(
            idx.insert(ElementId(1), e0(256)),
            Err(IndexError::DuplicateId(_))
        ));
    }

    #[test]
    fn remove_semantics() {
        let mut idx = VectorIndex::new(8, 1);
        idx.insert(ElementId(1), e0(8)).unwrap();
        idx.remove(ElementId(1)).unwrap();
        assert!(idx.query(&e0(8), 0.0, 5).is_empty());
        assert!(matches!(idx.remove(ElementId(1)), Err(IndexError::UnknownId(_))));
    }

    #[test]
    fn removing_one_near_duplicate_keeps_the_other() {
        let mut idx = VectorIndex::new(8, 1);
        idx.insert(ElementId(1), at_cosine(0.99, 8)).unwrap();
        idx.insert(ElementId(2), at_cosine(0.98, 8)).unwrap();
        idx.remove(ElementId(1)).unwrap();
        let entries = vec![(ElementId(2), at_cosine(0.98, 8))];
        let expect = linear_scan(&entries, &e0(8), 0.9, 5);
        let got: Vec<_> = idx.query(&e0(8), 0.9, 5).iter().map(|c| c.element_id).collect();
        assert_eq!(got, expect);
        assert_eq!(got, vec![ElementId(2)]);
    }

    #[test]
    fn threshold_semantics() {
        let mut idx = VectorIndex::new(8, 1);
        idx.insert(ElementId(1), at_cosine(0.95, 8)).unwrap();
        idx.insert(ElementId(2), at_cosine(0.85, 8)).unwrap();
        let got = idx.query(&e0(8), 0.9, 5);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].element_id, ElementId(1));
        assert!((got[0].similarity - 0.95).abs() < 1e-5);
    }

    #[test]
    fn small_index_approx_equals_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut idx = VectorIndex::new(16, 1);
        for i in 0..EXACT_FALLBACK_MAX as u64 {
            idx.insert(ElementId(i), random_unit(&mut rng, 16)).unwrap();
        }
        for _ in 0..20 {
            let q = random_unit(&mut rng, 16);
            assert_eq!(idx.query(&q, 0.0, 5), idx.approx_query(&q, 0.0, 5));
        }
    }

    #[test]
    fn approx_similarities_are_exact_cosines() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut idx = VectorIndex::new(32, 1);
        for i in 0..500 {
            idx.insert(ElementId(i), random_unit(&mut rng, 32)).unwrap();
        }
        let q = random_unit(&mut rng, 32);
        for c in idx.approx_query(&q, -1.0, 10) {
            let truth = q.cosine(idx.get(c.element_id).unwrap());
            assert!((c.similarity - truth).abs() <= 1e-5);
        }
    }

    #[test]
    fn graph_survives_heavy_removal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut idx = VectorIndex::new(16, 1);
        let mut kept = Vec::new();
        for i in 0..400u64 {
            let v = random_unit(&mut rng, 16);
            idx.insert(ElementId(i), v.clone()).unwrap();
            if i % 4 == 0 {
                kept.push((ElementId(i), v));
            }
        }
        for i in 0..400u64 {
            if i % 4 != 0 {
                idx.remove(ElementId(i)).unwrap();
            }
        }
        assert_eq!(idx.len(), 100);
        for _ in 0..20 {
            let q = random_unit(&mut rng, 16);
            let got: Vec<_> = idx.approx_query(&q, -1.0, 5).iter().map(|c| c.element_id).collect();
            assert!(got.iter().all(|id| id.0 % 4 == 0));
            assert_eq!(got, linear_scan(&kept, &q, -1.0, 5));
        }
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut idx = VectorIndex::new(24, 77);
        for i in [5u64, 1, 9, 200] {
            idx.insert(ElementId(i), random_unit(&mut rng, 24)).unwrap();
        }
        let mut bytes = Vec::new();
        idx.write_snapshot(&mut bytes).unwrap();
        let restored = VectorIndex::read_snapshot(bytes.as_slice(), HnswParams::default()).unwrap();
        assert_eq!(restored.dimension(), 24);
        assert_eq!(restored.seed(), 77);
        for id in idx.ids() {
            let a: Vec<u32> = idx.get(id).unwrap().components().iter().map(|c| c.to_bits()).collect();
            let b: Vec<u32> = restored.get(id).unwrap().components().iter().map(|c| c.to_bits()).collect();
            assert_eq!(a, b);
        }
        let mut again = Vec::new();
        restored.write_snapshot(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(VectorIndex::read_snapshot(&bytes[..bytes.len() - 1], HnswParams::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn exact_query_matches_linear_scan(seed in any::<u64>(), n in 0usize..200, k in 1usize..8, tau in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = VectorIndex::new(8, 0);
            let mut entries = Vec::new();
            for i in 0..n {
                let v = random_unit(&mut rng, 8);
                idx.insert(ElementId(i as u64 * 3), v.clone()).unwrap();
                entries.push((ElementId(i as u64 * 3), v));
            }
            let q = random_unit(&mut rng, 8);
            let got: Vec<_> = idx.query(&q, tau, k).iter().map(|c| c.element_id).collect();
            prop_assert_eq!(got, linear_scan(&entries, &q, tau, k));
        }

        #[test]
        fn raising_tau_never_enlarges(seed in any::<u64>(), lo in -1.0f64..1.0, delta in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = VectorIndex::new(8, 0);
            for i in 0..100 {
                idx.insert(ElementId(i), random_unit(&mut rng, 8)).unwrap();
            }
            let q = random_unit(&mut rng, 8);
            let hi = lo + delta;
            let big = idx.query(&q, lo, 100);
            let small = idx.query(&q, hi, 100);
            prop_assert!(small.len() <= big.len());
            prop_assert!(small.iter().all(|c| big.contains(c)));
        }

        #[test]
        fn insert_remove_history_is_reflected(ops in prop::collection::vec((0u64..40, any::<bool>()), 0..120)) {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut idx = VectorIndex::new(8, 0);
            let mut live = std::collections::BTreeSet::new();
            for (id, insert) in ops {
                let id = ElementId(id);
                if insert {
                    let ok = idx.insert(id, random_unit(&mut rng, 8)).is_ok();
                    prop_assert_eq!(ok, live.insert(id));
                } else {
                    let ok = idx.remove(id).is_ok();
                    prop_assert_eq!(ok, live.remove(&id));
                }
            }
            let q = random_unit(&mut rng, 8);
            let mut got: Vec<_> = idx.approx_query(&q, -1.0, 1000).iter().map(|c| c.element_id).collect();
            got.sort();
            prop_assert_eq!(got, live.into_iter().collect::<Vec<_>>());
        }
    }
}
