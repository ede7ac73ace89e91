//! Exact cosine index over unit-norm embeddings.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::embedder::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::linalg::cosine_f32;

/// Stored vectors may drift this far from unit norm (f32 rounding).
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AddReport {
    pub added: usize,
    /// Ids whose previous vector was replaced.
    pub replaced: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dimension: usize,
    records: Vec<EmbeddingRecord>,
    by_id: BTreeMap<String, usize>,
}

impl VectorIndex {
    pub fn new(dimension: usize) -> Self {
        Self { dimension, records: Vec::new(), by_id: BTreeMap::new() }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// Records in insertion order (replacements keep their slot).
    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    /// Add records; an existing id is overwritten by the later vector.
    /// Nothing is inserted if any record has the wrong dimension or norm.
    pub fn add(&mut self, records: impl IntoIterator<Item = EmbeddingRecord>) -> Result<AddReport> {
        let records: Vec<EmbeddingRecord> = records.into_iter().collect();
        for r in &records {
            if r.vector.len() != self.dimension {
                return Err(Error::DimensionMismatch { expected: self.dimension, found: r.vector.len() });
            }
            let norm = libm::sqrt(r.vector.iter().map(|&x| f64::from(x) * f64::from(x)).sum());
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::NotNormalized(norm));
            }
        }
        let mut report = AddReport::default();
        for r in records {
            match self.by_id.get(&r.input_id) {
                Some(&slot) => {
                    report.replaced.push(r.input_id.clone());
                    self.records[slot] = r;
                }
                None => {
                    self.by_id.insert(r.input_id.clone(), self.records.len());
                    self.records.push(r);
                    report.added += 1;
                }
            }
        }
        Ok(report)
    }

    /// Exact top-`k` by cosine, ties by id ascending. `k` larger than the
    /// index returns everything.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        if query.len() != self.dimension {
            return Err(Error::DimensionMismatch { expected: self.dimension, found: query.len() });
        }
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let mut hits: Vec<(f64, &str)> =
            self.records.iter().map(|r| (cosine_f32(query, &r.vector), r.input_id.as_str())).collect();
        let order = |a: &(f64, &str), b: &(f64, &str)| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1));
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        Ok(hits.into_iter().map(|(cosine, id)| SearchHit { id: id.into(), cosine }).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{SubLayer, SubLayerTap};
    use alloc::string::ToString;
    use alloc::vec;

    fn record(id: &str, v: Vec<f32>) -> EmbeddingRecord {
        EmbeddingRecord {
            input_id: id.to_string(),
            vector: v,
            backend_id: "test".into(),
            tap: SubLayerTap::last(1, SubLayer::AttnOut),
            prompt_hash: String::new(),
            predicted_token: 0,
        }
    }

    #[test]
    fn empty_add_is_identity() {
        let mut idx = VectorIndex::new(2);
        idx.add([record("a", vec![1.0, 0.0])]).unwrap();
        let before = idx.clone();
        assert_eq!(idx.add([]).unwrap(), AddReport::default());
        assert_eq!(idx, before);
    }

    #[test]
    fn duplicate_ids_replace() {
        let mut idx = VectorIndex::new(2);
        idx.add([record("a", vec![1.0, 0.0])]).unwrap();
        let rep = idx.add([record("a", vec![0.0, 1.0])]).unwrap();
        assert_eq!(rep.added, 0);
        assert_eq!(rep.replaced, ["a"]);
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.get("a").unwrap().vector, [0.0, 1.0]);

        let mut fresh = VectorIndex::new(2);
        let rep = fresh.add([record("a", vec![1.0, 0.0]), record("a", vec![0.0, 1.0])]).unwrap();
        assert_eq!(rep.added, 1);
        assert_eq!(fresh.get("a").unwrap().vector, [0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_vectors_atomically() {
        let mut idx = VectorIndex::new(2);
        let err = idx.add([record("a", vec![1.0, 0.0]), record("b", vec![1.0, 0.0, 0.0])]);
        assert_eq!(err, Err(Error::DimensionMismatch { expected: 2, found: 3 }));
        assert!(idx.is_empty());
        assert!(matches!(idx.add([record("c", vec![2.0, 0.0])]), Err(Error::NotNormalized(_))));
        assert!(idx.search(&[1.0], 1).is_err());
    }

    #[test]
    fn self_match_and_orthogonal() {
        let mut idx = VectorIndex::new(2);
        idx.add([record("x", vec![1.0, 0.0])]).unwrap();
        let hits = idx.search(&[1.0, 0.0], 3).unwrap();
        assert_eq!(hits, [SearchHit { id: "x".into(), cosine: 1.0 }]);
        assert_eq!(idx.search(&[0.0, 1.0], 1).unwrap()[0].cosine, 0.0);
    }

    #[test]
    fn ties_break_by_id() {
        let mut idx = VectorIndex::new(2);
        idx.add([record("b", vec![1.0, 0.0]), record("a", vec![1.0, 0.0]), record("c", vec![0.0, 1.0])]).unwrap();
        let ids: Vec<String> = idx.search(&[1.0, 0.0], 2).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(ids, ["a", "b"]);
    }
}
