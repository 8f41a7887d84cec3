//! Exact and inverted-file k-nearest-neighbour search over unit embeddings.
//!
//! Scores are cosine similarities (inner products of unit vectors). Hits are
//! ordered by descending score with ascending `record_id` breaking ties, both
//! in the flat index and in the IVF index, so an IVF search that probes every
//! list returns exactly what the flat index returns.

pub mod kmeans;
mod persist;

use std::collections::HashSet;

use thiserror::Error;

use crate::shard::{Column, CorpusRecord};
use crate::vector::{dot, unit_or_renormalize};

pub use persist::{load_index, save_index, PersistError, INDEX_MAGIC, INDEX_VERSION};

pub const DEFAULT_NPROBE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum IndexKind {
    Flat = 0,
    Ivf = 1,
    // 2..: reserved for compressed variants (PQ / OPQ / HNSW coarse quantizer).
}

impl IndexKind {
    pub fn from_tag(tag: u16) -> Option<Self> {
        match tag {
            0 => Some(IndexKind::Flat),
            1 => Some(IndexKind::Ivf),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AnnError {
    #[error("vector {position} has dimension {found}, expected {expected}")]
    DimensionMismatch { position: usize, expected: usize, found: usize },
    #[error("query has dimension {found}, index has {expected}")]
    QueryDimension { expected: usize, found: usize },
    #[error("duplicate record_id {0}")]
    DuplicateId(u64),
    #[error("vector for record {record_id} has norm {norm}, not within 1e-3 of 1")]
    NotUnit { record_id: u64, norm: f32 },
    #[error("query has norm {0}, not within 1e-3 of 1")]
    QueryNotUnit(f32),
    #[error("k must be positive")]
    ZeroK,
    #[error("nlist must be positive")]
    ZeroNlist,
    #[error("nlist {nlist} exceeds vector count {n}")]
    NlistTooLarge { nlist: usize, n: usize },
    #[error("nprobe must be in 1..={nlist}, got {nprobe}")]
    BadNprobe { nprobe: usize, nlist: usize },
    #[error("cannot build an IVF index over zero vectors")]
    EmptyColumn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub record_id: u64,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct IvfLayout {
    pub(crate) centroids: Vec<f32>,
    /// Positions per list, ascending.
    pub(crate) lists: Vec<Vec<u32>>,
    pub(crate) seed: u64,
    pub(crate) iters: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    pub(crate) kind: IndexKind,
    pub(crate) dim: usize,
    /// position → record_id
    pub(crate) ids: Vec<u64>,
    /// Row-major, one row per position.
    pub(crate) vectors: Vec<f32>,
    pub(crate) ivf: Option<IvfLayout>,
}

/// `(record_id, embedding)` pairs for one embedding column of a corpus.
pub type EmbeddingColumn = Vec<(u64, Vec<f32>)>;

/// Extracts an embedding column, leaving out NSFW-flagged records and, for the
/// text column, records without a text embedding.
pub fn column_from_records<'a>(records: impl IntoIterator<Item = &'a CorpusRecord>, column: Column) -> EmbeddingColumn {
    records
        .into_iter()
        .filter(|r| !r.nsfw)
        .filter_map(|r| match column {
            Column::Image => Some((r.record_id, r.image_embedding.clone())),
            Column::Text => r.text_embedding.clone().map(|t| (r.record_id, t)),
        })
        .collect()
}

fn prepare(column: &[(u64, Vec<f32>)]) -> Result<(usize, Vec<u64>, Vec<f32>), AnnError> {
    let dim = column.first().map_or(0, |(_, v)| v.len());
    let mut ids = Vec::with_capacity(column.len());
    let mut vectors = Vec::with_capacity(column.len() * dim);
    let mut seen = HashSet::with_capacity(column.len());
    for (position, (id, v)) in column.iter().enumerate() {
        if v.len() != dim {
            return Err(AnnError::DimensionMismatch { position, expected: dim, found: v.len() });
        }
        if !seen.insert(*id) {
            return Err(AnnError::DuplicateId(*id));
        }
        let unit = unit_or_renormalize(v).map_err(|e| AnnError::NotUnit { record_id: *id, norm: e.norm })?;
        ids.push(*id);
        vectors.extend_from_slice(&unit);
    }
    Ok((dim, ids, vectors))
}

/// Default list count for `n` vectors: ⌈√n⌉.
pub fn default_nlist(n: usize) -> usize {
    let mut r = (n as f64).sqrt().ceil() as usize;
    while r * r < n {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= n {
        r -= 1;
    }
    r.max(1)
}

pub fn build_flat_index(column: &[(u64, Vec<f32>)]) -> Result<AnnIndex, AnnError> {
    let (dim, ids, vectors) = prepare(column)?;
    Ok(AnnIndex { kind: IndexKind::Flat, dim, ids, vectors, ivf: None })
}

pub fn build_ivf_index(column: &[(u64, Vec<f32>)], nlist: usize, seed: u64, iters: u32) -> Result<AnnIndex, AnnError> {
    if nlist == 0 {
        return Err(AnnError::ZeroNlist);
    }
    if column.is_empty() {
        return Err(AnnError::EmptyColumn);
    }
    if nlist > column.len() {
        return Err(AnnError::NlistTooLarge { nlist, n: column.len() });
    }
    let (dim, ids, vectors) = prepare(column)?;
    let centroids = kmeans::train(&vectors, dim, nlist, seed, iters);
    let assignment = kmeans::assign(&vectors, &centroids, dim);
    let mut lists = vec![Vec::new(); nlist];
    for (pos, &a) in assignment.iter().enumerate() {
        lists[a as usize].push(pos as u32);
    }
    Ok(AnnIndex { kind: IndexKind::Ivf, dim, ids, vectors, ivf: Some(IvfLayout { centroids, lists, seed, iters }) })
}

/// Bounded top-k selection under the (score desc, record_id asc) order.
struct TopK {
    k: usize,
    hits: Vec<SearchHit>,
}

fn better(a: &SearchHit, b: &SearchHit) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.record_id.cmp(&b.record_id))
}

impl TopK {
    fn new(k: usize) -> Self {
        Self { k, hits: Vec::with_capacity(2 * k.min(1 << 16)) }
    }

    fn push(&mut self, hit: SearchHit) {
        self.hits.push(hit);
        if self.hits.len() >= 2 * self.k.max(8) {
            self.compact();
        }
    }

    fn compact(&mut self) {
        if self.hits.len() > self.k {
            self.hits.select_nth_unstable_by(self.k - 1, better);
            self.hits.truncate(self.k);
        }
    }

    fn finish(mut self) -> Vec<SearchHit> {
        self.compact();
        self.hits.sort_by(better);
        self.hits
    }
}

impl AnnIndex {
    pub fn kind(&self) -> IndexKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn nlist(&self) -> usize {
        self.ivf.as_ref().map_or(1, |l| l.lists.len())
    }

    pub fn record_ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn centroids(&self) -> Option<&[f32]> {
        self.ivf.as_ref().map(|l| l.centroids.as_slice())
    }

    /// Record ids held by each inverted list (IVF only).
    pub fn list_members(&self) -> Option<Vec<Vec<u64>>> {
        self.ivf
            .as_ref()
            .map(|l| l.lists.iter().map(|list| list.iter().map(|&p| self.ids[p as usize]).collect()).collect())
    }

    fn row(&self, pos: usize) -> &[f32] {
        &self.vectors[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Top-`k` hits for `query`. `nprobe` is ignored by the flat index.
    pub fn search(&self, query: &[f32], k: usize, nprobe: usize) -> Result<Vec<SearchHit>, AnnError> {
        if k == 0 {
            return Err(AnnError::ZeroK);
        }
        if query.len() != self.dim {
            return Err(AnnError::QueryDimension { expected: self.dim, found: query.len() });
        }
        let query = unit_or_renormalize(query).map_err(|e| AnnError::QueryNotUnit(e.norm))?;
        let mut top = TopK::new(k);
        match &self.ivf {
            None => {
                for (pos, &record_id) in self.ids.iter().enumerate() {
                    top.push(SearchHit { record_id, score: dot(&query, self.row(pos)) });
                }
            }
            Some(layout) => {
                let nlist = layout.lists.len();
                if nprobe == 0 || nprobe > nlist {
                    return Err(AnnError::BadNprobe { nprobe, nlist });
                }
                for list in self.probe_order(layout, &query).into_iter().take(nprobe) {
                    for &pos in &layout.lists[list] {
                        let pos = pos as usize;
                        top.push(SearchHit { record_id: self.ids[pos], score: dot(&query, self.row(pos)) });
                    }
                }
            }
        }
        Ok(top.finish())
    }

    /// Lists sorted by centroid distance to the query, ascending, lower index on ties.
    fn probe_order(&self, layout: &IvfLayout, query: &[f32]) -> Vec<usize> {
        let norms = kmeans::half_sq_norms(&layout.centroids, self.dim);
        let mut order: Vec<(f32, usize)> = layout
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(j, c)| (norms[j] - dot(query, c), j))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.into_iter().map(|(_, j)| j).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: f32 = std::f32::consts::FRAC_1_SQRT_2;

    fn three() -> EmbeddingColumn {
        vec![(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0]), (3, vec![H, H])]
    }

    #[test]
    fn flat_hand_example() {
        let idx = build_flat_index(&three()).unwrap();
        let hits = idx.search(&[1.0, 0.0], 2, 1).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!((hits[0].record_id, hits[0].score), (1, 1.0));
        assert_eq!(hits[1].record_id, 3);
        assert!((hits[1].score - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-4);

        let all = idx.search(&[1.0, 0.0], 3, 1).unwrap();
        assert_eq!(all.iter().map(|h| h.record_id).collect::<Vec<_>>(), vec![1, 3, 2]);
        assert_eq!(idx.search(&[1.0, 0.0], 10, 1).unwrap().len(), 3);
    }

    #[test]
    fn ties_break_by_record_id() {
        let idx = build_flat_index(&[(9, vec![1.0, 0.0]), (4, vec![1.0, 0.0]), (6, vec![0.0, 1.0])]).unwrap();
        let hits = idx.search(&[1.0, 0.0], 2, 1).unwrap();
        assert_eq!(hits.iter().map(|h| h.record_id).collect::<Vec<_>>(), vec![4, 9]);
    }

    #[test]
    fn build_errors() {
        assert_eq!(build_flat_index(&[(1, vec![1.0, 0.0]), (2, vec![1.0])]).unwrap_err(),
            AnnError::DimensionMismatch { position: 1, expected: 2, found: 1 });
        assert_eq!(build_flat_index(&[(1, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]).unwrap_err(), AnnError::DuplicateId(1));
        assert_eq!(build_ivf_index(&three(), 0, 1, 5).unwrap_err(), AnnError::ZeroNlist);
        assert_eq!(build_ivf_index(&three(), 4, 1, 5).unwrap_err(), AnnError::NlistTooLarge { nlist: 4, n: 3 });
    }

    #[test]
    fn search_errors() {
        let idx = build_flat_index(&three()).unwrap();
        assert_eq!(idx.search(&[1.0, 0.0], 0, 1).unwrap_err(), AnnError::ZeroK);
        assert_eq!(idx.search(&[1.0], 1, 1).unwrap_err(), AnnError::QueryDimension { expected: 2, found: 1 });
        assert!(matches!(idx.search(&[0.0, 0.0], 1, 1).unwrap_err(), AnnError::QueryNotUnit(_)));
        let ivf = build_ivf_index(&three(), 2, 1, 5).unwrap();
        assert_eq!(ivf.search(&[1.0, 0.0], 1, 3).unwrap_err(), AnnError::BadNprobe { nprobe: 3, nlist: 2 });
    }

    #[test]
    fn two_clusters_land_in_two_lists() {
        let a = 0.1f32;
        let b = (1.0 - a * a).sqrt();
        let column = vec![(10, vec![b, a]), (11, vec![b, -a]), (20, vec![a, b]), (21, vec![-a, b])];
        let idx = build_ivf_index(&column, 2, 7, 20).unwrap();
        let mut lists = idx.list_members().unwrap();
        lists.sort();
        assert_eq!(lists, vec![vec![10, 11], vec![20, 21]]);
        // Each vector sits in the list of its exactly-nearest centroid.
        let c = idx.centroids().unwrap();
        for (list_idx, members) in idx.list_members().unwrap().iter().enumerate() {
            for id in members {
                let v = &column.iter().find(|(i, _)| i == id).unwrap().1;
                let d: Vec<f32> = c
                    .chunks(2)
                    .map(|cj| cj.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum())
                    .collect();
                let nearest = if d[0] <= d[1] { 0 } else { 1 };
                assert_eq!(nearest, list_idx);
            }
        }
    }

    #[test]
    fn single_list_is_exact() {
        let column = three();
        let flat = build_flat_index(&column).unwrap();
        let ivf = build_ivf_index(&column, 1, 3, 20).unwrap();
        for q in [[1.0, 0.0], [0.0, 1.0], [H, -H]] {
            assert_eq!(ivf.search(&q, 3, 1).unwrap(), flat.search(&q, 3, 1).unwrap());
        }
    }

    #[test]
    fn default_nlist_is_ceil_sqrt() {
        assert_eq!(default_nlist(1), 1);
        assert_eq!(default_nlist(10_000), 100);
        assert_eq!(default_nlist(10_001), 101);
        assert_eq!(default_nlist(300), 18);
    }
}
