//! Semantic k-NN retrieval: each class name is expanded into template
//! queries, every query retrieves its top-k neighbours from the image column
//! and (when available) the text column, and the results are unioned.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::ann::{AnnError, AnnIndex};
use crate::embed::{EmbeddingProvider, ProviderError};
use crate::item::{ClassIndex, LabeledItem, Provenance};
use crate::lexical::ClassSet;

pub const PLACEHOLDER: &str = "{}";

/// Default per-query k.
pub const DEFAULT_K: usize = 2000;
/// Per-query k used for the ImageNet-1K profile.
pub const IMAGENET_K: usize = 500;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {index} ({template:?}) must contain exactly one \"{{}}\" placeholder")]
    Placeholder { index: usize, template: String },
    #[error("template set is empty")]
    Empty,
    #[error("cannot read template file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub benchmark: String,
    templates: Vec<String>,
}

impl TemplateSet {
    pub fn new<S: Into<String>>(
        benchmark: impl Into<String>,
        templates: impl IntoIterator<Item = S>,
    ) -> Result<Self, TemplateError> {
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        if templates.is_empty() {
            return Err(TemplateError::Empty);
        }
        for (index, t) in templates.iter().enumerate() {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(TemplateError::Placeholder { index, template: t.clone() });
            }
        }
        Ok(Self { benchmark: benchmark.into(), templates })
    }

    /// One template per non-blank line. The benchmark name is the file stem.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(name, text.lines().filter(|l| !l.trim().is_empty()))
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn instantiate(&self, class_name: &str) -> Vec<String> {
        self.templates.iter().map(|t| t.replacen(PLACEHOLDER, class_name, 1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySet {
    pub class_index: ClassIndex,
    pub queries: Vec<String>,
}

pub fn expand_queries(class_name: &str, class_index: ClassIndex, templates: &TemplateSet) -> QuerySet {
    QuerySet { class_index, queries: templates.instantiate(class_name) }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no embedding supplied for query {0:?}")]
    MissingEmbedding(String),
    #[error("index dimension {index} differs from query dimension {query}")]
    Dimension { index: usize, query: usize },
    #[error("search for query {query:?} failed: {source}")]
    Search {
        query: String,
        #[source]
        source: AnnError,
    },
    #[error("embedding provider failed: {0}")]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Best (score, provenance, query) seen so far for one record.
struct Best {
    item: LabeledItem,
}

impl Best {
    fn offer(&mut self, score: f32, provenance: Provenance, query: &str) {
        self.item.channels.insert(provenance);
        if score > self.item.score.unwrap_or(f32::NEG_INFINITY) {
            self.item.score = Some(score);
            self.item.provenance = provenance;
            self.item.source_query = Some(query.to_string());
        }
    }
}

/// Items retrieved for one class: the union over its queries of the image
/// and text channel top-k, one item per record with the best score kept.
///
/// On equal scores the image channel wins over the text channel and an
/// earlier query wins over a later one.
pub fn retrieve_class(
    query_set: &QuerySet,
    query_embeddings: &HashMap<String, Vec<f32>>,
    image_index: &AnnIndex,
    text_index: Option<&AnnIndex>,
    k: usize,
    nprobe: usize,
) -> Result<Vec<LabeledItem>, RetrievalError> {
    let mut by_record: BTreeMap<u64, Best> = BTreeMap::new();
    for query in &query_set.queries {
        let q = query_embeddings.get(query).ok_or_else(|| RetrievalError::MissingEmbedding(query.clone()))?;
        let channels = [(Some(image_index), Provenance::KnnImage), (text_index, Provenance::KnnText)];
        for (index, provenance) in channels {
            let Some(index) = index else { continue };
            if index.dim() != q.len() {
                return Err(RetrievalError::Dimension { index: index.dim(), query: q.len() });
            }
            let hits = index
                .search(q, k, nprobe)
                .map_err(|source| RetrievalError::Search { query: query.clone(), source })?;
            for hit in hits {
                by_record
                    .entry(hit.record_id)
                    .or_insert_with(|| Best {
                        item: LabeledItem {
                            record_id: hit.record_id,
                            label: query_set.class_index,
                            score: None,
                            provenance,
                            channels: Default::default(),
                            source_query: None,
                        },
                    })
                    .offer(hit.score, provenance, query);
            }
        }
    }
    Ok(by_record.into_values().map(|b| b.item).collect())
}

/// k-NN retrieval over all classes, ordered by (label, record_id).
pub fn assemble_semantic_dataset(
    class_set: &ClassSet,
    templates: &TemplateSet,
    provider: &dyn EmbeddingProvider,
    image_index: &AnnIndex,
    text_index: Option<&AnnIndex>,
    k: usize,
    nprobe: usize,
) -> Result<Vec<LabeledItem>, RetrievalError> {
    let query_sets: Vec<QuerySet> = class_set.iter().map(|(i, name)| expand_queries(name, i, templates)).collect();
    let per_class: Vec<Vec<LabeledItem>> = query_sets
        .par_iter()
        .map(|qs| {
            let vectors = provider.embed_texts(&qs.queries)?;
            let embeddings: HashMap<String, Vec<f32>> = qs.queries.iter().cloned().zip(vectors).collect();
            retrieve_class(qs, &embeddings, image_index, text_index, k, nprobe)
        })
        .collect::<Result<_, _>>()?;
    Ok(per_class.into_iter().flatten().collect())
}
