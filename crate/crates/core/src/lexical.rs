//! Substring retrieval: a record is retrieved once for every distinct class
//! name occurring in its caption.

use std::path::Path;

use aho_corasick::{AhoCorasick, AhoCorasickBuilder, MatchKind};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::item::{ClassIndex, LabeledItem, Provenance};
use crate::shard::{Corpus, CorpusError, CorpusRecord, ShardError, ShardReader};
use crate::text::normalize_text;

#[derive(Debug, Error, PartialEq)]
pub enum ClassSetError {
    #[error("class set is empty")]
    Empty,
    #[error("class {index} ({name:?}) is empty after normalization")]
    EmptyName { index: usize, name: String },
    #[error("classes {first} and {second} both normalize to {normalized:?}")]
    Duplicate { first: usize, second: usize, normalized: String },
    #[error("cannot read class file: {0}")]
    Io(String),
    #[error("{0} classes exceed the label space")]
    TooMany(usize),
}

/// Ordered class names; a class's position is its label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet {
    names: Vec<String>,
    normalized: Vec<String>,
}

impl ClassSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, ClassSetError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(ClassSetError::Empty);
        }
        if names.len() > ClassIndex::MAX as usize {
            return Err(ClassSetError::TooMany(names.len()));
        }
        let normalized: Vec<String> = names.iter().map(|n| normalize_text(n)).collect();
        let mut seen = std::collections::HashMap::new();
        for (i, norm) in normalized.iter().enumerate() {
            if norm.is_empty() {
                return Err(ClassSetError::EmptyName { index: i, name: names[i].clone() });
            }
            if let Some(first) = seen.insert(norm.as_str(), i) {
                return Err(ClassSetError::Duplicate { first, second: i, normalized: norm.clone() });
            }
        }
        Ok(Self { names, normalized })
    }

    /// One class name per line; lines are taken verbatim apart from the line ending.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ClassSetError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ClassSetError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::new(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, label: ClassIndex) -> Option<&str> {
        self.names.get(label as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn normalized(&self) -> &[String] {
        &self.normalized
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassIndex, &str)> {
        self.names.iter().enumerate().map(|(i, n)| (i as ClassIndex, n.as_str()))
    }

    /// SHA-256 over the normalized names, newline-joined; identifies the label space.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (i, n) in self.normalized.iter().enumerate() {
            if i > 0 {
                h.update(b"\n");
            }
            h.update(n.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryMode {
    /// Plain substring semantics: "rose" matches "prose".
    #[default]
    Substring,
    /// Matches must not be flanked by alphanumeric characters.
    WordBoundary,
}

#[derive(Debug, Error)]
pub enum MatchError {
    #[error(transparent)]
    ClassSet(#[from] ClassSetError),
    #[error("cannot build automaton: {0}")]
    Build(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Compiled automaton over normalized class names.
#[derive(Debug, Clone)]
pub struct PatternMatcher {
    automaton: AhoCorasick,
    mode: BoundaryMode,
    num_classes: usize,
}

/// Identifier of the normalization applied before matching.
pub const NORMALIZATION_POLICY: &str = "nfc-casefold-ws";

impl PatternMatcher {
    pub fn new(class_set: &ClassSet, mode: BoundaryMode) -> Result<Self, MatchError> {
        if let Some(index) = class_set.normalized.iter().position(String::is_empty) {
            return Err(ClassSetError::EmptyName { index, name: class_set.names[index].clone() }.into());
        }
        let automaton = AhoCorasickBuilder::new()
            .match_kind(MatchKind::Standard)
            .build(&class_set.normalized)
            .map_err(|e| MatchError::Build(e.to_string()))?;
        Ok(Self { automaton, mode, num_classes: class_set.len() })
    }

    pub fn mode(&self) -> BoundaryMode {
        self.mode
    }

    pub fn policy(&self) -> &'static str {
        NORMALIZATION_POLICY
    }

    /// Distinct classes whose normalized name occurs in the normalized caption, ascending.
    pub fn match_caption(&self, caption: &str) -> Vec<ClassIndex> {
        self.match_normalized(&normalize_text(caption))
    }

    pub fn match_normalized(&self, text: &str) -> Vec<ClassIndex> {
        let mut hit = vec![false; self.num_classes];
        for m in self.automaton.find_overlapping_iter(text) {
            if self.mode == BoundaryMode::WordBoundary && !at_word_boundary(text, m.start(), m.end()) {
                continue;
            }
            hit[m.pattern().as_usize()] = true;
        }
        hit.iter().enumerate().filter(|(_, h)| **h).map(|(i, _)| i as ClassIndex).collect()
    }
}

fn at_word_boundary(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
}

/// Builds the matcher with the default substring semantics.
pub fn build_matcher(class_set: &ClassSet) -> Result<PatternMatcher, MatchError> {
    PatternMatcher::new(class_set, BoundaryMode::Substring)
}

/// Items for a batch of records: one per (record, matched class), NSFW-flagged records skipped.
pub fn match_records(records: &[CorpusRecord], matcher: &PatternMatcher) -> Vec<LabeledItem> {
    let mut items: Vec<LabeledItem> = records
        .par_iter()
        .filter(|r| !r.nsfw)
        .flat_map_iter(|r| {
            matcher
                .match_caption(&r.caption)
                .into_iter()
                .map(move |label| LabeledItem::new(r.record_id, label, Provenance::Substring))
        })
        .collect();
    items.sort_by_key(LabeledItem::key);
    items
}

/// Substring retrieval over a sharded corpus. Output is ordered by (record_id, label).
pub fn match_corpus(corpus: &Corpus, matcher: &PatternMatcher) -> Result<Vec<LabeledItem>, MatchError> {
    let mut items = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (si, path) in corpus.shards.iter().enumerate() {
        let shard_err = |source: ShardError| CorpusError::Shard { path: path.clone(), source };
        let records = ShardReader::open(path)
            .map_err(shard_err)?
            .strict()
            .collect::<Result<Vec<_>, _>>()
            .map_err(shard_err)?;
        for r in &records {
            if let Some(first) = seen.insert(r.record_id, si) {
                return Err(CorpusError::DuplicateAcrossShards {
                    record_id: r.record_id,
                    first: corpus.shards[first].clone(),
                    second: path.clone(),
                }
                .into());
            }
        }
        items.extend(match_records(&records, matcher));
    }
    items.sort_by_key(LabeledItem::key);
    Ok(items)
}
