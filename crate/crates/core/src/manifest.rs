//! Dataset manifests and their text encoding.
//!
//! ```text
//! #format=tdc-manifest/1
//! #corpus_id=...
//! #class_set_hash=...
//! #strategy=substring
//! #seed=42
//! #param.<key>=<value>          (sorted by key)
//! #stage=<name> <in> <out>      (execution order)
//! #items=<count>
//! #content_hash=<sha256 of the item lines>
//! record_id TAB label TAB score TAB provenance TAB source_query
//! ```
//!
//! Scores use the shortest decimal that round-trips the `f32`; an unscored
//! item has `-`. Text fields escape `\`, TAB, LF and CR with backslashes.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::item::{ClassIndex, LabeledItem};

pub const MANIFEST_FORMAT: &str = "tdc-manifest/1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRecord {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ManifestMeta {
    pub corpus_id: String,
    pub class_set_hash: String,
    pub strategy: String,
    pub seed: u64,
    pub params: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub meta: ManifestMeta,
    pub items: Vec<LabeledItem>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ManifestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate item (record_id {record_id}, label {label})")]
    DuplicateItem { record_id: u64, label: ClassIndex },
    #[error("content hash mismatch: header {header}, computed {computed}")]
    HashMismatch { header: String, computed: String },
    #[error("header declares {declared} items, found {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("score {score} of record {record_id} is outside [-1, 1]")]
    ScoreRange { record_id: u64, score: f32 },
    #[error("i/o error: {0}")]
    Io(String),
}

impl DatasetManifest {
    pub fn new(meta: ManifestMeta, items: Vec<LabeledItem>) -> Self {
        Self { meta, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Same meta, new items, with `stage` appended to the history.
    pub fn derive(&self, stage: &str, items: Vec<LabeledItem>) -> Self {
        let mut meta = self.meta.clone();
        meta.stages.push(StageRecord { name: stage.to_string(), input: self.items.len(), output: items.len() });
        Self { meta, items }
    }

    pub fn push_stage(&mut self, stage: &str, input: usize) {
        self.meta.stages.push(StageRecord { name: stage.to_string(), input, output: self.items.len() });
    }

    pub fn set_param(&mut self, key: &str, value: impl ToString) {
        self.meta.params.insert(key.to_string(), value.to_string());
    }

    /// Checks pair uniqueness and score range.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = HashSet::with_capacity(self.items.len());
        for it in &self.items {
            if !seen.insert(it.key()) {
                return Err(ManifestError::DuplicateItem { record_id: it.record_id, label: it.label });
            }
            if let Some(s) = it.score {
                if !(-1.0 - 1e-5..=1.0 + 1e-5).contains(&s) {
                    return Err(ManifestError::ScoreRange { record_id: it.record_id, score: s });
                }
            }
        }
        Ok(())
    }

    pub fn label_counts(&self) -> BTreeMap<ClassIndex, usize> {
        let mut counts = BTreeMap::new();
        for it in &self.items {
            *counts.entry(it.label).or_insert(0) += 1;
        }
        counts
    }

    fn item_lines(&self) -> String {
        let mut out = String::new();
        for it in &self.items {
            let score = it.score.map_or_else(|| "-".to_string(), |s| s.to_string());
            let query = it.source_query.as_deref().map(escape).unwrap_or_default();
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", it.record_id, it.label, score, it.provenance_field(), query);
        }
        out
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.item_lines().as_bytes()))
    }

    pub fn to_tsv(&self) -> String {
        let body = self.item_lines();
        let hash = hex::encode(Sha256::digest(body.as_bytes()));
        let m = &self.meta;
        let mut out = String::new();
        let _ = writeln!(out, "#format={MANIFEST_FORMAT}");
        let _ = writeln!(out, "#corpus_id={}", escape(&m.corpus_id));
        let _ = writeln!(out, "#class_set_hash={}", escape(&m.class_set_hash));
        let _ = writeln!(out, "#strategy={}", escape(&m.strategy));
        let _ = writeln!(out, "#seed={}", m.seed);
        for (k, v) in &m.params {
            let _ = writeln!(out, "#param.{}={}", escape(k), escape(v));
        }
        for s in &m.stages {
            let _ = writeln!(out, "#stage={} {} {}", escape(&s.name), s.input, s.output);
        }
        let _ = writeln!(out, "#items={}", self.items.len());
        let _ = writeln!(out, "#content_hash={hash}");
        out.push_str(&body);
        out
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut meta = ManifestMeta::default();
        let mut items = Vec::new();
        let mut declared_items = None;
        let mut declared_hash = None;
        let mut saw_format = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ManifestError::Parse { line, message };
            if let Some(header) = raw.strip_prefix('#') {
                let (key, value) = header.split_once('=').ok_or_else(|| err("header line without '='".into()))?;
                let value = unescape(value).map_err(err)?;
                match key {
                    "format" if value == MANIFEST_FORMAT => saw_format = true,
                    "format" => return Err(err(format!("unsupported format {value:?}"))),
                    "corpus_id" => meta.corpus_id = value,
                    "class_set_hash" => meta.class_set_hash = value,
                    "strategy" => meta.strategy = value,
                    "seed" => meta.seed = value.parse().map_err(|_| err(format!("bad seed {value:?}")))?,
                    "stage" => {
                        let parts: Vec<&str> = value.split(' ').collect();
                        let [name, input, output] = parts[..] else {
                            return Err(err(format!("bad stage {value:?}")));
                        };
                        let num = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad stage count {s:?}")));
                        meta.stages.push(StageRecord { name: name.to_string(), input: num(input)?, output: num(output)? });
                    }
                    "items" => declared_items = Some(value.parse::<usize>().map_err(|_| err("bad item count".into()))?),
                    "content_hash" => declared_hash = Some(value),
                    k if k.starts_with("param.") => {
                        meta.params.insert(unescape(&k["param.".len()..]).map_err(err)?, value);
                    }
                    other => return Err(err(format!("unknown header key {other:?}"))),
                }
                continue;
            }
            if raw.is_empty() {
                continue;
            }
            items.push(parse_item(raw).map_err(err)?);
        }
        if !saw_format {
            return Err(ManifestError::Parse { line: 1, message: "missing #format header".into() });
        }
        let manifest = Self { meta, items };
        if let Some(declared) = declared_items {
            if declared != manifest.items.len() {
                return Err(ManifestError::CountMismatch { declared, found: manifest.items.len() });
            }
        }
        if let Some(header) = declared_hash {
            let computed = manifest.content_hash();
            if header != computed {
                return Err(ManifestError::HashMismatch { header, computed });
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ManifestError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| ManifestError::Io(format!("{}: {e}", path.display())))
    }
}

fn parse_item(raw: &str) -> Result<LabeledItem, String> {
    let fields: Vec<&str> = raw.split('\t').collect();
    let [id, label, score, provenance, query] = fields[..] else {
        return Err(format!("expected 5 tab-separated fields, found {}", fields.len()));
    };
    let record_id = id.parse::<u64>().map_err(|_| format!("bad record_id {id:?}"))?;
    let label = label.parse::<ClassIndex>().map_err(|_| format!("bad label {label:?}"))?;
    let score = match score {
        "-" => None,
        s => {
            let v = s.parse::<f32>().map_err(|_| format!("bad score {s:?}"))?;
            if !v.is_finite() {
                return Err(format!("non-finite score {s:?}"));
            }
            Some(v)
        }
    };
    let (provenance, channels) = LabeledItem::parse_provenance_field(provenance)?;
    let source_query = if query.is_empty() { None } else { Some(unescape(query)?) };
    Ok(LabeledItem { record_id, label, score, provenance, channels, source_query })
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape sequence \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}
