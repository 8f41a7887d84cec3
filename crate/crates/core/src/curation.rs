//! Post-retrieval shaping of manifests: similarity scoring, top-fraction
//! filtering, class balancing, eval-set dedup, subsampling and mixing.
//!
//! Every operation is a pure function of its inputs (and seed). Kept items
//! stay in their original manifest order.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::embed::{embed_all, EmbeddingProvider, ProviderError};
use crate::item::{rank_order, ClassIndex, LabeledItem};
use crate::lexical::ClassSet;
use crate::manifest::DatasetManifest;
use crate::semantic::TemplateSet;
use crate::shard::{Corpus, CorpusError, EvalSet, ShardReader};
use crate::vector::dot;

pub const DEFAULT_KEEP_FRACTION: f64 = 0.30;
pub const DEFAULT_CLASS_CAP: usize = 10_000;
pub const DEFAULT_DEDUP_THRESHOLD: f32 = 0.95;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("record {0} is not in the corpus")]
    MissingRecord(u64),
    #[error("label {0} is outside the class set")]
    UnknownLabel(ClassIndex),
    #[error("{0} items are unscored")]
    Unscored(usize),
    #[error("keep fraction {0} is outside (0, 1]")]
    KeepFraction(f64),
    #[error("class cap M must be positive")]
    ZeroCap,
    #[error("dedup threshold {0} is outside (0, 1]")]
    Threshold(f32),
    #[error("eval set is empty")]
    EmptyEvalSet,
    #[error("embedding dimension {found} differs from {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("requested {requested} items but only {available} are available")]
    TooMany { requested: usize, available: usize },
    #[error("class sets differ: {left} vs {right}")]
    ClassSetMismatch { left: String, right: String },
    #[error("record {record_id} with label {label} is present in both manifests")]
    Collision { record_id: u64, label: ClassIndex },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Image embeddings by record id.
pub type EmbeddingLookup = HashMap<u64, Vec<f32>>;

/// Loads the image embeddings of `ids` from the corpus.
pub fn load_image_embeddings(corpus: &Corpus, ids: &HashSet<u64>) -> Result<EmbeddingLookup, CurationError> {
    let mut out = HashMap::with_capacity(ids.len());
    for path in &corpus.shards {
        let reader = ShardReader::open(path).map_err(|source| CorpusError::Shard { path: path.clone(), source })?;
        for rec in reader.strict() {
            let rec = rec.map_err(|source| CorpusError::Shard { path: path.clone(), source })?;
            if ids.contains(&rec.record_id) {
                out.insert(rec.record_id, rec.image_embedding);
            }
        }
    }
    Ok(out)
}

pub fn item_ids(manifest: &DatasetManifest) -> HashSet<u64> {
    manifest.items.iter().map(|i| i.record_id).collect()
}

/// Sets each item's score to the maximum, over templates, of the cosine
/// between its image embedding and the template instantiated with its class.
pub fn score_manifest(
    manifest: &DatasetManifest,
    images: &EmbeddingLookup,
    class_set: &ClassSet,
    templates: &TemplateSet,
    provider: &dyn EmbeddingProvider,
) -> Result<DatasetManifest, CurationError> {
    let labels: BTreeMap<ClassIndex, Vec<String>> = manifest
        .items
        .iter()
        .map(|it| {
            let name = class_set.name(it.label).ok_or(CurationError::UnknownLabel(it.label))?;
            Ok((it.label, templates.instantiate(name)))
        })
        .collect::<Result<_, CurationError>>()?;
    let texts: Vec<String> = labels.values().flatten().cloned().collect();
    let embedded = embed_all(provider, &texts)?;
    let text_vectors: BTreeMap<ClassIndex, Vec<&Vec<f32>>> =
        labels.iter().map(|(l, ts)| (*l, ts.iter().map(|t| &embedded[t]).collect())).collect();

    let items = manifest
        .items
        .par_iter()
        .map(|it| {
            let img = images.get(&it.record_id).ok_or(CurationError::MissingRecord(it.record_id))?;
            let tv = &text_vectors[&it.label];
            if let Some(t) = tv.first() {
                if t.len() != img.len() {
                    return Err(CurationError::Dimension { expected: img.len(), found: t.len() });
                }
            }
            let score = tv.iter().map(|t| dot(img, t)).fold(f32::NEG_INFINITY, f32::max);
            let mut out = it.clone();
            out.score = Some(score);
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = manifest.derive("score", items);
    out.set_param("score.templates", &templates.benchmark);
    out.set_param("score.template_count", templates.len());
    Ok(out)
}

/// ⌈p·n⌉, snapping products that are integral up to rounding error.
pub fn keep_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterScope {
    /// One cut over the whole manifest.
    #[default]
    Global,
    /// A separate cut within each label.
    PerClass,
}

fn keep_best(items: &[LabeledItem], mut positions: Vec<usize>, keep: usize) -> Vec<usize> {
    positions.sort_by(|&a, &b| rank_order(&items[a], &items[b]));
    positions.truncate(keep);
    positions
}

fn select_in_order(items: &[LabeledItem], kept: impl IntoIterator<Item = usize>) -> Vec<LabeledItem> {
    let mut kept: Vec<usize> = kept.into_iter().collect();
    kept.sort_unstable();
    kept.into_iter().map(|i| items[i].clone()).collect()
}

fn group_positions(items: &[LabeledItem]) -> BTreeMap<ClassIndex, Vec<usize>> {
    let mut groups: BTreeMap<ClassIndex, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry(it.label).or_default().push(i);
    }
    groups
}

/// Keeps the ⌈p·N⌉ highest-scoring items; ties at the cut go to the lower
/// (record_id, label).
pub fn filter_top_fraction(manifest: &DatasetManifest, p: f64, scope: FilterScope) -> Result<DatasetManifest, CurationError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(CurationError::KeepFraction(p));
    }
    let unscored = manifest.items.iter().filter(|i| i.score.is_none()).count();
    if unscored > 0 {
        return Err(CurationError::Unscored(unscored));
    }
    let items = &manifest.items;
    let kept: Vec<usize> = match scope {
        FilterScope::Global => {
            keep_best(items, (0..items.len()).collect(), keep_count(p, items.len()))
        }
        FilterScope::PerClass => group_positions(items)
            .into_values()
            .flat_map(|g| {
                let keep = keep_count(p, g.len());
                keep_best(items, g, keep)
            })
            .collect(),
    };
    let mut out = manifest.derive("filter", select_in_order(items, kept));
    out.set_param("filter.keep_fraction", p);
    out.set_param(
        "filter.scope",
        match scope {
            FilterScope::Global => "global",
            FilterScope::PerClass => "per-class",
        },
    );
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BalanceMode {
    /// Keep the M highest-scoring items of an over-full label (unscored rank last).
    #[default]
    TopScore,
    /// Keep a seeded uniform sample of M items.
    Random { seed: u64 },
}

/// Truncates every label to at most `cap` items.
pub fn class_balance(manifest: &DatasetManifest, cap: usize, mode: BalanceMode) -> Result<DatasetManifest, CurationError> {
    if cap == 0 {
        return Err(CurationError::ZeroCap);
    }
    let items = &manifest.items;
    let mut kept = Vec::with_capacity(items.len());
    for (label, group) in group_positions(items) {
        if group.len() <= cap {
            kept.extend(group);
            continue;
        }
        match mode {
            BalanceMode::TopScore => kept.extend(keep_best(items, group, cap)),
            BalanceMode::Random { seed } => {
                let mut group = group;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (label as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                group.shuffle(&mut rng);
                kept.extend(group.into_iter().take(cap));
            }
        }
    }
    let mut out = manifest.derive("balance", select_in_order(items, kept));
    out.set_param("balance.cap", cap);
    out.set_param(
        "balance.mode",
        match mode {
            BalanceMode::TopScore => "top-score".to_string(),
            BalanceMode::Random { seed } => format!("random:{seed}"),
        },
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Removal {
    pub record_id: u64,
    pub label: ClassIndex,
    /// First eval vector reaching the maximum similarity.
    pub eval_index: usize,
    pub similarity: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DedupReport {
    pub eval_set: String,
    pub threshold: f32,
    pub removals: Vec<Removal>,
}

impl DedupReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("#eval_set={}\n#threshold={}\nrecord_id\tlabel\teval_index\tsimilarity\n", self.eval_set, self.threshold);
        for r in &self.removals {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.record_id, r.label, r.eval_index, r.similarity));
        }
        out
    }
}

/// Removes every item whose image embedding reaches cosine ≥ `threshold`
/// with some eval embedding.
pub fn dedup_against_eval(
    manifest: &DatasetManifest,
    images: &EmbeddingLookup,
    eval: &EvalSet,
    threshold: f32,
) -> Result<(DatasetManifest, DedupReport), CurationError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CurationError::Threshold(threshold));
    }
    if eval.embeddings.is_empty() {
        return Err(CurationError::EmptyEvalSet);
    }
    let mut ids: Vec<u64> = item_ids(manifest).into_iter().collect();
    ids.sort_unstable();
    let nearest: HashMap<u64, (usize, f32)> = ids
        .par_iter()
        .map(|id| {
            let img = images.get(id).ok_or(CurationError::MissingRecord(*id))?;
            if img.len() != eval.dim() {
                return Err(CurationError::Dimension { expected: eval.dim(), found: img.len() });
            }
            let mut best = (0usize, f32::NEG_INFINITY);
            for (j, e) in eval.embeddings.iter().enumerate() {
                let s = dot(img, e);
                if s > best.1 {
                    best = (j, s);
                }
            }
            Ok((*id, best))
        })
        .collect::<Result<_, CurationError>>()?;

    let mut kept = Vec::with_capacity(manifest.items.len());
    let mut removals = Vec::new();
    for it in &manifest.items {
        let (eval_index, similarity) = nearest[&it.record_id];
        if similarity >= threshold {
            removals.push(Removal { record_id: it.record_id, label: it.label, eval_index, similarity });
        } else {
            kept.push(it.clone());
        }
    }
    let mut out = manifest.derive("dedup", kept);
    out.set_param("dedup.threshold", threshold);
    out.set_param("dedup.eval_set", &eval.name);
    Ok((out, DedupReport { eval_set: eval.name.clone(), threshold, removals }))
}

/// Positions of a seeded uniform sample of `n` out of `len`, ascending.
fn sample_positions(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, len, n).into_vec();
    picked.sort_unstable();
    picked
}

/// Uniform sample without replacement of `n` items, in manifest order.
pub fn subsample(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<DatasetManifest, CurationError> {
    if n > manifest.len() {
        return Err(CurationError::TooMany { requested: n, available: manifest.len() });
    }
    let items = sample_positions(manifest.len(), n, seed).into_iter().map(|i| manifest.items[i].clone()).collect();
    let mut out = manifest.derive("subsample", items);
    out.set_param("subsample.n", n);
    out.set_param("subsample.seed", seed);
    Ok(out)
}

/// All retrieved items followed by a seeded sample of `n_synth` synthetic items.
pub fn mix(
    retrieved: &DatasetManifest,
    synthetic: &DatasetManifest,
    n_synth: usize,
    seed: u64,
) -> Result<DatasetManifest, CurationError> {
    if retrieved.meta.class_set_hash != synthetic.meta.class_set_hash {
        return Err(CurationError::ClassSetMismatch {
            left: retrieved.meta.class_set_hash.clone(),
            right: synthetic.meta.class_set_hash.clone(),
        });
    }
    if n_synth > synthetic.len() {
        return Err(CurationError::TooMany { requested: n_synth, available: synthetic.len() });
    }
    let keys: HashSet<_> = retrieved.items.iter().map(LabeledItem::key).collect();
    let mut items = retrieved.items.clone();
    for i in sample_positions(synthetic.len(), n_synth, seed) {
        let it = &synthetic.items[i];
        if keys.contains(&it.key()) {
            return Err(CurationError::Collision { record_id: it.record_id, label: it.label });
        }
        items.push(it.clone());
    }
    let mut out = retrieved.derive("mix", items);
    out.set_param("mix.n_synth", n_synth);
    out.set_param("mix.seed", seed);
    out.set_param("mix.synthetic_hash", synthetic.content_hash());
    Ok(out)
}
