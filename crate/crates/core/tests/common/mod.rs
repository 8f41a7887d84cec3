//! Test-only generators and brute-force oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Column = Vec<(u64, Vec<f32>)>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `n` isotropic unit vectors with ids `id_base..`.
pub fn random_column(seed: u64, n: usize, dim: usize, id_base: u64) -> Vec<(u64, Vec<f32>)> {
    let mut r = rng(seed);
    (0..n as u64).map(|i| (id_base + i, unit_vector(&mut r, dim))).collect()
}

/// Unit vectors scattered around `centers` random directions.
pub fn clustered_column(seed: u64, n: usize, dim: usize, centers: usize, spread: f32) -> Vec<(u64, Vec<f32>)> {
    let mut r = rng(seed);
    let cs: Vec<Vec<f32>> = (0..centers).map(|_| unit_vector(&mut r, dim)).collect();
    (0..n as u64)
        .map(|i| {
            let c = &cs[r.random_range(0..centers)];
            let noise = unit_vector(&mut r, dim);
            let mut v: Vec<f32> = c.iter().zip(&noise).map(|(a, b)| a + spread * b).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            (i, v)
        })
        .collect()
}

/// Left-to-right f32 inner product.
pub fn naive_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Full scan + argsort: (record_id, score) for the top k, score desc then id asc.
pub fn full_scan_topk(column: &[(u64, Vec<f32>)], query: &[f32], k: usize) -> Vec<(u64, f32)> {
    let mut all: Vec<(u64, f32)> = column.iter().map(|(id, v)| (*id, naive_dot(query, v))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Scores on a 0.05 grid so ties are common; record ids may repeat across labels.
pub fn random_manifest(seed: u64, n: usize, classes: u32) -> tdc_core::manifest::DatasetManifest {
    use tdc_core::item::{LabeledItem, Provenance};
    use tdc_core::manifest::{DatasetManifest, ManifestMeta};
    let mut r = rng(seed);
    let mut keys = std::collections::BTreeSet::new();
    while keys.len() < n {
        keys.insert((r.random_range(0..(n as u64 * 2 + 1)), r.random_range(0..classes.max(1))));
    }
    let items = keys
        .into_iter()
        .map(|(id, label)| {
            let score = r.random_range(-20i32..=20) as f32 / 20.0;
            LabeledItem::new(id, label, Provenance::Substring).with_score(score)
        })
        .collect();
    DatasetManifest::new(ManifestMeta { class_set_hash: "h".into(), seed, ..Default::default() }, items)
}

/// Keys ordered by score descending, then (record_id, label) ascending.
fn ranked(items: &[tdc_core::item::LabeledItem]) -> Vec<(u64, u32)> {
    let mut v: Vec<(f32, u64, u32)> = items.iter().map(|i| (i.score.unwrap_or(f32::NEG_INFINITY), i.record_id, i.label)).collect();
    v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    v.into_iter().map(|(_, id, l)| (id, l)).collect()
}

/// Integer ceiling of p·n for p given in hundredths.
pub fn ceil_hundredths(n: usize, hundredths: usize) -> usize {
    (n * hundredths).div_ceil(100)
}

/// Sorted keys of the top `keep` items.
pub fn filter_oracle(items: &[tdc_core::item::LabeledItem], keep: usize) -> Vec<(u64, u32)> {
    let mut top: Vec<(u64, u32)> = ranked(items).into_iter().take(keep).collect();
    top.sort();
    top
}

/// Sorted keys surviving a per-label cap of `cap` highest-ranked items.
pub fn balance_oracle(items: &[tdc_core::item::LabeledItem], cap: usize) -> Vec<(u64, u32)> {
    let mut by_label: std::collections::BTreeMap<u32, Vec<tdc_core::item::LabeledItem>> = Default::default();
    for it in items {
        by_label.entry(it.label).or_default().push(it.clone());
    }
    let mut kept: Vec<(u64, u32)> = by_label.values().flat_map(|g| ranked(g).into_iter().take(cap)).collect();
    kept.sort();
    kept
}

/// Record ids whose image meets `threshold` against any eval vector, by all-pairs comparison.
pub fn dedup_oracle(images: &[(u64, Vec<f32>)], eval: &[Vec<f32>], threshold: f32) -> std::collections::BTreeSet<u64> {
    images
        .iter()
        .filter(|(_, v)| eval.iter().any(|e| naive_dot(v, e) >= threshold))
        .map(|(id, _)| *id)
        .collect()
}

/// `n` image vectors against `m` eval vectors: a share of exact copies, a share of
/// perturbed copies straddling the threshold, and the rest random.
pub fn dedup_instance(seed: u64, n: usize, m: usize, dim: usize) -> (Column, Vec<Vec<f32>>) {
    let mut r = rng(seed);
    let eval: Vec<Vec<f32>> = (0..m).map(|_| unit_vector(&mut r, dim)).collect();
    let images = (0..n as u64)
        .map(|id| {
            let v = match r.random_range(0..10) {
                0 => eval[r.random_range(0..m)].clone(),
                1 | 2 => {
                    let base = &eval[r.random_range(0..m)];
                    let noise = unit_vector(&mut r, dim);
                    let eps = r.random_range(0.0f32..0.6);
                    let mut v: Vec<f32> = base.iter().zip(&noise).map(|(a, b)| a + eps * b).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                    v.iter_mut().for_each(|x| *x /= norm);
                    v
                }
                _ => unit_vector(&mut r, dim),
            };
            (id, v)
        })
        .collect();
    (images, eval)
}

pub const SYLLABLES: [&str; 12] = ["ro", "se", "ta", "LI", "p", "da", "i", "sy", "Ö", "ß", "ss", "an"];

pub fn word(r: &mut impl Rng) -> String {
    (0..r.random_range(1..4)).map(|_| SYLLABLES[r.random_range(0..SYLLABLES.len())]).collect()
}

pub fn caption(r: &mut impl Rng) -> String {
    let seps = [" ", "  ", "\t", "\n", " - "];
    let mut out = String::new();
    for _ in 0..r.random_range(0..8) {
        out.push_str(&word(r));
        out.push_str(seps[r.random_range(0..seps.len())]);
    }
    out
}

pub fn class_names(r: &mut impl Rng, n: usize) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut names = Vec::new();
    while names.len() < n {
        let name = if r.random_bool(0.2) { format!("{} {}", word(r), word(r)) } else { word(r) };
        if seen.insert(tdc_core::text::normalize_text(&name)) {
            names.push(name);
        }
    }
    names
}

/// Every (record, class) whose normalized name is a substring of the normalized caption.
pub fn naive_scan(records: &[tdc_core::shard::CorpusRecord], classes: &[String]) -> Vec<(u64, u32)> {
    let norm: Vec<String> = classes.iter().map(|c| tdc_core::text::normalize_text(c)).collect();
    let mut out = Vec::new();
    for rec in records.iter().filter(|r| !r.nsfw) {
        let cap = tdc_core::text::normalize_text(&rec.caption);
        for (i, c) in norm.iter().enumerate() {
            if cap.contains(c.as_str()) {
                out.push((rec.record_id, i as u32));
            }
        }
    }
    out.sort();
    out
}

pub fn build_corpus(dir: &std::path::Path, seed: u64, n: usize, shards: usize) -> (tdc_core::shard::Corpus, Vec<tdc_core::shard::CorpusRecord>) {
    let mut r = rng(seed);
    let records: Vec<tdc_core::shard::CorpusRecord> = (0..n as u64)
        .map(|i| tdc_core::shard::CorpusRecord::new(i * 2 + 5, caption(&mut r), vec![1.0]).with_nsfw(r.random_bool(0.05)))
        .collect();
    let per = n.div_ceil(shards.max(1)).max(1);
    let mut paths = Vec::new();
    for (j, chunk) in records.chunks(per).enumerate() {
        let p = dir.join(format!("part-{j}.tdcs"));
        tdc_core::shard::write_shard(chunk, &p).unwrap();
        paths.push(p);
    }
    if paths.is_empty() {
        let p = dir.join("empty.tdcs");
        tdc_core::shard::write_shard(&[], &p).unwrap();
        paths.push(p);
    }
    (tdc_core::shard::Corpus::new(paths), records)
}
