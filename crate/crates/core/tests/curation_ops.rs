mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use common::*;
use proptest::prelude::*;
use rand::Rng;
use tdc_core::curation::{
    class_balance, dedup_against_eval, filter_top_fraction, keep_count, mix, score_manifest, subsample, BalanceMode,
    FilterScope, DEFAULT_CLASS_CAP, DEFAULT_KEEP_FRACTION,
};
use tdc_core::embed::FileEmbeddingProvider;
use tdc_core::item::{LabeledItem, Provenance};
use tdc_core::lexical::ClassSet;
use tdc_core::manifest::{DatasetManifest, ManifestMeta};
use tdc_core::semantic::TemplateSet;
use tdc_core::shard::EvalSet;

fn keys(m: &DatasetManifest) -> Vec<(u64, u32)> {
    let mut k: Vec<(u64, u32)> = m.items.iter().map(LabeledItem::key).collect();
    k.sort();
    k
}

#[test]
fn shipped_defaults() {
    assert_eq!(DEFAULT_KEEP_FRACTION, 0.3);
    assert_eq!(DEFAULT_CLASS_CAP, 10_000);
}

#[test]
fn scores_equal_naive_template_loop() {
    let dim = 16;
    let classes = ClassSet::new(["rose", "tulip", "daisy", "iris"]).unwrap();
    let templates = TemplateSet::new("t", ["a photo of a {}.", "a {} in the wild.", "art of a {}."]).unwrap();
    let mut r = rng(21);
    let mut text: HashMap<String, Vec<f32>> = HashMap::new();
    for (_, name) in classes.iter() {
        for t in templates.instantiate(name) {
            text.insert(t, unit_vector(&mut r, dim));
        }
    }
    let images: HashMap<u64, Vec<f32>> = (0..100u64).map(|id| (id, unit_vector(&mut r, dim))).collect();
    let items: Vec<LabeledItem> =
        (0..100u64).map(|id| LabeledItem::new(id, r.random_range(0..4), Provenance::Substring)).collect();
    let manifest = DatasetManifest::new(ManifestMeta::default(), items);
    let provider = FileEmbeddingProvider::from_map(text.clone()).unwrap();
    let scored = score_manifest(&manifest, &images, &classes, &templates, &provider).unwrap();
    for it in &scored.items {
        let name = classes.name(it.label).unwrap();
        let mut best = f32::NEG_INFINITY;
        for t in templates.instantiate(name) {
            let s = naive_dot(&images[&it.record_id], &text[&t]);
            if s > best {
                best = s;
            }
        }
        assert_eq!(it.score, Some(best));
    }
}

#[test]
fn filter_hand_case() {
    let items = (1..=10u64).map(|i| LabeledItem::new(i, 0, Provenance::Substring).with_score(i as f32 / 10.0)).collect();
    let m = DatasetManifest::new(ManifestMeta::default(), items);
    let out = filter_top_fraction(&m, 0.3, FilterScope::Global).unwrap();
    assert_eq!(out.items.iter().map(|i| i.record_id).collect::<Vec<_>>(), vec![8, 9, 10]);
    assert_eq!(filter_top_fraction(&m, 1.0, FilterScope::Global).unwrap().items, m.items);
}

#[test]
fn dedup_1k_by_100_equals_all_pairs() {
    let (images, eval) = dedup_instance(99, 1000, 100, 32);
    let items = images.iter().map(|(id, _)| LabeledItem::new(*id, (*id % 5) as u32, Provenance::Substring)).collect();
    let m = DatasetManifest::new(ManifestMeta::default(), items);
    let lookup: HashMap<u64, Vec<f32>> = images.iter().cloned().collect();
    let set = EvalSet::new("eval", eval.clone()).unwrap();
    let (out, report) = dedup_against_eval(&m, &lookup, &set, 0.95).unwrap();
    let removed: BTreeSet<u64> = report.removals.iter().map(|r| r.record_id).collect();
    assert_eq!(removed, dedup_oracle(&images, &eval, 0.95));
    assert!(removed.len() > 100);
    assert_eq!(out.len() + removed.len(), m.len());
    assert!(out.items.iter().all(|i| !removed.contains(&i.record_id)));
}

#[test]
fn dedup_threshold_one_on_distinct_vectors_is_identity() {
    let column = random_column(4, 300, 16, 0);
    let eval: Vec<Vec<f32>> = random_column(5, 50, 16, 0).into_iter().map(|(_, v)| v).collect();
    let items = column.iter().map(|(id, _)| LabeledItem::new(*id, 0, Provenance::Substring)).collect();
    let m = DatasetManifest::new(ManifestMeta::default(), items);
    let lookup: HashMap<u64, Vec<f32>> = column.into_iter().collect();
    let (out, report) = dedup_against_eval(&m, &lookup, &EvalSet::new("e", eval).unwrap(), 1.0).unwrap();
    assert!(report.removals.is_empty());
    assert_eq!(out.items, m.items);
}

#[test]
fn subsample_over_100_seeds() {
    let m = random_manifest(3, 500, 7);
    let mut samples = HashSet::new();
    for seed in 0..100 {
        let a = subsample(&m, 10, seed).unwrap();
        let b = subsample(&m, 10, seed).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
        assert_eq!(a.len(), 10);
        let positions: Vec<usize> =
            a.items.iter().map(|it| m.items.iter().position(|x| x.key() == it.key()).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        samples.insert(keys(&a));
    }
    assert_eq!(samples.len(), 100);
    assert_eq!(subsample(&m, m.len(), 9).unwrap().items, m.items);
    let empty = subsample(&m, 0, 9).unwrap();
    assert!(empty.is_empty());
    assert_eq!(empty.meta.class_set_hash, m.meta.class_set_hash);
    assert!(subsample(&m, m.len() + 1, 0).is_err());
}

#[test]
fn mix_counts_by_provenance() {
    let retrieved = random_manifest(8, 100, 4);
    let synth_items = (0..60u64).map(|i| LabeledItem::new((1 << 48) + i, (i % 4) as u32, Provenance::Synthetic)).collect();
    let synthetic = DatasetManifest::new(ManifestMeta { class_set_hash: "h".into(), ..Default::default() }, synth_items);
    let out = mix(&retrieved, &synthetic, 50, 1).unwrap();
    assert_eq!(out.len(), 150);
    assert_eq!(out.items.iter().filter(|i| i.provenance.is_retrieved()).count(), 100);
    assert_eq!(mix(&retrieved, &synthetic, 0, 1).unwrap().items, retrieved.items);
    let full = mix(&retrieved, &synthetic, 60, 1).unwrap();
    let mut hist: BTreeMap<Provenance, usize> = BTreeMap::new();
    for it in &full.items {
        *hist.entry(it.provenance).or_default() += 1;
    }
    assert_eq!(hist[&Provenance::Synthetic], 60);
    assert_eq!(hist[&Provenance::Substring], 100);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn filter_keeps_top_ceil_fraction(seed in any::<u64>(), n in 0usize..400, classes in 1u32..10, pct in 1usize..=100) {
        let m = random_manifest(seed, n, classes);
        let p = pct as f64 / 100.0;
        let out = filter_top_fraction(&m, p, FilterScope::Global).unwrap();
        let keep = ceil_hundredths(n, pct);
        prop_assert_eq!(keep_count(p, n), keep);
        prop_assert_eq!(keys(&out), filter_oracle(&m.items, keep));
        let kept: HashSet<(u64, u32)> = out.items.iter().map(LabeledItem::key).collect();
        let dropped_max = m.items.iter().filter(|i| !kept.contains(&i.key())).map(|i| i.score.unwrap()).fold(f32::NEG_INFINITY, f32::max);
        let kept_min = out.items.iter().map(|i| i.score.unwrap()).fold(f32::INFINITY, f32::min);
        prop_assert!(kept_min >= dropped_max);
    }

    #[test]
    fn per_class_filter_applies_per_label(seed in any::<u64>(), n in 0usize..300, classes in 1u32..6) {
        let m = random_manifest(seed, n, classes);
        let out = filter_top_fraction(&m, 0.3, FilterScope::PerClass).unwrap();
        let before = m.label_counts();
        let after = out.label_counts();
        for (label, count) in before {
            prop_assert_eq!(after.get(&label).copied().unwrap_or(0), ceil_hundredths(count, 30));
        }
    }

    #[test]
    fn balance_caps_each_label(seed in any::<u64>(), n in 0usize..500, classes in 1u32..8, cap in 1usize..80) {
        let m = random_manifest(seed, n, classes);
        let out = class_balance(&m, cap, BalanceMode::TopScore).unwrap();
        prop_assert_eq!(keys(&out), balance_oracle(&m.items, cap));
        let after = out.label_counts();
        for (label, count) in m.label_counts() {
            prop_assert_eq!(after[&label], count.min(cap));
        }
        let random = class_balance(&m, cap, BalanceMode::Random { seed }).unwrap();
        for (label, count) in m.label_counts() {
            prop_assert_eq!(random.label_counts()[&label], count.min(cap));
        }
    }

    #[test]
    fn dedup_equals_all_pairs(seed in any::<u64>(), n in 1usize..200, m in 1usize..30, dim in 2usize..16, t in 80u32..=100) {
        let threshold = t as f32 / 100.0;
        let (images, eval) = dedup_instance(seed, n, m, dim);
        let items = images.iter().map(|(id, _)| LabeledItem::new(*id, 0, Provenance::Substring)).collect();
        let manifest = DatasetManifest::new(ManifestMeta::default(), items);
        let lookup: HashMap<u64, Vec<f32>> = images.iter().cloned().collect();
        let (_, report) = dedup_against_eval(&manifest, &lookup, &EvalSet::new("e", eval.clone()).unwrap(), threshold).unwrap();
        let removed: BTreeSet<u64> = report.removals.iter().map(|r| r.record_id).collect();
        prop_assert_eq!(removed, dedup_oracle(&images, &eval, threshold));
    }
}
