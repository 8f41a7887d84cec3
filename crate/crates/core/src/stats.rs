//! Summary statistics of a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::item::{ClassIndex, Provenance};
use crate::manifest::{DatasetManifest, ManifestError};

pub const QUANTILES: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestStats {
    pub items: usize,
    pub per_class: BTreeMap<ClassIndex, usize>,
    pub scored: usize,
    /// Nearest-rank quantiles of the scores, one per entry of [`QUANTILES`].
    pub score_quantiles: Vec<f32>,
    pub provenance: BTreeMap<Provenance, usize>,
    pub retrieved: usize,
    pub synthetic: usize,
}

/// Nearest-rank quantile of an ascending slice: element ⌈q·n⌉ (1-based), the minimum at q = 0.
pub fn nearest_rank(sorted: &[f32], q: f64) -> Option<f32> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn stats(manifest: &DatasetManifest) -> ManifestStats {
    let mut scores: Vec<f32> = manifest.items.iter().filter_map(|i| i.score).collect();
    scores.sort_by(f32::total_cmp);
    let mut provenance: BTreeMap<Provenance, usize> = Provenance::ALL.into_iter().map(|p| (p, 0)).collect();
    for it in &manifest.items {
        *provenance.entry(it.provenance).or_insert(0) += 1;
    }
    let synthetic = provenance[&Provenance::Synthetic];
    ManifestStats {
        items: manifest.len(),
        per_class: manifest.label_counts(),
        scored: scores.len(),
        score_quantiles: QUANTILES.iter().map(|&q| nearest_rank(&scores, q).unwrap_or(0.0)).collect(),
        provenance,
        retrieved: manifest.len() - synthetic,
        synthetic,
    }
}

/// Parses manifest text and summarizes it; malformed lines are reported by number.
pub fn stats_from_text(text: &str) -> Result<ManifestStats, ManifestError> {
    Ok(stats(&DatasetManifest::parse(text)?))
}

impl ManifestStats {
    /// TSV sections; `names` labels classes when given.
    pub fn render(&self, names: Option<&[String]>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "items\t{}", self.items);
        let _ = writeln!(out, "scored\t{}", self.scored);
        let _ = writeln!(out, "retrieved\t{}", self.retrieved);
        let _ = writeln!(out, "synthetic\t{}", self.synthetic);
        out.push_str("\n[provenance]\n");
        for (p, n) in &self.provenance {
            let _ = writeln!(out, "{}\t{n}", p.as_str());
        }
        out.push_str("\n[score_quantiles]\n");
        for (q, v) in QUANTILES.iter().zip(&self.score_quantiles) {
            let _ = writeln!(out, "q{q}\t{v}");
        }
        out.push_str("\n[classes]\n");
        for (label, n) in &self.per_class {
            match names.and_then(|ns| ns.get(*label as usize)) {
                Some(name) => {
                    let _ = writeln!(out, "{label}\t{name}\t{n}");
                }
                None => {
                    let _ = writeln!(out, "{label}\t{n}");
                }
            }
        }
        out
    }
}
