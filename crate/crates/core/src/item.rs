//! Labeled items: the rows of every manifest.

use std::fmt;
use std::str::FromStr;

/// Index into a [`crate::lexical::ClassSet`]; the label space.
pub type ClassIndex = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Substring,
    KnnImage,
    KnnText,
    Synthetic,
}

impl Provenance {
    pub const ALL: [Provenance; 4] =
        [Provenance::Substring, Provenance::KnnImage, Provenance::KnnText, Provenance::Synthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Substring => "substring",
            Provenance::KnnImage => "knn-image",
            Provenance::KnnText => "knn-text",
            Provenance::Synthetic => "synthetic",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn is_retrieved(self) -> bool {
        !matches!(self, Provenance::Synthetic)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Provenance::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| format!("unknown provenance {s:?}"))
    }
}

/// Set of channels that produced an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct ProvenanceSet(u8);

impl ProvenanceSet {
    pub fn single(p: Provenance) -> Self {
        Self(p.bit())
    }

    pub fn insert(&mut self, p: Provenance) {
        self.0 |= p.bit();
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn contains(self, p: Provenance) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Provenance> {
        Provenance::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub record_id: u64,
    pub label: ClassIndex,
    /// Cosine similarity in [-1, 1], once scored.
    pub score: Option<f32>,
    /// The channel that gave the item its score.
    pub provenance: Provenance,
    /// Every channel that returned the item; always contains `provenance`.
    pub channels: ProvenanceSet,
    pub source_query: Option<String>,
}

impl LabeledItem {
    pub fn new(record_id: u64, label: ClassIndex, provenance: Provenance) -> Self {
        Self {
            record_id,
            label,
            score: None,
            provenance,
            channels: ProvenanceSet::single(provenance),
            source_query: None,
        }
    }

    pub fn with_score(mut self, score: f32) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_query(mut self, query: impl Into<String>) -> Self {
        self.source_query = Some(query.into());
        self
    }

    pub fn key(&self) -> (u64, ClassIndex) {
        (self.record_id, self.label)
    }

    /// Provenance field as written to manifests: the scoring channel first,
    /// then any other channels joined by `+`.
    pub fn provenance_field(&self) -> String {
        let mut out = self.provenance.as_str().to_string();
        for p in self.channels.iter().filter(|p| *p != self.provenance) {
            out.push('+');
            out.push_str(p.as_str());
        }
        out
    }

    pub fn parse_provenance_field(s: &str) -> Result<(Provenance, ProvenanceSet), String> {
        let mut parts = s.split('+');
        let primary: Provenance = parts.next().unwrap_or_default().parse()?;
        let mut set = ProvenanceSet::single(primary);
        for p in parts {
            set.insert(p.parse()?);
        }
        Ok((primary, set))
    }
}

/// Descending score, unscored last, ties by ascending (record_id, label).
pub fn rank_order(a: &LabeledItem, b: &LabeledItem) -> std::cmp::Ordering {
    let sa = a.score.unwrap_or(f32::NEG_INFINITY);
    let sb = b.score.unwrap_or(f32::NEG_INFINITY);
    sb.total_cmp(&sa).then_with(|| a.key().cmp(&b.key()))
}
