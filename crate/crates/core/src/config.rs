//! Benchmark profiles and pipeline configuration.
//!
//! A config file is TOML with flat keys. Flag overrides are `key=value`
//! strings whose value is read as a TOML value (bare words fall back to
//! strings). Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::ann::{IndexKind, DEFAULT_NPROBE};
use crate::curation::{BalanceMode, FilterScope, DEFAULT_CLASS_CAP, DEFAULT_DEDUP_THRESHOLD, DEFAULT_KEEP_FRACTION};
use crate::lexical::BoundaryMode;
use crate::semantic::DEFAULT_K;

pub const BUILTIN_PROFILES: &str = include_str!("../data/profiles.toml");

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot parse {what}: {message}")]
    Parse { what: String, message: String },
    #[error("unknown profile {0:?}")]
    UnknownProfile(String),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("{0} is required")]
    Missing(String),
    #[error("{key}: file {path} does not exist")]
    MissingFile { key: String, path: PathBuf },
    #[error("bad override {0:?}, expected key=value")]
    BadOverride(String),
    #[error("i/o error: {0}")]
    Io(String),
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Substring,
    Semantic,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Substring => "substring",
            Strategy::Semantic => "semantic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkProfile {
    pub name: String,
    pub strategy: Strategy,
    pub k: usize,
    pub nprobe: usize,
    pub class_cap: usize,
    pub keep_fraction: f64,
    pub dedup_threshold: f32,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    strategy: Option<Strategy>,
    k: Option<usize>,
    nprobe: Option<usize>,
    class_cap: Option<usize>,
    keep_fraction: Option<f64>,
    dedup_threshold: Option<f32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfileFile {
    #[serde(default)]
    defaults: RawProfile,
    #[serde(default)]
    profile: BTreeMap<String, RawProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    defaults: BenchmarkProfile,
    profiles: BTreeMap<String, BenchmarkProfile>,
}

impl RawProfile {
    fn over(&self, name: &str, base: &BenchmarkProfile) -> BenchmarkProfile {
        BenchmarkProfile {
            name: name.to_string(),
            strategy: self.strategy.unwrap_or(base.strategy),
            k: self.k.unwrap_or(base.k),
            nprobe: self.nprobe.unwrap_or(base.nprobe),
            class_cap: self.class_cap.unwrap_or(base.class_cap),
            keep_fraction: self.keep_fraction.unwrap_or(base.keep_fraction),
            dedup_threshold: self.dedup_threshold.unwrap_or(base.dedup_threshold),
        }
    }
}

impl ProfileSet {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawProfileFile =
            toml::from_str(text).map_err(|e| ConfigError::Parse { what: "profiles".into(), message: e.to_string() })?;
        let base = BenchmarkProfile {
            name: "default".into(),
            strategy: Strategy::Semantic,
            k: DEFAULT_K,
            nprobe: DEFAULT_NPROBE,
            class_cap: DEFAULT_CLASS_CAP,
            keep_fraction: DEFAULT_KEEP_FRACTION,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
        };
        let defaults = raw.defaults.over("default", &base);
        let profiles = raw.profile.iter().map(|(n, p)| (n.clone(), p.over(n, &defaults))).collect();
        Ok(Self { defaults, profiles })
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_PROFILES).expect("bundled profiles parse")
    }

    pub fn defaults(&self) -> &BenchmarkProfile {
        &self.defaults
    }

    /// `"default"` names the defaults block.
    pub fn get(&self, name: &str) -> Result<&BenchmarkProfile, ConfigError> {
        if name == "default" {
            return Ok(&self.defaults);
        }
        self.profiles.get(name).ok_or_else(|| ConfigError::UnknownProfile(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.profiles.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderSpec {
    File(PathBuf),
    Service(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexSpec {
    pub kind: IndexKind,
    /// `None` means ⌈√n⌉.
    pub nlist: Option<usize>,
    pub kmeans_iters: u32,
    /// Prebuilt image-column index; built in memory when absent.
    pub image_index: Option<PathBuf>,
    pub text_index: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub profile: String,
    pub corpus: Vec<PathBuf>,
    pub classes: PathBuf,
    pub templates: Option<PathBuf>,
    pub strategy: Strategy,
    pub k: usize,
    pub nprobe: usize,
    pub class_cap: usize,
    pub keep_fraction: f64,
    pub dedup_threshold: f32,
    pub seed: u64,
    pub filter_scope: FilterScope,
    pub balance: BalanceMode,
    pub subsample: Option<usize>,
    pub eval_sets: Vec<PathBuf>,
    pub provider: Option<ProviderSpec>,
    pub text_channel: bool,
    pub match_mode: BoundaryMode,
    pub index: IndexSpec,
    pub output_dir: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    profile: Option<String>,
    corpus: Option<OneOrMany>,
    classes: Option<PathBuf>,
    templates: Option<PathBuf>,
    strategy: Option<Strategy>,
    k: Option<usize>,
    nprobe: Option<usize>,
    class_cap: Option<usize>,
    keep_fraction: Option<f64>,
    dedup_threshold: Option<f32>,
    seed: Option<u64>,
    filter_scope: Option<String>,
    balance: Option<String>,
    subsample: Option<usize>,
    eval_sets: Option<OneOrMany>,
    provider: Option<String>,
    embeddings: Option<PathBuf>,
    endpoint: Option<String>,
    text_channel: Option<bool>,
    match_mode: Option<String>,
    index_kind: Option<String>,
    nlist: Option<usize>,
    kmeans_iters: Option<u32>,
    image_index: Option<PathBuf>,
    text_index: Option<PathBuf>,
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(PathBuf),
    Many(Vec<PathBuf>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<PathBuf> {
        match self {
            OneOrMany::One(p) => vec![p],
            OneOrMany::Many(v) => v,
        }
    }
}

/// Config text plus overrides, before resolution against a profile.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    table: toml::Table,
    base_dir: PathBuf,
}

impl ConfigSource {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| ConfigError::Parse { what: "config".into(), message: e.to_string() })?;
        Ok(Self { table, base_dir: base_dir.into() })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, dir)
    }

    /// An empty source whose relative paths resolve against `base_dir`.
    pub fn empty(base_dir: impl Into<PathBuf>) -> Self {
        Self { table: toml::Table::new(), base_dir: base_dir.into() }
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) =
            assignment.split_once('=').ok_or_else(|| ConfigError::BadOverride(assignment.to_string()))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::BadOverride(assignment.to_string()));
        }
        let value = value.trim();
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        self.table.insert(key.to_string(), parsed);
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.table.contains_key(key)
    }

    pub fn set_value(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.table.insert(key.to_string(), value.into());
    }

    /// Fills in profile defaults. `endpoint_env` (the value of
    /// `TDC_EMBED_ENDPOINT`, if set) replaces the configured provider with the service.
    pub fn resolve(&self, profiles: &ProfileSet, endpoint_env: Option<&str>) -> Result<PipelineConfig, ConfigError> {
        let raw: RawConfig = toml::Value::Table(self.table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse { what: "config".into(), message: e.to_string() })?;
        let path = |p: PathBuf| if p.is_absolute() { p } else { self.base_dir.join(p) };
        let profile_name = raw.profile.unwrap_or_else(|| "default".into());
        let profile = profiles.get(&profile_name)?;

        let corpus: Vec<PathBuf> = raw.corpus.ok_or_else(|| ConfigError::Missing("corpus".into()))?.into_vec();
        let provider = match (endpoint_env, raw.provider.as_deref()) {
            (Some(url), _) => Some(ProviderSpec::Service(url.to_string())),
            (None, Some("service")) => {
                Some(ProviderSpec::Service(raw.endpoint.ok_or_else(|| ConfigError::Missing("endpoint".into()))?))
            }
            (None, Some("file")) => {
                Some(ProviderSpec::File(path(raw.embeddings.ok_or_else(|| ConfigError::Missing("embeddings".into()))?)))
            }
            (None, None) => match (raw.embeddings, raw.endpoint) {
                (Some(f), _) => Some(ProviderSpec::File(path(f))),
                (None, Some(url)) => Some(ProviderSpec::Service(url)),
                (None, None) => None,
            },
            (None, Some(other)) => return Err(invalid("provider", format!("{other:?} is not file or service"))),
        };
        let seed = raw.seed.unwrap_or(0);
        let filter_scope = match raw.filter_scope.as_deref() {
            None | Some("global") => FilterScope::Global,
            Some("per-class") => FilterScope::PerClass,
            Some(o) => return Err(invalid("filter_scope", format!("{o:?} is not global or per-class"))),
        };
        let balance = match raw.balance.as_deref() {
            None | Some("top-score") => BalanceMode::TopScore,
            Some("random") => BalanceMode::Random { seed },
            Some(o) => return Err(invalid("balance", format!("{o:?} is not top-score or random"))),
        };
        let match_mode = match raw.match_mode.as_deref() {
            None | Some("substring") => BoundaryMode::Substring,
            Some("word") => BoundaryMode::WordBoundary,
            Some(o) => return Err(invalid("match_mode", format!("{o:?} is not substring or word"))),
        };
        let kind = match raw.index_kind.as_deref() {
            None | Some("ivf") => IndexKind::Ivf,
            Some("flat") => IndexKind::Flat,
            Some(o) => return Err(invalid("index_kind", format!("{o:?} is not flat or ivf"))),
        };
        let config = PipelineConfig {
            profile: profile_name,
            corpus: corpus.into_iter().map(path).collect(),
            classes: path(raw.classes.ok_or_else(|| ConfigError::Missing("classes".into()))?),
            templates: raw.templates.map(path),
            strategy: raw.strategy.unwrap_or(profile.strategy),
            k: raw.k.unwrap_or(profile.k),
            nprobe: raw.nprobe.unwrap_or(profile.nprobe),
            class_cap: raw.class_cap.unwrap_or(profile.class_cap),
            keep_fraction: raw.keep_fraction.unwrap_or(profile.keep_fraction),
            dedup_threshold: raw.dedup_threshold.unwrap_or(profile.dedup_threshold),
            seed,
            filter_scope,
            balance,
            subsample: raw.subsample,
            eval_sets: raw.eval_sets.map(OneOrMany::into_vec).unwrap_or_default().into_iter().map(path).collect(),
            provider,
            text_channel: raw.text_channel.unwrap_or(false),
            match_mode,
            index: IndexSpec {
                kind,
                nlist: raw.nlist,
                kmeans_iters: raw.kmeans_iters.unwrap_or(crate::ann::kmeans::DEFAULT_ITERS),
                image_index: raw.image_index.map(path),
                text_index: raw.text_index.map(path),
            },
            output_dir: path(raw.output_dir.ok_or_else(|| ConfigError::Missing("output_dir".into()))?),
        };
        config.check_ranges()?;
        Ok(config)
    }
}

impl PipelineConfig {
    fn check_ranges(&self) -> Result<(), ConfigError> {
        if self.corpus.is_empty() {
            return Err(invalid("corpus", "at least one shard is required"));
        }
        if self.k == 0 {
            return Err(invalid("k", "must be positive"));
        }
        if self.nprobe == 0 {
            return Err(invalid("nprobe", "must be positive"));
        }
        if self.class_cap == 0 {
            return Err(invalid("class_cap", "must be positive"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(invalid("keep_fraction", format!("{} is outside (0, 1]", self.keep_fraction)));
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return Err(invalid("dedup_threshold", format!("{} is outside (0, 1]", self.dedup_threshold)));
        }
        if self.subsample == Some(0) {
            return Err(invalid("subsample", "must be positive"));
        }
        if self.index.nlist == Some(0) {
            return Err(invalid("nlist", "must be positive"));
        }
        if self.index.kmeans_iters == 0 {
            return Err(invalid("kmeans_iters", "must be positive"));
        }
        Ok(())
    }

    /// Checks that every referenced input file exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.check_ranges()?;
        let mut files: Vec<(&str, &Path)> = vec![("classes", &self.classes)];
        files.extend(self.templates.iter().map(|p| ("templates", p.as_path())));
        files.extend(self.corpus.iter().map(|p| ("corpus", p.as_path())));
        files.extend(self.eval_sets.iter().map(|p| ("eval_sets", p.as_path())));
        if let Some(ProviderSpec::File(p)) = &self.provider {
            files.push(("embeddings", p));
        }
        files.extend(self.index.image_index.iter().map(|p| ("image_index", p.as_path())));
        files.extend(self.index.text_index.iter().map(|p| ("text_index", p.as_path())));
        for (key, p) in files {
            if !p.is_file() {
                return Err(ConfigError::MissingFile { key: key.into(), path: p.to_path_buf() });
            }
        }
        Ok(())
    }

    /// Fully resolved configuration as a config file; reading it back yields the same config.
    pub fn render(&self) -> String {
        let mut t = toml::Table::new();
        let p = |p: &Path| toml::Value::String(p.display().to_string());
        let ps = |v: &[PathBuf]| toml::Value::Array(v.iter().map(|x| p(x)).collect());
        t.insert("profile".into(), self.profile.clone().into());
        t.insert("corpus".into(), ps(&self.corpus));
        t.insert("classes".into(), p(&self.classes));
        if let Some(x) = &self.templates {
            t.insert("templates".into(), p(x));
        }
        t.insert("strategy".into(), self.strategy.as_str().into());
        t.insert("k".into(), (self.k as i64).into());
        t.insert("nprobe".into(), (self.nprobe as i64).into());
        t.insert("class_cap".into(), (self.class_cap as i64).into());
        t.insert("keep_fraction".into(), self.keep_fraction.into());
        t.insert("dedup_threshold".into(), f64::from(self.dedup_threshold).into());
        t.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        t.insert(
            "filter_scope".into(),
            match self.filter_scope {
                FilterScope::Global => "global",
                FilterScope::PerClass => "per-class",
            }
            .into(),
        );
        t.insert(
            "balance".into(),
            match self.balance {
                BalanceMode::TopScore => "top-score",
                BalanceMode::Random { .. } => "random",
            }
            .into(),
        );
        if let Some(n) = self.subsample {
            t.insert("subsample".into(), (n as i64).into());
        }
        t.insert("eval_sets".into(), ps(&self.eval_sets));
        match &self.provider {
            None => {}
            Some(ProviderSpec::File(f)) => {
                t.insert("provider".into(), "file".into());
                t.insert("embeddings".into(), p(f));
            }
            Some(ProviderSpec::Service(url)) => {
                t.insert("provider".into(), "service".into());
                t.insert("endpoint".into(), url.clone().into());
            }
        }
        t.insert("text_channel".into(), self.text_channel.into());
        t.insert(
            "match_mode".into(),
            match self.match_mode {
                BoundaryMode::Substring => "substring",
                BoundaryMode::WordBoundary => "word",
            }
            .into(),
        );
        t.insert(
            "index_kind".into(),
            match self.index.kind {
                IndexKind::Flat => "flat",
                IndexKind::Ivf => "ivf",
            }
            .into(),
        );
        if let Some(n) = self.index.nlist {
            t.insert("nlist".into(), (n as i64).into());
        }
        t.insert("kmeans_iters".into(), i64::from(self.index.kmeans_iters).into());
        if let Some(x) = &self.index.image_index {
            t.insert("image_index".into(), p(x));
        }
        if let Some(x) = &self.index.text_index {
            t.insert("text_index".into(), p(x));
        }
        t.insert("output_dir".into(), p(&self.output_dir));
        toml::to_string(&t).expect("config table serializes")
    }
}
