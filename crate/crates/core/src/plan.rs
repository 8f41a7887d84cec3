//! Job specs for the synthetic arm: LLM caption prompts, text-to-image
//! generation jobs and img2img (SDEdit) perturbation jobs. Nothing here runs
//! a model; the job files are consumed by external workers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::item::{ClassIndex, LabeledItem, Provenance};
use crate::lexical::ClassSet;
use crate::manifest::{escape, unescape, DatasetManifest, ManifestMeta};

pub const EXAMPLES_PER_PROMPT: usize = 3;
pub const PERTURBATION_PROMPT: &str = "a photo of {classname}";

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("{kind} prompts need a non-empty attribute pool")]
    EmptyPool { kind: CaptionKind },
    #[error("{kind} example file has {found} examples, at least {EXAMPLES_PER_PROMPT} are required")]
    TooFewExamples { kind: CaptionKind, found: usize },
    #[error("class {class} has {available} captions, {required} required")]
    InsufficientCaptions { class: ClassIndex, available: usize, required: usize },
    #[error("gamma {0} is outside [0, 1]")]
    GammaRange(f64),
    #[error("gamma grid is empty")]
    EmptyGrid,
    #[error("label {0} is outside the class set")]
    UnknownLabel(ClassIndex),
    #[error("kind ratios must be non-negative with a positive sum")]
    BadRatios,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

fn io_err(path: &Path, e: std::io::Error) -> PlanError {
    PlanError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CaptionKind {
    /// class ↦ caption
    Plain,
    /// class, background ↦ caption
    Background,
    /// class, spatial relation ↦ caption
    Relation,
}

impl CaptionKind {
    pub const ALL: [CaptionKind; 3] = [CaptionKind::Plain, CaptionKind::Background, CaptionKind::Relation];

    pub fn as_str(self) -> &'static str {
        match self {
            CaptionKind::Plain => "plain",
            CaptionKind::Background => "background",
            CaptionKind::Relation => "relation",
        }
    }

    fn instruction(self) -> &'static str {
        match self {
            CaptionKind::Plain => "Write a short, realistic image caption that depicts the given concept.",
            CaptionKind::Background => {
                "Write a short, realistic image caption that depicts the given concept in the given background."
            }
            CaptionKind::Relation => {
                "Write a short, realistic image caption that depicts the given concept using the given spatial relation."
            }
        }
    }
}

impl std::fmt::Display for CaptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CaptionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CaptionKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown caption kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InContextExample {
    pub concept: String,
    pub attribute: Option<String>,
    pub caption: String,
}

impl InContextExample {
    fn render(&self, out: &mut String) {
        match &self.attribute {
            Some(a) => {
                let _ = writeln!(out, "{}, {} => {}", self.concept, a, self.caption);
            }
            None => {
                let _ = writeln!(out, "{} => {}", self.concept, self.caption);
            }
        }
    }
}

/// Parses an example file: `concept TAB caption` for plain prompts,
/// `concept TAB attribute TAB caption` otherwise. `#` lines are comments.
pub fn parse_examples(text: &str, kind: CaptionKind) -> Result<Vec<InContextExample>, PlanError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let example = match (kind, fields.as_slice()) {
            (CaptionKind::Plain, [c, cap]) => InContextExample { concept: c.to_string(), attribute: None, caption: cap.to_string() },
            (CaptionKind::Background | CaptionKind::Relation, [c, a, cap]) => {
                InContextExample { concept: c.to_string(), attribute: Some(a.to_string()), caption: cap.to_string() }
            }
            _ => {
                return Err(PlanError::Parse { line: i + 1, message: format!("wrong field count for {kind} examples") })
            }
        };
        out.push(example);
    }
    Ok(out)
}

pub fn load_examples(path: impl AsRef<Path>, kind: CaptionKind) -> Result<Vec<InContextExample>, PlanError> {
    let path = path.as_ref();
    parse_examples(&std::fs::read_to_string(path).map_err(|e| io_err(path, e))?, kind)
}

/// Built-in example sets, used when no example file is given.
pub fn default_examples(kind: CaptionKind) -> Vec<InContextExample> {
    let text = match kind {
        CaptionKind::Plain => include_str!("../data/prompts/plain.tsv"),
        CaptionKind::Background => include_str!("../data/prompts/background.tsv"),
        CaptionKind::Relation => include_str!("../data/prompts/relation.tsv"),
    };
    parse_examples(text, kind).expect("bundled example files parse")
}

/// One entry per non-blank, non-comment line.
pub fn parse_pool(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_string).collect()
}

pub fn default_relations() -> Vec<String> {
    parse_pool(include_str!("../data/pools/relations.txt"))
}

pub fn default_backgrounds() -> Vec<String> {
    parse_pool(include_str!("../data/pools/backgrounds.txt"))
}

pub fn load_pool(path: impl AsRef<Path>) -> Result<Vec<String>, PlanError> {
    let path = path.as_ref();
    Ok(parse_pool(&std::fs::read_to_string(path).map_err(|e| io_err(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionPromptJob {
    pub job_id: u64,
    pub class_index: ClassIndex,
    pub class_name: String,
    pub kind: CaptionKind,
    pub attribute: Option<String>,
    pub prompt_text: String,
    /// Filled in by the LLM worker.
    pub caption: Option<String>,
}

fn render_prompt(kind: CaptionKind, examples: &[&InContextExample], concept: &str, attribute: Option<&str>) -> String {
    let mut out = String::new();
    out.push_str(kind.instruction());
    out.push_str("\n\n");
    for ex in examples {
        ex.render(&mut out);
    }
    match attribute {
        Some(a) => {
            let _ = write!(out, "{concept}, {a} =>");
        }
        None => {
            let _ = write!(out, "{concept} =>");
        }
    }
    out
}

struct PromptSource<'a> {
    kind: CaptionKind,
    examples: &'a [InContextExample],
    pool: &'a [String],
}

impl PromptSource<'_> {
    fn check(&self) -> Result<(), PlanError> {
        if self.examples.len() < EXAMPLES_PER_PROMPT {
            return Err(PlanError::TooFewExamples { kind: self.kind, found: self.examples.len() });
        }
        if self.kind != CaptionKind::Plain && self.pool.is_empty() {
            return Err(PlanError::EmptyPool { kind: self.kind });
        }
        Ok(())
    }

    fn job(&self, rng: &mut ChaCha8Rng, job_id: u64, class_index: ClassIndex, class_name: &str) -> CaptionPromptJob {
        let attribute = match self.kind {
            CaptionKind::Plain => None,
            _ => Some(self.pool[rng.random_range(0..self.pool.len())].clone()),
        };
        let picked: Vec<&InContextExample> =
            sample(rng, self.examples.len(), EXAMPLES_PER_PROMPT).into_iter().map(|i| &self.examples[i]).collect();
        CaptionPromptJob {
            job_id,
            class_index,
            class_name: class_name.to_string(),
            kind: self.kind,
            prompt_text: render_prompt(self.kind, &picked, class_name, attribute.as_deref()),
            attribute,
            caption: None,
        }
    }
}

/// `count_per_class` prompts of one kind for every class. Attributes and the
/// three in-context examples are drawn from a ChaCha8 stream seeded by `seed`.
pub fn build_caption_prompts(
    class_set: &ClassSet,
    kind: CaptionKind,
    examples: &[InContextExample],
    attribute_pool: &[String],
    count_per_class: usize,
    seed: u64,
) -> Result<Vec<CaptionPromptJob>, PlanError> {
    let source = PromptSource { kind, examples, pool: attribute_pool };
    source.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(class_set.len() * count_per_class);
    for (class_index, name) in class_set.iter() {
        for _ in 0..count_per_class {
            let id = jobs.len() as u64;
            jobs.push(source.job(&mut rng, id, class_index, name));
        }
    }
    Ok(jobs)
}

/// Per-kind example sets and attribute pools for mixed-kind prompting.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    pub examples: BTreeMap<CaptionKind, Vec<InContextExample>>,
    pub backgrounds: Vec<String>,
    pub relations: Vec<String>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::with_backgrounds(default_backgrounds())
    }
}

impl PromptLibrary {
    pub fn with_backgrounds(backgrounds: Vec<String>) -> Self {
        Self {
            examples: CaptionKind::ALL.into_iter().map(|k| (k, default_examples(k))).collect(),
            backgrounds,
            relations: default_relations(),
        }
    }

    fn pool(&self, kind: CaptionKind) -> &[String] {
        match kind {
            CaptionKind::Plain => &[],
            CaptionKind::Background => &self.backgrounds,
            CaptionKind::Relation => &self.relations,
        }
    }
}

/// Splits `total` across kinds proportionally to `ratios` (largest remainder, ties to the earlier kind).
pub fn split_counts(total: usize, ratios: [f64; 3]) -> Result<[usize; 3], PlanError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || sum <= 0.0 {
        return Err(PlanError::BadRatios);
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r / sum * total as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// `count_per_class` prompts per class split across the three kinds by `ratios`
/// (plain, background, relation).
pub fn build_mixed_caption_prompts(
    class_set: &ClassSet,
    library: &PromptLibrary,
    count_per_class: usize,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<CaptionPromptJob>, PlanError> {
    let counts = split_counts(count_per_class, ratios)?;
    let empty = Vec::new();
    let sources: Vec<PromptSource> = CaptionKind::ALL
        .into_iter()
        .map(|kind| PromptSource { kind, examples: library.examples.get(&kind).unwrap_or(&empty), pool: library.pool(kind) })
        .collect();
    for (s, &c) in sources.iter().zip(&counts) {
        if c > 0 {
            s.check()?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(class_set.len() * count_per_class);
    for (class_index, name) in class_set.iter() {
        for (source, &count) in sources.iter().zip(&counts) {
            for _ in 0..count {
                let id = jobs.len() as u64;
                jobs.push(source.job(&mut rng, id, class_index, name));
            }
        }
    }
    Ok(jobs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub sampler: String,
    pub steps: u32,
    pub guidance_scale: f64,
    pub model: String,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { sampler: "ddim".into(), steps: 50, guidance_scale: 2.0, model: "stable-diffusion-v1-5".into() }
    }
}

impl SamplerConfig {
    fn header(&self, out: &mut String) {
        let _ = writeln!(out, "#sampler={}", self.sampler);
        let _ = writeln!(out, "#steps={}", self.steps);
        let _ = writeln!(out, "#guidance_scale={}", self.guidance_scale);
        let _ = writeln!(out, "#model={}", escape(&self.model));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationJob {
    pub job_id: u64,
    pub class_index: ClassIndex,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationPlan {
    pub jobs: Vec<GenerationJob>,
    pub sampler: SamplerConfig,
    pub per_class_target: usize,
    pub class_set_hash: String,
}

/// Exactly `per_class_target` jobs per class, taking each class's captions in
/// input order (cycling through them when `allow_repeat` is set).
pub fn build_generation_plan(
    class_set: &ClassSet,
    captions: &[(String, ClassIndex)],
    per_class_target: usize,
    allow_repeat: bool,
) -> Result<GenerationPlan, PlanError> {
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); class_set.len()];
    for (caption, label) in captions {
        by_class.get_mut(*label as usize).ok_or(PlanError::UnknownLabel(*label))?.push(caption);
    }
    let mut jobs = Vec::with_capacity(per_class_target * class_set.len());
    for (class, available) in by_class.iter().enumerate() {
        let enough = available.len() >= per_class_target || (allow_repeat && !available.is_empty());
        if per_class_target > 0 && !enough {
            return Err(PlanError::InsufficientCaptions {
                class: class as ClassIndex,
                available: available.len(),
                required: per_class_target,
            });
        }
        for j in 0..per_class_target {
            jobs.push(GenerationJob {
                job_id: jobs.len() as u64,
                class_index: class as ClassIndex,
                caption: available[j % available.len()].to_string(),
            });
        }
    }
    Ok(GenerationPlan { jobs, sampler: SamplerConfig::default(), per_class_target, class_set_hash: class_set.hash() })
}

/// Default record-id offset for generated images, keeping them apart from corpus ids.
pub const SYNTHETIC_ID_OFFSET: u64 = 1 << 48;

impl GenerationPlan {
    pub fn class_histogram(&self) -> BTreeMap<ClassIndex, usize> {
        let mut h = BTreeMap::new();
        for j in &self.jobs {
            *h.entry(j.class_index).or_insert(0) += 1;
        }
        h
    }

    /// The manifest the generated images will form: record `id_offset + job_id`
    /// labeled with the job's class.
    pub fn to_manifest(&self, id_offset: u64) -> DatasetManifest {
        let items = self
            .jobs
            .iter()
            .map(|j| LabeledItem::new(id_offset + j.job_id, j.class_index, Provenance::Synthetic).with_query(&j.caption))
            .collect();
        let mut m = DatasetManifest::new(
            ManifestMeta {
                corpus_id: "synthetic".into(),
                class_set_hash: self.class_set_hash.clone(),
                strategy: "synthetic".into(),
                ..Default::default()
            },
            items,
        );
        m.set_param("generation.per_class_target", self.per_class_target);
        m.push_stage("generate", 0);
        m
    }

    pub fn to_job_file(&self) -> JobFile {
        let mut header = String::new();
        let _ = writeln!(header, "#schema=generation/1");
        let _ = writeln!(header, "#class_set_hash={}", self.class_set_hash);
        let _ = writeln!(header, "#per_class_target={}", self.per_class_target);
        self.sampler.header(&mut header);
        let _ = writeln!(header, "#columns=job_id\tclass_index\tcaption");
        let lines = self.jobs.iter().map(|j| format!("{}\t{}\t{}", j.job_id, j.class_index, escape(&j.caption))).collect();
        JobFile { header, lines }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationJob {
    pub record_id: u64,
    pub class_index: ClassIndex,
    pub gamma: f64,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationPlan {
    pub gamma_grid: Vec<f64>,
    pub jobs: Vec<PerturbationJob>,
    pub sampler: SamplerConfig,
}

/// γ ∈ {0.1, 0.2, …, 1.0}.
pub fn default_gamma_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn perturbation_prompt(class_name: &str) -> String {
    PERTURBATION_PROMPT.replace("{classname}", class_name)
}

/// One job per (item, γ), item-major.
pub fn build_perturbation_plan(
    manifest: &DatasetManifest,
    class_set: &ClassSet,
    gamma_grid: &[f64],
) -> Result<PerturbationPlan, PlanError> {
    if gamma_grid.is_empty() {
        return Err(PlanError::EmptyGrid);
    }
    if let Some(g) = gamma_grid.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(PlanError::GammaRange(*g));
    }
    let mut jobs = Vec::with_capacity(manifest.len() * gamma_grid.len());
    for it in &manifest.items {
        let name = class_set.name(it.label).ok_or(PlanError::UnknownLabel(it.label))?;
        let prompt = perturbation_prompt(name);
        for &gamma in gamma_grid {
            jobs.push(PerturbationJob { record_id: it.record_id, class_index: it.label, gamma, prompt: prompt.clone() });
        }
    }
    Ok(PerturbationPlan { gamma_grid: gamma_grid.to_vec(), jobs, sampler: SamplerConfig::default() })
}

impl PerturbationPlan {
    pub fn to_job_file(&self) -> JobFile {
        let mut header = String::new();
        let _ = writeln!(header, "#schema=perturbation/1");
        let grid: Vec<String> = self.gamma_grid.iter().map(f64::to_string).collect();
        let _ = writeln!(header, "#gamma_grid={}", grid.join(","));
        self.sampler.header(&mut header);
        let _ = writeln!(header, "#columns=record_id\tclass_index\tgamma\tprompt");
        let lines = self
            .jobs
            .iter()
            .map(|j| format!("{}\t{}\t{}\t{}", j.record_id, j.class_index, j.gamma, escape(&j.prompt)))
            .collect();
        JobFile { header, lines }
    }
}

pub fn caption_job_file(jobs: &[CaptionPromptJob], seed: u64) -> JobFile {
    let mut header = String::new();
    let _ = writeln!(header, "#schema=caption-prompts/1");
    let _ = writeln!(header, "#seed={seed}");
    let _ = writeln!(header, "#examples_per_prompt={EXAMPLES_PER_PROMPT}");
    let _ = writeln!(header, "#columns=job_id\tclass_index\tclass_name\tkind\tattribute\tprompt\tcaption");
    let lines = jobs
        .iter()
        .map(|j| {
            format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                j.job_id,
                j.class_index,
                escape(&j.class_name),
                j.kind,
                escape(j.attribute.as_deref().unwrap_or("")),
                escape(&j.prompt_text),
                escape(j.caption.as_deref().unwrap_or(""))
            )
        })
        .collect();
    JobFile { header, lines }
}

/// Reads (caption, class_index) pairs either from a caption-prompt job file
/// whose caption column has been filled in, or from `class_index TAB caption` lines.
pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<(String, ClassIndex)>, PlanError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let is_job_file = text.lines().next().is_some_and(|l| l.starts_with("#schema=caption-prompts/"));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| PlanError::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        let (label, caption) = match (is_job_file, fields.as_slice()) {
            (true, [_, label, _, _, _, _, caption]) => (*label, *caption),
            (false, [label, caption]) => (*label, *caption),
            _ => return Err(err(format!("unexpected field count {}", fields.len()))),
        };
        if caption.is_empty() {
            continue;
        }
        let label = label.parse::<ClassIndex>().map_err(|_| err(format!("bad class index {label:?}")))?;
        out.push((unescape(caption).map_err(err)?, label));
    }
    Ok(out)
}

/// Header block plus one line per job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobFile {
    pub header: String,
    pub lines: Vec<String>,
}

impl JobFile {
    pub fn render(&self) -> String {
        let mut out = self.header.clone();
        let _ = writeln!(out, "#jobs={}", self.lines.len());
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), PlanError> {
        let path = path.as_ref();
        std::fs::write(path, self.render()).map_err(|e| io_err(path, e))
    }

    /// Splits the jobs into `shards` contiguous files `{stem}-{i:05}-of-{n:05}.tsv` under `dir`.
    pub fn write_shards(&self, dir: impl AsRef<Path>, stem: &str, shards: usize) -> Result<Vec<PathBuf>, PlanError> {
        let dir = dir.as_ref();
        let shards = shards.max(1);
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let per = self.lines.len().div_ceil(shards).max(1);
        let mut paths = Vec::with_capacity(shards);
        for i in 0..shards {
            let start = (i * per).min(self.lines.len());
            let end = ((i + 1) * per).min(self.lines.len());
            let mut header = self.header.clone();
            let _ = writeln!(header, "#shard={i}/{shards}");
            let part = JobFile { header, lines: self.lines[start..end].to_vec() };
            let path = dir.join(format!("{stem}-{i:05}-of-{shards:05}.tsv"));
            part.write(&path)?;
            paths.push(path);
        }
        Ok(paths)
    }
}
