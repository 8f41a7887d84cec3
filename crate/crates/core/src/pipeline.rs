//! End-to-end runs: retrieve → score → filter → dedup → balance → subsample.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ann::{self, build_flat_index, build_ivf_index, column_from_records, default_nlist, AnnIndex, IndexKind};
use crate::config::{PipelineConfig, ProviderSpec, Strategy};
use crate::curation::{self, DedupReport, EmbeddingLookup};
use crate::embed::{EmbeddingProvider, FileEmbeddingProvider, HttpEmbeddingProvider};
use crate::item::ClassIndex;
use crate::lexical::{match_records, BoundaryMode, ClassSet, PatternMatcher};
use crate::manifest::{DatasetManifest, ManifestMeta, StageRecord};
use crate::semantic::{assemble_semantic_dataset, TemplateSet};
use crate::shard::{Column, Corpus, CorpusRecord, EvalSet, HEADER_LEN, TRAILER_LEN};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.txt";
pub const DEDUP_FILE: &str = "dedup-removals.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Data,
    Stage,
}

impl FailureKind {
    /// Process exit code for this kind of failure.
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Data => 3,
            FailureKind::Stage => 4,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("stage {stage} failed: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub kind: FailureKind,
    pub message: String,
}

fn fail(stage: &str, kind: FailureKind, e: impl std::fmt::Display) -> PipelineError {
    PipelineError { stage: stage.to_string(), kind, message: e.to_string() }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub class_names: Vec<String>,
    pub stages: Vec<StageRecord>,
    /// Per-label counts after each executed stage, in stage order.
    pub histograms: Vec<(String, BTreeMap<ClassIndex, usize>)>,
    pub params: BTreeMap<String, String>,
    pub hashes: BTreeMap<String, String>,
    pub resolved_config: String,
    pub dedup: Option<DedupReport>,
    pub failure: Option<PipelineError>,
}

impl RunReport {
    fn record(&mut self, m: &DatasetManifest) {
        let stage = m.meta.stages.last().map(|s| s.name.clone()).unwrap_or_default();
        self.stages = m.meta.stages.clone();
        self.histograms.push((stage, m.label_counts()));
        self.params = m.meta.params.clone();
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        match &self.failure {
            None => out.push_str("status=ok\n"),
            Some(f) => {
                let _ = writeln!(out, "status=failed\nfailed_stage={}\nerror={}", f.stage, f.message);
            }
        }
        out.push_str("\n[stages]\nname\tinput\toutput\n");
        for s in &self.stages {
            let _ = writeln!(out, "{}\t{}\t{}", s.name, s.input, s.output);
        }
        out.push_str("\n[class_histograms]\nlabel\tname");
        for (stage, _) in &self.histograms {
            let _ = write!(out, "\t{stage}");
        }
        out.push('\n');
        for (label, name) in self.class_names.iter().enumerate() {
            let _ = write!(out, "{label}\t{name}");
            for (_, h) in &self.histograms {
                let _ = write!(out, "\t{}", h.get(&(label as ClassIndex)).copied().unwrap_or(0));
            }
            out.push('\n');
        }
        out.push_str("\n[params]\n");
        for (k, v) in &self.params {
            let _ = writeln!(out, "{k}={v}");
        }
        out.push_str("\n[hashes]\n");
        for (k, v) in &self.hashes {
            let _ = writeln!(out, "{k}={v}");
        }
        if let Some(d) = &self.dedup {
            let _ = writeln!(out, "\n[dedup]\neval_set={}\nthreshold={}\nremoved={}", d.eval_set, d.threshold, d.removals.len());
        }
        out.push_str("\n[resolved_config]\n");
        out.push_str(&self.resolved_config);
        out
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub manifest: DatasetManifest,
    pub report: RunReport,
}

/// Identifies a corpus by the headers and checksums of its shards, in order.
pub fn corpus_fingerprint(shards: &[PathBuf]) -> std::io::Result<String> {
    let mut h = Sha256::new();
    for p in shards {
        let mut f = std::fs::File::open(p)?;
        let mut head = [0u8; HEADER_LEN as usize];
        f.read_exact(&mut head)?;
        let mut tail = [0u8; TRAILER_LEN as usize];
        f.seek(SeekFrom::End(-(TRAILER_LEN as i64)))?;
        f.read_exact(&mut tail)?;
        h.update(head);
        h.update(tail);
    }
    Ok(hex::encode(&h.finalize()[..16]))
}

pub fn make_provider(spec: &ProviderSpec, dim: usize) -> Result<Box<dyn EmbeddingProvider>, PipelineError> {
    let provider: Box<dyn EmbeddingProvider> = match spec {
        ProviderSpec::File(p) => Box::new(FileEmbeddingProvider::load(p).map_err(|e| fail("provider", FailureKind::Data, e))?),
        ProviderSpec::Service(url) => {
            Box::new(HttpEmbeddingProvider::connect(url, Some(dim)).map_err(|e| fail("provider", FailureKind::Stage, e))?)
        }
    };
    if provider.dim() != dim {
        return Err(fail(
            "provider",
            FailureKind::Data,
            format!("{} has dimension {}, corpus has {dim}", provider.describe(), provider.dim()),
        ));
    }
    Ok(provider)
}

/// Everything a run reads before its first stage.
pub struct Inputs {
    pub class_set: ClassSet,
    pub templates: Option<TemplateSet>,
    pub records: Vec<CorpusRecord>,
    pub corpus_id: String,
    pub dim: usize,
}

pub fn load_inputs(config: &PipelineConfig) -> Result<Inputs, PipelineError> {
    let data = |e: &dyn std::fmt::Display| fail("load", FailureKind::Data, e);
    let class_set = ClassSet::from_file(&config.classes).map_err(|e| data(&e))?;
    let templates = match &config.templates {
        Some(p) => Some(TemplateSet::from_file(p).map_err(|e| data(&e))?),
        None => None,
    };
    let corpus = Corpus::from_inputs(&config.corpus).map_err(|e| data(&e))?;
    let records = corpus.load().map_err(|e| data(&e))?;
    let dim = records.first().map_or(0, |r| r.image_embedding.len());
    if dim == 0 {
        return Err(data(&"corpus is empty"));
    }
    let corpus_id = corpus_fingerprint(&corpus.shards).map_err(|e| data(&e))?;
    Ok(Inputs { class_set, templates, records, corpus_id, dim })
}

fn build_index(config: &PipelineConfig, records: &[CorpusRecord], column: Column) -> Result<AnnIndex, PipelineError> {
    let stage_err = |e: ann::AnnError| fail("retrieve", FailureKind::Stage, e);
    let prebuilt = match column {
        Column::Image => &config.index.image_index,
        Column::Text => &config.index.text_index,
    };
    if let Some(path) = prebuilt {
        return ann::load_index(path).map_err(|e| fail("retrieve", FailureKind::Data, e));
    }
    let col = column_from_records(records, column);
    if col.is_empty() {
        return Err(fail("retrieve", FailureKind::Data, format!("the {column} column is empty")));
    }
    match config.index.kind {
        IndexKind::Flat => build_flat_index(&col).map_err(stage_err),
        IndexKind::Ivf => {
            let nlist = config.index.nlist.unwrap_or_else(|| default_nlist(col.len())).min(col.len());
            build_ivf_index(&col, nlist, config.seed, config.index.kmeans_iters).map_err(stage_err)
        }
    }
}

fn required<'a, T: ?Sized>(value: Option<&'a T>, what: &str, stage: &str) -> Result<&'a T, PipelineError> {
    value.ok_or_else(|| fail("config", FailureKind::Config, format!("{what} is required for the {stage} stage")))
}

/// The provider given by the caller, or the configured one checked against the corpus dimension.
fn provider_for<'a>(
    config: &PipelineConfig,
    given: Option<&'a dyn EmbeddingProvider>,
    dim: usize,
    stage: &str,
    owned: &'a mut Option<Box<dyn EmbeddingProvider>>,
) -> Result<&'a dyn EmbeddingProvider, PipelineError> {
    let provider: &dyn EmbeddingProvider = match given {
        Some(p) => p,
        None => {
            let spec = required(config.provider.as_ref(), "an embedding provider", stage)?;
            &**owned.insert(make_provider(spec, dim)?)
        }
    };
    if provider.dim() != dim {
        return Err(fail("provider", FailureKind::Data, format!("provider dimension {} != corpus {dim}", provider.dim())));
    }
    Ok(provider)
}

/// The retrieve stage alone. The provider is only consulted for the semantic strategy.
pub fn retrieve(
    config: &PipelineConfig,
    inputs: &Inputs,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<DatasetManifest, PipelineError> {
    let meta = ManifestMeta {
        corpus_id: inputs.corpus_id.clone(),
        class_set_hash: inputs.class_set.hash(),
        strategy: config.strategy.as_str().to_string(),
        seed: config.seed,
        ..Default::default()
    };
    let mut params: Vec<(&str, String)> = vec![("profile", config.profile.clone())];
    let items = match config.strategy {
        Strategy::Substring => {
            let matcher = PatternMatcher::new(&inputs.class_set, config.match_mode)
                .map_err(|e| fail("retrieve", FailureKind::Data, e))?;
            params.push(("retrieve.match_policy", matcher.policy().to_string()));
            let mode = match config.match_mode {
                BoundaryMode::Substring => "substring",
                BoundaryMode::WordBoundary => "word",
            };
            params.push(("retrieve.match_mode", mode.to_string()));
            match_records(&inputs.records, &matcher)
        }
        Strategy::Semantic => {
            let templates = required(inputs.templates.as_ref(), "templates", "retrieve")?;
            let mut owned = None;
            let provider = provider_for(config, provider, inputs.dim, "retrieve", &mut owned)?;
            let image = build_index(config, &inputs.records, Column::Image)?;
            let text = if config.text_channel { Some(build_index(config, &inputs.records, Column::Text)?) } else { None };
            let nprobe = config.nprobe.min(image.nlist()).min(text.as_ref().map_or(usize::MAX, |t| t.nlist()));
            params.push(("retrieve.k", config.k.to_string()));
            params.push(("retrieve.nprobe", nprobe.to_string()));
            params.push(("retrieve.index", format!("{:?}", image.kind()).to_lowercase()));
            params.push(("retrieve.nlist", image.nlist().to_string()));
            params.push(("retrieve.text_channel", config.text_channel.to_string()));
            assemble_semantic_dataset(
                &inputs.class_set,
                templates,
                provider,
                &image,
                text.as_ref(),
                config.k,
                nprobe,
            )
            .map_err(|e| fail("retrieve", FailureKind::Stage, e))?
        }
    };
    let mut m = DatasetManifest::new(meta, items);
    for (k, v) in params {
        m.set_param(k, v);
    }
    m.push_stage("retrieve", inputs.records.len());
    Ok(m)
}

/// Concatenates eval sets; the combined name joins the file stems with `+`.
pub fn load_eval_sets(paths: &[PathBuf]) -> Result<EvalSet, PipelineError> {
    let mut names = Vec::new();
    let mut embeddings = Vec::new();
    for p in paths {
        let set = EvalSet::from_shard(p).map_err(|e| fail("dedup", FailureKind::Data, format!("{}: {e}", p.display())))?;
        names.push(set.name);
        embeddings.extend(set.embeddings);
    }
    EvalSet::new(names.join("+"), embeddings).map_err(|e| fail("dedup", FailureKind::Data, e))
}

fn image_lookup(records: &[CorpusRecord], manifest: &DatasetManifest) -> EmbeddingLookup {
    let ids: HashSet<u64> = curation::item_ids(manifest);
    records.iter().filter(|r| ids.contains(&r.record_id)).map(|r| (r.record_id, r.image_embedding.clone())).collect()
}

/// Runs every stage in memory. On failure the report describes the stages
/// completed so far and the failure.
pub fn execute(
    config: &PipelineConfig,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<PipelineRun, Box<(PipelineError, RunReport)>> {
    let mut report = RunReport { resolved_config: config.render(), ..Default::default() };
    match execute_stages(config, provider, &mut report) {
        Ok(manifest) => Ok(PipelineRun { manifest, report }),
        Err(e) => {
            report.failure = Some(e.clone());
            Err(Box::new((e, report)))
        }
    }
}

fn execute_stages(
    config: &PipelineConfig,
    provider: Option<&dyn EmbeddingProvider>,
    report: &mut RunReport,
) -> Result<DatasetManifest, PipelineError> {
    config.validate().map_err(|e| fail("config", FailureKind::Config, e))?;
    let inputs = load_inputs(config)?;
    report.class_names = inputs.class_set.names().to_vec();
    report.hashes.insert("corpus_id".into(), inputs.corpus_id.clone());
    report.hashes.insert("class_set_hash".into(), inputs.class_set.hash());
    report.hashes.insert("config_sha256".into(), hex::encode(Sha256::digest(report.resolved_config.as_bytes())));

    let templates = required(inputs.templates.as_ref(), "templates", "score")?;
    let mut owned = None;
    let provider = provider_for(config, provider, inputs.dim, "score", &mut owned)?;

    let mut m = retrieve(config, &inputs, Some(provider))?;
    report.record(&m);

    let images: HashMap<u64, Vec<f32>> = image_lookup(&inputs.records, &m);
    m = curation::score_manifest(&m, &images, &inputs.class_set, templates, provider).map_err(stage("score"))?;
    report.record(&m);

    m = curation::filter_top_fraction(&m, config.keep_fraction, config.filter_scope).map_err(stage("filter"))?;
    report.record(&m);

    if !config.eval_sets.is_empty() {
        let eval = load_eval_sets(&config.eval_sets)?;
        let (next, dedup) = curation::dedup_against_eval(&m, &images, &eval, config.dedup_threshold).map_err(stage("dedup"))?;
        m = next;
        report.dedup = Some(dedup);
        report.record(&m);
    }

    m = curation::class_balance(&m, config.class_cap, config.balance).map_err(stage("balance"))?;
    report.record(&m);

    if let Some(n) = config.subsample {
        m = curation::subsample(&m, n, config.seed).map_err(stage("subsample"))?;
        report.record(&m);
    }

    report.hashes.insert("manifest_content_hash".into(), m.content_hash());
    Ok(m)
}

fn stage(name: &'static str) -> impl Fn(curation::CurationError) -> PipelineError {
    move |e| fail(name, FailureKind::Stage, e)
}

fn write_outputs(dir: &Path, config_text: &str, report: &RunReport, manifest: Option<&DatasetManifest>) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED_CONFIG_FILE), config_text)?;
    std::fs::write(dir.join(REPORT_FILE), report.render())?;
    let manifest_path = dir.join(MANIFEST_FILE);
    match manifest {
        Some(m) => std::fs::write(manifest_path, m.to_tsv())?,
        None if manifest_path.exists() => std::fs::remove_file(manifest_path)?,
        None => {}
    }
    match &report.dedup {
        Some(d) => std::fs::write(dir.join(DEDUP_FILE), d.to_tsv())?,
        None if dir.join(DEDUP_FILE).exists() => std::fs::remove_file(dir.join(DEDUP_FILE))?,
        None => {}
    }
    Ok(())
}

/// Runs the pipeline and writes manifest.tsv, report.txt and
/// resolved-config.txt under the configured output directory. A failed run
/// still writes its report and resolved config.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    run_pipeline_with(config, None)
}

pub fn run_pipeline_with(
    config: &PipelineConfig,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<PipelineRun, PipelineError> {
    let written = |r: std::io::Result<()>| r.map_err(|e| fail("write", FailureKind::Stage, e));
    match execute(config, provider) {
        Ok(run) => {
            written(write_outputs(&config.output_dir, &run.report.resolved_config, &run.report, Some(&run.manifest)))?;
            Ok(run)
        }
        Err(failed) => {
            let (e, report) = *failed;
            let _ = write_outputs(&config.output_dir, &report.resolved_config, &report, None);
            Err(e)
        }
    }
}
