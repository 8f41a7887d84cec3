use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use tdc_core::ann::{self, build_flat_index, build_ivf_index, column_from_records, default_nlist};
use tdc_core::config::{ConfigSource, PipelineConfig, ProfileSet, ProviderSpec};
use tdc_core::curation::{self, BalanceMode, FilterScope};
use tdc_core::embed::ENDPOINT_ENV;
use tdc_core::lexical::ClassSet;
use tdc_core::manifest::DatasetManifest;
use tdc_core::pipeline::{self, load_eval_sets, make_provider, MANIFEST_FILE, REPORT_FILE, RESOLVED_CONFIG_FILE};
use tdc_core::plan::{self, CaptionKind, PlanError, PromptLibrary};
use tdc_core::semantic::TemplateSet;
use tdc_core::shard::{validate_corpus, write_shard, Column, Corpus, CorpusRecord, ShardReader};
use tdc_core::stats::stats_from_text;

use crate::failure::{curation, fail, pipeline as pipeline_result, CmdResult, Tag, CONFIG, DATA};
use crate::*;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InputRecord {
    record_id: u64,
    caption: String,
    #[serde(default)]
    url: String,
    image_embedding: Vec<f32>,
    #[serde(default)]
    text_embedding: Option<Vec<f32>>,
    #[serde(default)]
    nsfw: bool,
}

pub fn ingest(a: IngestArgs) -> CmdResult {
    let file = std::fs::File::open(&a.input).config()?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.data()?;
        if line.trim().is_empty() {
            continue;
        }
        let r: InputRecord = serde_json::from_str(&line).map_err(|e| anyhow::anyhow!("line {}: {e}", i + 1)).data()?;
        let mut rec = CorpusRecord::new(r.record_id, r.caption, r.image_embedding).with_url(r.url).with_nsfw(r.nsfw);
        rec.text_embedding = r.text_embedding;
        records.push(rec);
    }
    match a.shard_size {
        None => {
            let s = write_shard(&records, &a.output).data()?;
            println!("wrote {} records (d={}, {} bytes) to {}", s.count, s.dim, s.byte_len, a.output.display());
        }
        Some(0) => return fail(CONFIG, "--shard-size must be positive"),
        Some(size) => {
            let stem = a.output.with_extension("");
            let mut paths = Vec::new();
            for (i, chunk) in records.chunks(size).enumerate() {
                let p = PathBuf::from(format!("{}-{i:05}.tdcs", stem.display()));
                write_shard(chunk, &p).data()?;
                paths.push(p);
            }
            let list = stem.with_extension("list");
            Corpus::write_list_file(&paths, &list).data()?;
            println!("wrote {} records in {} shards, listed in {}", records.len(), paths.len(), list.display());
        }
    }
    Ok(())
}

fn corpus(inputs: &[PathBuf]) -> CmdResult<Corpus> {
    Corpus::from_inputs(inputs).data()
}

pub fn validate(a: ValidateArgs) -> CmdResult {
    let corpus = corpus(&a.paths)?;
    let report = validate_corpus(&corpus.shards);
    print!("{}", report.render());
    if !report.is_clean() {
        return fail(DATA, "corpus is invalid");
    }
    Ok(())
}

pub fn index(a: IndexArgs) -> CmdResult {
    let records = corpus(&a.corpus)?.load().data()?;
    let column = match a.column {
        ColumnArg::Image => Column::Image,
        ColumnArg::Text => Column::Text,
    };
    let col = column_from_records(&records, column);
    let index = match a.kind {
        IndexKindArg::Flat => build_flat_index(&col).data()?,
        IndexKindArg::Ivf => {
            let nlist = a.nlist.unwrap_or_else(|| default_nlist(col.len()));
            build_ivf_index(&col, nlist, a.seed, a.iters).map_err(|e| match e {
                ann::AnnError::ZeroNlist | ann::AnnError::NlistTooLarge { .. } => {
                    crate::failure::Failure { code: CONFIG, error: e.into() }
                }
                other => crate::failure::Failure { code: DATA, error: other.into() },
            })?
        }
    };
    let bytes = ann::save_index(&index, &a.output).stage()?;
    println!(
        "indexed {} vectors (d={}, nlist={}) into {} ({bytes} bytes)",
        index.len(),
        index.dim(),
        index.nlist(),
        a.output.display()
    );
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(absolute(p).display().to_string())
}

/// Config file < `--set` overrides < flags. Provider flags beat
/// TDC_EMBED_ENDPOINT, which beats the file.
fn resolve_config(a: &ConfigArgs, output_dir: Option<&Path>, profiles: &ProfileSet) -> CmdResult<PipelineConfig> {
    let cwd = std::env::current_dir().config()?;
    let mut src = match &a.config {
        Some(p) => ConfigSource::read(p).config()?,
        None => ConfigSource::empty(&cwd),
    };
    for o in &a.overrides {
        src.set(o).config()?;
    }
    if let Some(p) = &a.profile {
        src.set_value("profile", p.as_str());
    }
    if !a.corpus.is_empty() {
        src.set_value("corpus", toml::Value::Array(a.corpus.iter().map(|p| path_value(p)).collect()));
    }
    for (key, value) in [("classes", &a.classes), ("templates", &a.templates)] {
        if let Some(p) = value {
            src.set_value(key, path_value(p));
        }
    }
    if let Some(s) = &a.strategy {
        src.set_value("strategy", s.as_str());
    }
    let mut env = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty());
    if let Some(p) = &a.embeddings {
        src.set_value("provider", "file");
        src.set_value("embeddings", path_value(p));
        env = None;
    }
    if let Some(url) = &a.endpoint {
        src.set_value("provider", "service");
        src.set_value("endpoint", url.as_str());
        env = None;
    }
    if let Some(seed) = a.seed {
        src.set_value("seed", seed as i64);
    }
    match output_dir {
        Some(d) => src.set_value("output_dir", path_value(d)),
        None if !src.contains("output_dir") => src.set_value("output_dir", cwd.display().to_string()),
        None => {}
    }
    src.resolve(profiles, env.as_deref()).config()
}

pub fn retrieve(a: RetrieveArgs) -> CmdResult {
    let config = resolve_config(&a.config, None, &ProfileSet::builtin())?;
    config.validate().config()?;
    let inputs = pipeline_result(pipeline::load_inputs(&config))?;
    let m = pipeline_result(pipeline::retrieve(&config, &inputs, None))?;
    write_manifest(&m, &a.output)
}

fn read_manifest(p: &Path) -> CmdResult<DatasetManifest> {
    DatasetManifest::read(p).map_err(|e| anyhow::anyhow!("{}: {e}", p.display())).data()
}

fn write_manifest(m: &DatasetManifest, p: &Path) -> CmdResult {
    m.write(p).stage()?;
    println!("{}: {} items", p.display(), m.len());
    Ok(())
}

fn class_set(p: &Path) -> CmdResult<ClassSet> {
    ClassSet::from_file(p).data()
}

fn check_class_set(m: &DatasetManifest, classes: &ClassSet) -> CmdResult {
    if !m.meta.class_set_hash.is_empty() && m.meta.class_set_hash != classes.hash() {
        return fail(DATA, "the class file does not match the manifest's class set");
    }
    Ok(())
}

fn provider_spec(p: &ProviderArgs) -> CmdResult<ProviderSpec> {
    if let Some(url) = &p.endpoint {
        return Ok(ProviderSpec::Service(url.clone()));
    }
    if let Some(url) = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()) {
        return Ok(ProviderSpec::Service(url));
    }
    match &p.embeddings {
        Some(f) => Ok(ProviderSpec::File(f.clone())),
        None => fail(CONFIG, format!("an embedding provider is required: --embeddings, --endpoint or {ENDPOINT_ENV}")),
    }
}

pub fn score(a: ScoreArgs) -> CmdResult {
    let m = read_manifest(&a.manifest)?;
    let classes = class_set(&a.classes)?;
    check_class_set(&m, &classes)?;
    let templates = TemplateSet::from_file(&a.templates).data()?;
    let corpus = corpus(&a.corpus)?;
    let first = corpus.shards.first().ok_or_else(|| anyhow::anyhow!("no shards given")).config()?;
    let dim = ShardReader::open(first).data()?.header().dim as usize;
    let provider = pipeline_result(make_provider(&provider_spec(&a.provider)?, dim))?;
    let images = curation(curation::load_image_embeddings(&corpus, &curation::item_ids(&m)))?;
    let out = curation(curation::score_manifest(&m, &images, &classes, &templates, provider.as_ref()))?;
    write_manifest(&out, &a.output)
}

pub fn filter(a: FilterArgs) -> CmdResult {
    let m = read_manifest(&a.manifest)?;
    let scope = match a.scope {
        ScopeArg::Global => FilterScope::Global,
        ScopeArg::PerClass => FilterScope::PerClass,
    };
    write_manifest(&curation(curation::filter_top_fraction(&m, a.keep_fraction, scope))?, &a.output)
}

pub fn dedup(a: DedupArgs) -> CmdResult {
    let m = read_manifest(&a.manifest)?;
    let corpus = corpus(&a.corpus)?;
    let eval = pipeline_result(load_eval_sets(&a.eval))?;
    let images = curation(curation::load_image_embeddings(&corpus, &curation::item_ids(&m)))?;
    let (out, report) = curation(curation::dedup_against_eval(&m, &images, &eval, a.threshold))?;
    if let Some(p) = &a.removals {
        std::fs::write(p, report.to_tsv()).stage()?;
    }
    println!("removed {} items near-duplicate to {}", report.removals.len(), report.eval_set);
    write_manifest(&out, &a.output)
}

pub fn balance(a: BalanceArgs) -> CmdResult {
    let m = read_manifest(&a.manifest)?;
    let mode = match a.mode {
        BalanceArg::TopScore => BalanceMode::TopScore,
        BalanceArg::Random => BalanceMode::Random { seed: a.seed },
    };
    write_manifest(&curation(curation::class_balance(&m, a.cap, mode))?, &a.output)
}

pub fn subsample(a: SubsampleArgs) -> CmdResult {
    let m = read_manifest(&a.manifest)?;
    write_manifest(&curation(curation::subsample(&m, a.n, a.seed))?, &a.output)
}

pub fn mix(a: MixArgs) -> CmdResult {
    let retrieved = read_manifest(&a.retrieved)?;
    let synthetic = read_manifest(&a.synthetic)?;
    write_manifest(&curation(curation::mix(&retrieved, &synthetic, a.n_synth, a.seed))?, &a.output)
}

fn plan_code(e: &PlanError) -> u8 {
    match e {
        PlanError::GammaRange(_) | PlanError::EmptyGrid | PlanError::BadRatios | PlanError::EmptyPool { .. } => CONFIG,
        PlanError::Io(_) => crate::failure::STAGE,
        _ => DATA,
    }
}

fn planned<T>(r: Result<T, PlanError>) -> CmdResult<T> {
    r.map_err(|e| crate::failure::Failure { code: plan_code(&e), error: e.into() })
}

fn emit(file: plan::JobFile, output: &Path, shards: Option<usize>, stem: &str) -> CmdResult {
    match shards {
        None => {
            planned(file.write(output))?;
            println!("{}: {} jobs", output.display(), file.lines.len());
        }
        Some(n) => {
            let paths = planned(file.write_shards(output, stem, n))?;
            println!("{}: {} jobs in {} files", output.display(), file.lines.len(), paths.len());
        }
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CmdResult<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| anyhow::anyhow!("bad {what} value {x:?}")))
        .collect::<Result<_, _>>()
        .config()
}

pub fn plan_captions(a: PlanCaptionsArgs) -> CmdResult {
    let classes = class_set(&a.classes)?;
    let pool = |p: &Option<PathBuf>, default: fn() -> Vec<String>| -> CmdResult<Vec<String>> {
        match p {
            Some(p) => planned(plan::load_pool(p)),
            None => Ok(default()),
        }
    };
    let single = |kind: CaptionKind, default_pool: fn() -> Vec<String>| -> CmdResult<Vec<plan::CaptionPromptJob>> {
        let examples = match &a.examples {
            Some(p) => planned(plan::load_examples(p, kind))?,
            None => plan::default_examples(kind),
        };
        let attributes = if kind == CaptionKind::Plain { Vec::new() } else { pool(&a.pool, default_pool)? };
        planned(plan::build_caption_prompts(&classes, kind, &examples, &attributes, a.count, a.seed))
    };
    let jobs = match a.kind {
        CaptionKindArg::Plain => single(CaptionKind::Plain, Vec::new)?,
        CaptionKindArg::Background => single(CaptionKind::Background, plan::default_backgrounds)?,
        CaptionKindArg::Relation => single(CaptionKind::Relation, plan::default_relations)?,
        CaptionKindArg::Mixed => {
            let ratios: Vec<f64> = parse_list(&a.ratios, "ratio")?;
            let [p, b, r] = ratios[..] else {
                return fail(CONFIG, "--ratios takes three comma-separated weights");
            };
            let mut library = PromptLibrary::with_backgrounds(pool(&a.backgrounds, plan::default_backgrounds)?);
            library.relations = pool(&a.relations, plan::default_relations)?;
            planned(plan::build_mixed_caption_prompts(&classes, &library, a.count, [p, b, r], a.seed))?
        }
    };
    emit(plan::caption_job_file(&jobs, a.seed), &a.output, a.shards, "captions")
}

pub fn plan_generation(a: PlanGenerationArgs) -> CmdResult {
    let classes = class_set(&a.classes)?;
    let captions = planned(plan::read_captions(&a.captions))?;
    let plan = planned(plan::build_generation_plan(&classes, &captions, a.per_class, a.allow_repeat))?;
    if let Some(p) = &a.manifest_out {
        write_manifest(&plan.to_manifest(a.id_offset), p)?;
    }
    emit(plan.to_job_file(), &a.output, a.shards, "generation")
}

pub fn plan_perturbation(a: PlanPerturbationArgs) -> CmdResult {
    let m = read_manifest(&a.manifest)?;
    let classes = class_set(&a.classes)?;
    check_class_set(&m, &classes)?;
    let grid = match &a.gammas {
        Some(g) => parse_list::<f64>(g, "gamma")?,
        None => plan::default_gamma_grid(),
    };
    let plan = planned(plan::build_perturbation_plan(&m, &classes, &grid))?;
    emit(plan.to_job_file(), &a.output, a.shards, "perturbation")
}

pub fn run(a: RunArgs) -> CmdResult {
    let profiles = match &a.profiles {
        Some(p) => ProfileSet::parse(&std::fs::read_to_string(p).config()?).config()?,
        None => ProfileSet::builtin(),
    };
    let config = resolve_config(&a.config, a.output_dir.as_deref(), &profiles)?;
    let run = pipeline_result(pipeline::run_pipeline(&config))?;
    for s in &run.report.stages {
        println!("{:<10} {:>8} -> {:<8}", s.name, s.input, s.output);
    }
    for f in [MANIFEST_FILE, REPORT_FILE, RESOLVED_CONFIG_FILE] {
        println!("wrote {}", config.output_dir.join(f).display());
    }
    Ok(())
}

pub fn stats(a: StatsArgs) -> CmdResult {
    let text = std::fs::read_to_string(&a.manifest).config()?;
    let s = stats_from_text(&text).map_err(|e| anyhow::anyhow!("{}: {e}", a.manifest.display())).data()?;
    let names = match &a.classes {
        Some(p) => Some(class_set(p)?.names().to_vec()),
        None => None,
    };
    print!("{}", s.render(names.as_deref()));
    Ok(())
}
