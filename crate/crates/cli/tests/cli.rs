use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tdc_core::manifest::DatasetManifest;

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

fn tdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdc")).args(args).env_remove("TDC_EMBED_ENDPOINT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tdc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy().join("substring.toml");
    for sub in ["a", "b"] {
        ok(&["run", "--config", s(&config), "--output-dir", s(&dir.path().join(sub))]);
    }
    let a = std::fs::read(dir.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/manifest.tsv")).unwrap());
    for f in ["report.txt", "resolved-config.txt"] {
        assert!(dir.path().join("a").join(f).is_file());
    }
}

#[test]
fn single_commands_compose_to_the_same_items_as_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f);
    let (corpus, classes, templates, emb, eval) = (
        toy().join("corpus.tdcs"),
        toy().join("classes.txt"),
        toy().join("templates.txt"),
        toy().join("embeddings.jsonl"),
        toy().join("eval.tdcs"),
    );
    ok(&["run", "--config", s(&toy().join("substring.toml")), "--output-dir", s(&d("run"))]);
    ok(&["retrieve", "--corpus", s(&corpus), "--classes", s(&classes), "--strategy", "substring", "--output", s(&d("r.tsv"))]);
    ok(&[
        "score", "--manifest", s(&d("r.tsv")), "--corpus", s(&corpus), "--classes", s(&classes),
        "--templates", s(&templates), "--embeddings", s(&emb), "--output", s(&d("s.tsv")),
    ]);
    ok(&["filter", "--manifest", s(&d("s.tsv")), "--output", s(&d("f.tsv"))]);
    ok(&[
        "dedup", "--manifest", s(&d("f.tsv")), "--corpus", s(&corpus), "--eval", s(&eval),
        "--output", s(&d("d.tsv")), "--removals", s(&d("removals.tsv")),
    ]);
    ok(&["balance", "--manifest", s(&d("d.tsv")), "--cap", "50", "--output", s(&d("b.tsv"))]);
    let composed = DatasetManifest::read(d("b.tsv")).unwrap();
    let run = DatasetManifest::read(d("run/manifest.tsv")).unwrap();
    assert_eq!(composed.content_hash(), run.content_hash());
    assert!(std::fs::read_to_string(d("removals.tsv")).unwrap().starts_with("#eval_set=eval\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy().join("substring.toml");

    let bad_key = tdc(&["run", "--config", s(&config), "--set", "colour=1", "--output-dir", s(dir.path())]);
    assert_eq!(code(&bad_key), 2);
    let bad_range = tdc(&["run", "--config", s(&config), "--set", "keep_fraction=2", "--output-dir", s(dir.path())]);
    assert_eq!(code(&bad_range), 2);

    let corrupt = dir.path().join("corrupt.tdcs");
    let mut bytes = std::fs::read(toy().join("corpus.tdcs")).unwrap();
    bytes[100] ^= 0xff;
    std::fs::write(&corrupt, bytes).unwrap();
    let v = tdc(&["validate", s(&corrupt)]);
    assert_eq!(code(&v), 3);
    assert!(String::from_utf8_lossy(&v.stdout).contains("checksum"));
    ok(&["validate", s(&toy().join("corpus.tdcs")), s(&toy().join("eval.tdcs"))]);

    let too_many = tdc(&["run", "--config", s(&config), "--set", "subsample=99999", "--output-dir", s(dir.path())]);
    assert_eq!(code(&too_many), 4);
    let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("failed_stage=subsample"));
}

#[test]
fn endpoint_environment_variable_overrides_the_file_provider() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tdc"))
        .args(["run", "--config", s(&toy().join("substring.toml")), "--output-dir", s(dir.path())])
        .env("TDC_EMBED_ENDPOINT", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = std::fs::read_to_string(dir.path().join("resolved-config.txt")).unwrap();
    assert!(resolved.contains("endpoint = \"http://127.0.0.1:9\""));
}

#[test]
fn ingest_then_validate() {
    let dir = tempfile::tempdir().unwrap();
    let jsonl = dir.path().join("in.jsonl");
    std::fs::write(
        &jsonl,
        concat!(
            "{\"record_id\":1,\"caption\":\"a rose\",\"image_embedding\":[1.0,0.0]}\n",
            "{\"record_id\":2,\"caption\":\"a tulip\",\"url\":\"http://x/2.jpg\",\"image_embedding\":[0.0,1.0],\"nsfw\":true}\n",
            "{\"record_id\":3,\"caption\":\"a daisy\",\"image_embedding\":[0.6,0.8],\"text_embedding\":[0.8,0.6]}\n",
        ),
    )
    .unwrap();
    let shard = dir.path().join("c.tdcs");
    let missing_text = tdc(&["ingest", "--input", s(&jsonl), "--output", s(&shard)]);
    assert_eq!(code(&missing_text), 3);

    let clean: String = std::fs::read_to_string(&jsonl).unwrap().replace(",\"text_embedding\":[0.8,0.6]", "");
    std::fs::write(&jsonl, clean).unwrap();
    ok(&["ingest", "--input", s(&jsonl), "--output", s(&shard)]);
    ok(&["validate", s(&shard)]);
    ok(&["ingest", "--input", s(&jsonl), "--output", s(&dir.path().join("parts.tdcs")), "--shard-size", "2"]);
    ok(&["validate", s(&dir.path().join("parts.list"))]);

    std::fs::write(&jsonl, "{\"record_id\":1,\"caption\":\"x\",\"image_embedding\":[2.0,0.0]}\n").unwrap();
    assert_eq!(code(&tdc(&["ingest", "--input", s(&jsonl), "--output", s(&shard)])), 3);
}

#[test]
fn index_and_semantic_retrieve() {
    let dir = tempfile::tempdir().unwrap();
    let idx = dir.path().join("image.tdai");
    let stdout = ok(&["index", "--corpus", s(&toy().join("corpus.tdcs")), "--kind", "ivf", "--nlist", "8", "--seed", "3", "--output", s(&idx)]);
    assert!(stdout.contains("nlist=8"));
    let out = dir.path().join("r.tsv");
    ok(&[
        "retrieve", "--config", s(&toy().join("semantic.toml")), "--set", &format!("image_index=\"{}\"", s(&idx)),
        "--set", "text_channel=false", "--output", s(&out),
    ]);
    let m = DatasetManifest::read(&out).unwrap();
    assert!(m.items.iter().all(|i| i.provenance_field() == "knn-image"));
    assert!(m.label_counts().values().all(|&n| (60..=180).contains(&n)));
    assert_eq!(code(&tdc(&["index", "--corpus", s(&toy().join("corpus.tdcs")), "--nlist", "100000", "--output", s(&idx)])), 2);
}

#[test]
fn planning_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f);
    let classes = toy().join("classes.txt");
    ok(&["plan-captions", "--classes", s(&classes), "--count", "6", "--seed", "1", "--output", s(&d("captions.tsv"))]);
    let captions = std::fs::read_to_string(d("captions.tsv")).unwrap();
    assert!(captions.starts_with("#schema=caption-prompts/1\n"));
    let jobs: Vec<&str> = captions.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(jobs.len(), 18);
    for kind in ["plain", "background", "relation"] {
        assert_eq!(jobs.iter().filter(|l| l.split('\t').nth(3) == Some(kind)).count(), 6);
    }

    let filled: String = captions
        .lines()
        .map(|l| if l.starts_with('#') { l.to_string() } else { format!("{l}caption for {}", l.split('\t').nth(2).unwrap()) })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(d("filled.tsv"), filled + "\n").unwrap();
    ok(&[
        "plan-generation", "--classes", s(&classes), "--captions", s(&d("filled.tsv")), "--per-class", "4",
        "--output", s(&d("gen.tsv")), "--manifest-out", s(&d("synthetic.tsv")),
    ]);
    let gen = std::fs::read_to_string(d("gen.tsv")).unwrap();
    assert!(gen.contains("#steps=50\n") && gen.contains("#guidance_scale=2\n") && gen.contains("#sampler=ddim\n"));
    assert_eq!(gen.lines().filter(|l| !l.starts_with('#')).count(), 12);
    let short = tdc(&["plan-generation", "--classes", s(&classes), "--captions", s(&d("filled.tsv")), "--per-class", "7", "--output", s(&d("g2.tsv"))]);
    assert_eq!(code(&short), 3);
    ok(&["plan-generation", "--classes", s(&classes), "--captions", s(&d("filled.tsv")), "--per-class", "7", "--allow-repeat", "--output", s(&d("g2.tsv"))]);

    ok(&["run", "--config", s(&toy().join("substring.toml")), "--output-dir", s(&d("run"))]);
    let retrieved = d("run/manifest.tsv");
    ok(&["plan-perturbation", "--manifest", s(&retrieved), "--classes", s(&classes), "--output", s(&d("pert")), "--shards", "3"]);
    let n_items = DatasetManifest::read(&retrieved).unwrap().len();
    let pert_jobs: usize = std::fs::read_dir(d("pert"))
        .unwrap()
        .map(|e| std::fs::read_to_string(e.unwrap().path()).unwrap().lines().filter(|l| !l.starts_with('#')).count())
        .sum();
    assert_eq!(pert_jobs, n_items * 10);
    let bad = tdc(&["plan-perturbation", "--manifest", s(&retrieved), "--classes", s(&classes), "--gammas", "0.5,1.5", "--output", s(&d("p2.tsv"))]);
    assert_eq!(code(&bad), 2);

    ok(&["mix", "--retrieved", s(&retrieved), "--synthetic", s(&d("synthetic.tsv")), "--n-synth", "6", "--seed", "2", "--output", s(&d("mixed.tsv"))]);
    let stats = ok(&["stats", "--manifest", s(&d("mixed.tsv"))]);
    assert!(stats.contains(&format!("retrieved\t{n_items}\n")));
    assert!(stats.contains("synthetic\t6\n"));
}

#[test]
fn stats_reports_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.tsv");
    std::fs::write(&p, "#format=tdc-manifest/1\n1\t0\t0.5\tsubstring\t\nnot-a-row\n").unwrap();
    let out = tdc(&["stats", "--manifest", s(&p)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}
