//! A small synthetic corpus for demos and end-to-end tests: three flower
//! classes, captions with and without class mentions, distractors, NSFW
//! flags and an eval set with planted duplicates. Fully determined by the seed.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embed::FileEmbeddingProvider;
use crate::shard::{write_shard, CorpusRecord};
use crate::vector::normalize;

pub const TOY_SEED: u64 = 7;
pub const TOY_DIM: usize = 32;
pub const TOY_RECORDS: usize = 300;
pub const TOY_CLASSES: [&str; 3] = ["rose", "tulip", "daisy"];
pub const TOY_TEMPLATES: [&str; 3] = ["a photo of a {}.", "a close-up photo of a {}.", "a bright photo of a {}."];
const ID_BASE: u64 = 1000;
const PLANTED: usize = 5;

const MENTIONS: [&str; 6] = [
    "a single {} in the garden",
    "{} petals on a wooden table",
    "close shot of a {} after rain",
    "A FIELD OF {} FLOWERS",
    "watercolor painting of a {}",
    "a  {}\tin a glass vase",
];
const UNMENTIONED: [&str; 4] =
    ["a flower on a windowsill", "spring blossoms in the park", "macro shot of petals", "a colorful bouquet"];
const DISTRACTORS: [&str; 8] = [
    "a red bicycle by the canal",
    "Rose Street station at night",
    "a bowl of ramen",
    "mountain hiking trail",
    "a tabby cat asleep on a sofa",
    "city skyline at dusk",
    "tulip-shaped wine glass",
    "vintage car show",
];

const SUBSTRING_CONFIG: &str = r#"profile = "flowers102"
corpus = "corpus.tdcs"
classes = "classes.txt"
templates = "templates.txt"
embeddings = "embeddings.jsonl"
eval_sets = ["eval.tdcs"]
class_cap = 50
seed = 42
output_dir = "out/substring"
"#;

const SEMANTIC_CONFIG: &str = r#"profile = "dtd"
corpus = "corpus.tdcs"
classes = "classes.txt"
templates = "templates.txt"
embeddings = "embeddings.jsonl"
eval_sets = ["eval.tdcs"]
k = 60
nprobe = 4
nlist = 8
text_channel = true
class_cap = 50
seed = 42
output_dir = "out/semantic"
"#;

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub records: Vec<CorpusRecord>,
    pub class_names: Vec<String>,
    pub templates: Vec<String>,
    pub query_embeddings: HashMap<String, Vec<f32>>,
    pub eval: Vec<Vec<f32>>,
}

fn noisy(rng: &mut ChaCha8Rng, center: &[f32], spread: f32) -> Vec<f32> {
    let mut v: Vec<f32> = center.iter().map(|c| c + spread * rng.sample::<f32, _>(StandardNormal)).collect();
    normalize(&mut v);
    v
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec<f32> {
    noisy(rng, &[0.0; TOY_DIM], 1.0)
}

pub fn generate_toy(seed: u64) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<Vec<f32>> = TOY_CLASSES.iter().map(|_| random_unit(&mut rng)).collect();

    let mut records = Vec::with_capacity(TOY_RECORDS);
    for i in 0..TOY_RECORDS {
        let id = ID_BASE + i as u64;
        let class = i % 4;
        let (caption, image, text) = if class < TOY_CLASSES.len() {
            let name = TOY_CLASSES[class];
            let other = TOY_CLASSES[(class + 1) % 3];
            let caption = match rng.random_range(0..10) {
                0..=5 => MENTIONS.choose(&mut rng).unwrap().replace("{}", name),
                6 => format!("a {name} next to a {other}"),
                _ => UNMENTIONED.choose(&mut rng).unwrap().to_string(),
            };
            let spread = rng.random_range(0.05..0.6);
            (caption, noisy(&mut rng, &protos[class], spread), noisy(&mut rng, &protos[class], 0.3))
        } else {
            let caption = DISTRACTORS.choose(&mut rng).unwrap().to_string();
            (caption, random_unit(&mut rng), random_unit(&mut rng))
        };
        let nsfw = rng.random_range(0..50) == 0;
        records.push(CorpusRecord::new(id, caption, image).with_text_embedding(text).with_nsfw(nsfw));
    }

    let mut query_embeddings = HashMap::new();
    for (c, name) in TOY_CLASSES.iter().enumerate() {
        for t in TOY_TEMPLATES {
            query_embeddings.insert(t.replace("{}", name), noisy(&mut rng, &protos[c], 0.15));
        }
    }

    let mut eval: Vec<Vec<f32>> = (0..PLANTED)
        .map(|j| records[j * 7].image_embedding.clone())
        .collect();
    eval.extend((0..PLANTED).map(|_| random_unit(&mut rng)));

    ToyCorpus {
        records,
        class_names: TOY_CLASSES.iter().map(|s| s.to_string()).collect(),
        templates: TOY_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        query_embeddings,
        eval,
    }
}

impl ToyCorpus {
    /// Writes corpus.tdcs, eval.tdcs, classes.txt, templates.txt,
    /// embeddings.jsonl and two ready-to-run configs into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_shard(&self.records, dir.join("corpus.tdcs")).map_err(std::io::Error::other)?;
        let eval: Vec<CorpusRecord> =
            self.eval.iter().enumerate().map(|(i, v)| CorpusRecord::new(i as u64, "", v.clone())).collect();
        write_shard(&eval, dir.join("eval.tdcs")).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("classes.txt"), self.class_names.join("\n") + "\n")?;
        std::fs::write(dir.join("templates.txt"), self.templates.join("\n") + "\n")?;
        FileEmbeddingProvider::write(&self.query_embeddings, dir.join("embeddings.jsonl"))?;
        std::fs::write(dir.join("substring.toml"), SUBSTRING_CONFIG)?;
        std::fs::write(dir.join("semantic.toml"), SEMANTIC_CONFIG)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::is_unit;

    #[test]
    fn shape_and_determinism() {
        let a = generate_toy(TOY_SEED);
        assert_eq!(a.records.len(), TOY_RECORDS);
        assert_eq!(a.query_embeddings.len(), 9);
        assert!(a.records.iter().all(|r| is_unit(&r.image_embedding) && r.image_embedding.len() == TOY_DIM));
        let b = generate_toy(TOY_SEED);
        assert_eq!(a.records, b.records);
        assert_eq!(a.eval, b.eval);
    }
}
