pub mod item;
pub mod lexical;
pub mod shard;
pub mod stats;
pub mod text;
pub mod toy;
pub mod vector;
pub mod ann;
pub mod config;
pub mod curation;
pub mod embed;
pub mod manifest;
pub mod pipeline;
pub mod plan;
pub mod semantic;
