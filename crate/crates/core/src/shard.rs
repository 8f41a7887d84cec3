//! Binary corpus shards.
//!
//! A corpus is a set of immutable shard files, each holding caption/url
//! records with precomputed unit-norm embeddings. Layout (all integers
//! little-endian):
//!
//! ```text
//! "TDCS" | version u16 | flags u16 | d u32 | n u64 | payload | crc32(payload) u32
//! record := record_id u64 | caption_len u32 | caption | url_len u32 | url
//!           | d × f32 image embedding | [d × f32 text embedding] | [u8 nsfw]
//! ```
//!
//! The text embedding is present iff flag bit 0 is set; the trailing NSFW
//! byte is present iff flag bit 1 is set.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::vector::{is_unit, l2_norm};

pub const SHARD_MAGIC: [u8; 4] = *b"TDCS";
pub const SHARD_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 4 + 2 + 2 + 4 + 8;
pub const TRAILER_LEN: u64 = 4;

pub const FLAG_TEXT_EMBEDDINGS: u16 = 1 << 0;
pub const FLAG_NSFW: u16 = 1 << 1;
const KNOWN_FLAGS: u16 = FLAG_TEXT_EMBEDDINGS | FLAG_NSFW;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub record_id: u64,
    pub caption: String,
    pub url: String,
    pub image_embedding: Vec<f32>,
    pub text_embedding: Option<Vec<f32>>,
    /// Externally produced NSFW verdict; flagged records never reach a manifest.
    pub nsfw: bool,
}

impl CorpusRecord {
    pub fn new(record_id: u64, caption: impl Into<String>, image_embedding: Vec<f32>) -> Self {
        Self {
            record_id,
            caption: caption.into(),
            url: String::new(),
            image_embedding,
            text_embedding: None,
            nsfw: false,
        }
    }

    pub fn with_url(mut self, url: impl Into<String>) -> Self {
        self.url = url.into();
        self
    }

    pub fn with_text_embedding(mut self, v: Vec<f32>) -> Self {
        self.text_embedding = Some(v);
        self
    }

    pub fn with_nsfw(mut self, nsfw: bool) -> Self {
        self.nsfw = nsfw;
        self
    }

    /// Encoded size of this record's payload for a shard with the given flags.
    pub fn encoded_len(&self, flags: u16) -> u64 {
        let d = self.image_embedding.len() as u64;
        let mut len = 8 + 4 + self.caption.len() as u64 + 4 + self.url.len() as u64 + 4 * d;
        if flags & FLAG_TEXT_EMBEDDINGS != 0 {
            len += 4 * d;
        }
        if flags & FLAG_NSFW != 0 {
            len += 1;
        }
        len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u16,
    pub flags: u16,
    pub dim: u32,
    pub count: u64,
}

impl ShardHeader {
    pub fn has_text_embeddings(&self) -> bool {
        self.flags & FLAG_TEXT_EMBEDDINGS != 0
    }

    pub fn has_nsfw(&self) -> bool {
        self.flags & FLAG_NSFW != 0
    }

    fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut buf = [0u8; HEADER_LEN as usize];
        buf[0..4].copy_from_slice(&SHARD_MAGIC);
        buf[4..6].copy_from_slice(&self.version.to_le_bytes());
        buf[6..8].copy_from_slice(&self.flags.to_le_bytes());
        buf[8..12].copy_from_slice(&self.dim.to_le_bytes());
        buf[12..20].copy_from_slice(&self.count.to_le_bytes());
        buf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusShard {
    pub header: ShardHeader,
    pub records: Vec<CorpusRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardSummary {
    pub count: u64,
    pub dim: u32,
    pub byte_len: u64,
}

/// Which embedding column a record-level finding refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Image,
    Text,
}

impl std::fmt::Display for Column {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Column::Image => "image",
            Column::Text => "text",
        })
    }
}

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"TDCS\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported shard version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown shard flags {0:#06x}")]
    UnknownFlags(u16),
    #[error("truncated shard: {context}")]
    Truncated { context: String },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(u64),
    #[error("record {index}: caption or url is not valid UTF-8")]
    InvalidUtf8 { index: u64 },
    #[error("record {index}: {column} embedding norm {norm} is not within 1e-3 of 1")]
    NonUnitEmbedding { index: u64, record_id: u64, column: Column, norm: f32 },
    #[error("record {index}: embedding dimension {found} differs from {expected}")]
    DimensionMismatch { index: u64, expected: usize, found: usize },
    #[error("record {index}: duplicate record_id {record_id}")]
    DuplicateRecordId { index: u64, record_id: u64 },
    #[error("record {index}: text embeddings must be present on all records or none")]
    MixedTextEmbeddings { index: u64 },
    #[error("caption or url of record {index} exceeds u32 length")]
    FieldTooLong { index: u64 },
}

impl ShardError {
    /// Stable machine-readable code for reports.
    pub fn code(&self) -> &'static str {
        match self {
            ShardError::Io { .. } => "io",
            ShardError::BadMagic { .. } => "bad-magic",
            ShardError::UnsupportedVersion(_) => "bad-version",
            ShardError::UnknownFlags(_) => "bad-flags",
            ShardError::Truncated { .. } => "truncated",
            ShardError::ChecksumMismatch { .. } => "checksum",
            ShardError::TrailingBytes(_) => "trailing-bytes",
            ShardError::InvalidUtf8 { .. } => "invalid-utf8",
            ShardError::NonUnitEmbedding { .. } => "non-unit-embedding",
            ShardError::DimensionMismatch { .. } => "dimension-mismatch",
            ShardError::DuplicateRecordId { .. } => "duplicate-record-id",
            ShardError::MixedTextEmbeddings { .. } => "mixed-text-embeddings",
            ShardError::FieldTooLong { .. } => "field-too-long",
        }
    }

    /// Whether the error concerns a single record (as opposed to the file structure).
    pub fn record_index(&self) -> Option<u64> {
        match self {
            ShardError::InvalidUtf8 { index }
            | ShardError::NonUnitEmbedding { index, .. }
            | ShardError::DimensionMismatch { index, .. }
            | ShardError::DuplicateRecordId { index, .. }
            | ShardError::MixedTextEmbeddings { index }
            | ShardError::FieldTooLong { index } => Some(*index),
            _ => None,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        ShardError::Io { path: path.to_path_buf(), source }
    }
}

/// Record-level invariant checks shared by writing, strict reading and validation.
fn record_findings(rec: &CorpusRecord, index: u64, dim: usize, has_text: bool) -> Vec<ShardError> {
    let mut out = Vec::new();
    if rec.image_embedding.len() != dim {
        out.push(ShardError::DimensionMismatch { index, expected: dim, found: rec.image_embedding.len() });
    } else if !is_unit(&rec.image_embedding) {
        out.push(ShardError::NonUnitEmbedding {
            index,
            record_id: rec.record_id,
            column: Column::Image,
            norm: l2_norm(&rec.image_embedding),
        });
    }
    match (&rec.text_embedding, has_text) {
        (Some(t), true) => {
            if t.len() != dim {
                out.push(ShardError::DimensionMismatch { index, expected: dim, found: t.len() });
            } else if !is_unit(t) {
                out.push(ShardError::NonUnitEmbedding {
                    index,
                    record_id: rec.record_id,
                    column: Column::Text,
                    norm: l2_norm(t),
                });
            }
        }
        (None, false) => {}
        _ => out.push(ShardError::MixedTextEmbeddings { index }),
    }
    out
}

/// Writes `records` to a new shard file at `path`.
pub fn write_shard(records: &[CorpusRecord], path: impl AsRef<Path>) -> Result<ShardSummary, ShardError> {
    let path = path.as_ref();
    let dim = records.first().map_or(0, |r| r.image_embedding.len());
    let has_text = records.first().is_some_and(|r| r.text_embedding.is_some());
    let has_nsfw = records.iter().any(|r| r.nsfw);

    let mut seen = HashSet::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let index = i as u64;
        if let Some(err) = record_findings(rec, index, dim, has_text).into_iter().next() {
            return Err(err);
        }
        if !seen.insert(rec.record_id) {
            return Err(ShardError::DuplicateRecordId { index, record_id: rec.record_id });
        }
        if rec.caption.len() > u32::MAX as usize || rec.url.len() > u32::MAX as usize {
            return Err(ShardError::FieldTooLong { index });
        }
    }

    let mut flags = 0;
    if has_text {
        flags |= FLAG_TEXT_EMBEDDINGS;
    }
    if has_nsfw {
        flags |= FLAG_NSFW;
    }
    let header = ShardHeader { version: SHARD_VERSION, flags, dim: dim as u32, count: records.len() as u64 };

    let file = File::create(path).map_err(|e| ShardError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut hasher = crc32fast::Hasher::new();
    let mut byte_len = HEADER_LEN + TRAILER_LEN;
    let write = |out: &mut BufWriter<File>, hasher: &mut crc32fast::Hasher, bytes: &[u8]| {
        hasher.update(bytes);
        out.write_all(bytes)
    };

    out.write_all(&header.encode()).map_err(|e| ShardError::io(path, e))?;
    let mut buf = Vec::new();
    for rec in records {
        buf.clear();
        encode_record(rec, flags, &mut buf);
        byte_len += buf.len() as u64;
        write(&mut out, &mut hasher, &buf).map_err(|e| ShardError::io(path, e))?;
    }
    out.write_all(&hasher.finalize().to_le_bytes()).map_err(|e| ShardError::io(path, e))?;
    out.flush().map_err(|e| ShardError::io(path, e))?;

    Ok(ShardSummary { count: header.count, dim: header.dim, byte_len })
}

fn encode_record(rec: &CorpusRecord, flags: u16, buf: &mut Vec<u8>) {
    buf.extend_from_slice(&rec.record_id.to_le_bytes());
    buf.extend_from_slice(&(rec.caption.len() as u32).to_le_bytes());
    buf.extend_from_slice(rec.caption.as_bytes());
    buf.extend_from_slice(&(rec.url.len() as u32).to_le_bytes());
    buf.extend_from_slice(rec.url.as_bytes());
    for x in &rec.image_embedding {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    if flags & FLAG_TEXT_EMBEDDINGS != 0 {
        for x in rec.text_embedding.as_deref().unwrap_or_default() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if flags & FLAG_NSFW != 0 {
        buf.push(rec.nsfw as u8);
    }
}

/// Streaming reader over one shard. Yields records in stored order and
/// verifies the payload checksum once the last record has been read.
///
/// Structural problems (truncation, checksum, bad UTF-8) end the stream with
/// an error. Record-level invariants are not checked here; see
/// [`ShardReader::strict`] and [`validate_corpus`].
pub struct ShardReader<R> {
    inner: R,
    header: ShardHeader,
    hasher: crc32fast::Hasher,
    next_index: u64,
    finished: bool,
    strict: Option<HashSet<u64>>,
}

impl ShardReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ShardError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| ShardError::io(path, e))?;
        Self::new(BufReader::new(file))
    }
}

impl<R: Read> ShardReader<R> {
    pub fn new(mut inner: R) -> Result<Self, ShardError> {
        let mut buf = [0u8; HEADER_LEN as usize];
        read_exact_or_truncated(&mut inner, &mut buf, "header")?;
        let magic: [u8; 4] = buf[0..4].try_into().unwrap();
        if magic != SHARD_MAGIC {
            return Err(ShardError::BadMagic { found: magic });
        }
        let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
        if version != SHARD_VERSION {
            return Err(ShardError::UnsupportedVersion(version));
        }
        let flags = u16::from_le_bytes(buf[6..8].try_into().unwrap());
        if flags & !KNOWN_FLAGS != 0 {
            return Err(ShardError::UnknownFlags(flags));
        }
        let header = ShardHeader {
            version,
            flags,
            dim: u32::from_le_bytes(buf[8..12].try_into().unwrap()),
            count: u64::from_le_bytes(buf[12..20].try_into().unwrap()),
        };
        Ok(Self {
            inner,
            header,
            hasher: crc32fast::Hasher::new(),
            next_index: 0,
            finished: false,
            strict: None,
        })
    }

    /// Also enforce record invariants (unit norm, unique ids), failing on the first violation.
    pub fn strict(mut self) -> Self {
        self.strict = Some(HashSet::new());
        self
    }

    pub fn header(&self) -> ShardHeader {
        self.header
    }

    fn read_hashed(&mut self, buf: &mut [u8], what: &str) -> Result<(), ShardError> {
        let context = format!("record {} {what}", self.next_index);
        read_exact_or_truncated(&mut self.inner, buf, &context)?;
        self.hasher.update(buf);
        Ok(())
    }

    fn read_string(&mut self, what: &str) -> Result<Result<String, ()>, ShardError> {
        let mut len = [0u8; 4];
        self.read_hashed(&mut len, what)?;
        let mut bytes = vec![0u8; u32::from_le_bytes(len) as usize];
        self.read_hashed(&mut bytes, what)?;
        Ok(String::from_utf8(bytes).map_err(|_| ()))
    }

    fn read_vector(&mut self, what: &str) -> Result<Vec<f32>, ShardError> {
        let mut bytes = vec![0u8; self.header.dim as usize * 4];
        self.read_hashed(&mut bytes, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn read_record(&mut self) -> Result<CorpusRecord, ShardError> {
        let index = self.next_index;
        let mut id = [0u8; 8];
        self.read_hashed(&mut id, "record_id")?;
        let caption = self.read_string("caption")?;
        let url = self.read_string("url")?;
        let image_embedding = self.read_vector("image embedding")?;
        let text_embedding =
            if self.header.has_text_embeddings() { Some(self.read_vector("text embedding")?) } else { None };
        let nsfw = if self.header.has_nsfw() {
            let mut b = [0u8; 1];
            self.read_hashed(&mut b, "nsfw flag")?;
            b[0] != 0
        } else {
            false
        };
        let (Ok(caption), Ok(url)) = (caption, url) else {
            return Err(ShardError::InvalidUtf8 { index });
        };
        Ok(CorpusRecord { record_id: u64::from_le_bytes(id), caption, url, image_embedding, text_embedding, nsfw })
    }

    fn finish(&mut self) -> Result<(), ShardError> {
        let mut crc = [0u8; 4];
        read_exact_or_truncated(&mut self.inner, &mut crc, "checksum")?;
        let stored = u32::from_le_bytes(crc);
        let computed = self.hasher.clone().finalize();
        if stored != computed {
            return Err(ShardError::ChecksumMismatch { stored, computed });
        }
        let extra = io::copy(&mut (&mut self.inner).take(u64::MAX), &mut io::sink())
            .map_err(|e| ShardError::Truncated { context: e.to_string() })?;
        if extra > 0 {
            return Err(ShardError::TrailingBytes(extra));
        }
        Ok(())
    }
}

impl<R: Read> Iterator for ShardReader<R> {
    type Item = Result<CorpusRecord, ShardError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if self.next_index == self.header.count {
            self.finished = true;
            return self.finish().err().map(Err);
        }
        let result = self.read_record().and_then(|rec| {
            if let Some(seen) = self.strict.as_mut() {
                let index = self.next_index;
                let has_text = self.header.has_text_embeddings();
                if let Some(err) = record_findings(&rec, index, self.header.dim as usize, has_text).into_iter().next() {
                    return Err(err);
                }
                if !seen.insert(rec.record_id) {
                    return Err(ShardError::DuplicateRecordId { index, record_id: rec.record_id });
                }
            }
            Ok(rec)
        });
        self.next_index += 1;
        if result.is_err() {
            self.finished = true;
        }
        Some(result)
    }
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], context: &str) -> Result<(), ShardError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ShardError::Truncated { context: context.to_string() },
        _ => ShardError::Truncated { context: format!("{context}: {e}") },
    })
}

/// Reads and fully validates a shard.
pub fn read_shard(path: impl AsRef<Path>) -> Result<CorpusShard, ShardError> {
    let reader = ShardReader::open(path)?.strict();
    let header = reader.header();
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok(CorpusShard { header, records })
}

/// A corpus: an ordered set of shard files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub shards: Vec<PathBuf>,
}

impl Corpus {
    pub fn new(shards: Vec<PathBuf>) -> Self {
        Self { shards }
    }

    /// Loads a shard-list file: one path per line, relative to the list file's
    /// directory; blank lines and `#` comments are ignored.
    pub fn from_list_file(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(path)?;
        let shards = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| base.join(l))
            .collect();
        Ok(Self { shards })
    }

    /// Writes a shard-list file naming `shards` relative to the list file's directory when possible.
    pub fn write_list_file(shards: &[PathBuf], path: impl AsRef<Path>) -> io::Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut text = String::new();
        for s in shards {
            let rel = s.strip_prefix(base).unwrap_or(s);
            text.push_str(&rel.to_string_lossy());
            text.push('\n');
        }
        std::fs::write(path, text)
    }

    /// Expands each input: shard-list files (`.txt`/`.list`) are resolved,
    /// anything else is taken as a shard path.
    pub fn from_inputs(inputs: &[PathBuf]) -> io::Result<Self> {
        let mut shards = Vec::new();
        for p in inputs {
            match p.extension().and_then(|e| e.to_str()) {
                Some("txt") | Some("list") => shards.extend(Self::from_list_file(p)?.shards),
                _ => shards.push(p.clone()),
            }
        }
        Ok(Self { shards })
    }

    /// Streams all records of all shards in shard order, strictly validated.
    pub fn records(&self) -> impl Iterator<Item = Result<(usize, CorpusRecord), ShardError>> + '_ {
        self.shards.iter().enumerate().flat_map(|(si, path)| {
            let it: Box<dyn Iterator<Item = Result<(usize, CorpusRecord), ShardError>>> =
                match ShardReader::open(path) {
                    Ok(r) => Box::new(r.strict().map(move |res| res.map(|rec| (si, rec)))),
                    Err(e) => Box::new(std::iter::once(Err(e))),
                };
            it
        })
    }

    /// Reads every shard fully, validating records and cross-shard id uniqueness.
    pub fn load(&self) -> Result<Vec<CorpusRecord>, CorpusError> {
        let mut out = Vec::new();
        let mut seen: BTreeMap<u64, usize> = BTreeMap::new();
        let mut dim: Option<usize> = None;
        for (si, path) in self.shards.iter().enumerate() {
            let shard_err = |source| CorpusError::Shard { path: path.clone(), source };
            for rec in ShardReader::open(path).map_err(shard_err)?.strict() {
                let rec = rec.map_err(shard_err)?;
                if let Some(first) = seen.insert(rec.record_id, si) {
                    return Err(CorpusError::DuplicateAcrossShards {
                        record_id: rec.record_id,
                        first: self.shards[first].clone(),
                        second: path.clone(),
                    });
                }
                let d = rec.image_embedding.len();
                match dim {
                    None => dim = Some(d),
                    Some(expected) if expected != d => {
                        return Err(CorpusError::DimensionMismatch { path: path.clone(), expected, found: d })
                    }
                    _ => {}
                }
                out.push(rec);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Shard {
        path: PathBuf,
        #[source]
        source: ShardError,
    },
    #[error("record_id {record_id} appears in both {first} and {second}")]
    DuplicateAcrossShards { record_id: u64, first: PathBuf, second: PathBuf },
    #[error("{path}: dimension {found} differs from corpus dimension {expected}")]
    DimensionMismatch { path: PathBuf, expected: usize, found: usize },
}

/// Held-out evaluation embeddings used as the dedup reference.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub name: String,
    pub embeddings: Vec<Vec<f32>>,
}

#[derive(Debug, Error)]
pub enum EvalSetError {
    #[error("eval set is empty")]
    Empty,
    #[error("eval vector {index} has norm {norm}, not within 1e-3 of 1")]
    NonUnit { index: usize, norm: f32 },
    #[error("eval vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error(transparent)]
    Shard(#[from] ShardError),
}

impl EvalSet {
    pub fn new(name: impl Into<String>, embeddings: Vec<Vec<f32>>) -> Result<Self, EvalSetError> {
        let Some(first) = embeddings.first() else {
            return Err(EvalSetError::Empty);
        };
        let d = first.len();
        for (index, v) in embeddings.iter().enumerate() {
            if v.len() != d {
                return Err(EvalSetError::DimensionMismatch { index, expected: d, found: v.len() });
            }
            if !is_unit(v) {
                return Err(EvalSetError::NonUnit { index, norm: l2_norm(v) });
            }
        }
        Ok(Self { name: name.into(), embeddings })
    }

    /// Eval sets are stored as ordinary shards; the image column is the reference.
    pub fn from_shard(path: impl AsRef<Path>) -> Result<Self, EvalSetError> {
        let path = path.as_ref();
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let shard = read_shard(path)?;
        Self::new(name, shard.records.into_iter().map(|r| r.image_embedding).collect())
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShardStatus {
    Valid { count: u64, dim: u32 },
    Unreadable { reason: String },
    Invalid { findings: Vec<Finding> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub code: &'static str,
    pub record_index: Option<u64>,
    pub message: String,
}

impl From<&ShardError> for Finding {
    fn from(e: &ShardError) -> Self {
        Finding { code: e.code(), record_index: e.record_index(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardReport {
    pub path: PathBuf,
    pub status: ShardStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicateId {
    pub record_id: u64,
    /// Every (shard path, record index) holding this id.
    pub locations: Vec<(PathBuf, u64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub shards: Vec<ShardReport>,
    pub duplicate_ids: Vec<DuplicateId>,
}

impl ValidationReport {
    /// True iff every shard is valid and no id repeats across shards.
    pub fn is_clean(&self) -> bool {
        self.duplicate_ids.is_empty() && self.shards.iter().all(|s| matches!(s.status, ShardStatus::Valid { .. }))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.shards {
            match &s.status {
                ShardStatus::Valid { count, dim } => {
                    out.push_str(&format!("ok\t{}\tn={count}\td={dim}\n", s.path.display()))
                }
                ShardStatus::Unreadable { reason } => {
                    out.push_str(&format!("unreadable\t{}\t{reason}\n", s.path.display()))
                }
                ShardStatus::Invalid { findings } => {
                    for f in findings {
                        let loc = f.record_index.map_or("-".to_string(), |i| i.to_string());
                        out.push_str(&format!("invalid\t{}\t{loc}\t{}\t{}\n", s.path.display(), f.code, f.message));
                    }
                }
            }
        }
        for dup in &self.duplicate_ids {
            let locs: Vec<String> =
                dup.locations.iter().map(|(p, i)| format!("{}#{i}", p.display())).collect();
            out.push_str(&format!("duplicate-id\t{}\t{}\n", dup.record_id, locs.join(",")));
        }
        out
    }
}

/// Validates every shard independently and checks record_id uniqueness across
/// the corpus. Unreadable shards are reported and do not stop the scan.
pub fn validate_corpus(paths: &[PathBuf]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut locations: BTreeMap<u64, Vec<(PathBuf, u64)>> = BTreeMap::new();
    let mut corpus_dim: Option<u32> = None;

    for path in paths {
        let reader = match ShardReader::open(path) {
            Ok(r) => r,
            Err(e @ ShardError::Io { .. }) => {
                report.shards.push(ShardReport {
                    path: path.clone(),
                    status: ShardStatus::Unreadable { reason: e.to_string() },
                });
                continue;
            }
            Err(e) => {
                report.shards.push(ShardReport {
                    path: path.clone(),
                    status: ShardStatus::Invalid { findings: vec![Finding::from(&e)] },
                });
                continue;
            }
        };
        let header = reader.header();
        let mut findings = Vec::new();
        if let Some(d) = corpus_dim {
            if d != header.dim && header.count > 0 {
                findings.push(Finding {
                    code: "corpus-dimension",
                    record_index: None,
                    message: format!("shard dimension {} differs from corpus dimension {d}", header.dim),
                });
            }
        } else if header.count > 0 {
            corpus_dim = Some(header.dim);
        }

        let mut in_shard: HashSet<u64> = HashSet::new();
        for (index, item) in reader.enumerate() {
            let index = index as u64;
            match item {
                Ok(rec) => {
                    for e in record_findings(&rec, index, header.dim as usize, header.has_text_embeddings()) {
                        findings.push(Finding::from(&e));
                    }
                    if !in_shard.insert(rec.record_id) {
                        findings.push(Finding::from(&ShardError::DuplicateRecordId {
                            index,
                            record_id: rec.record_id,
                        }));
                    }
                    locations.entry(rec.record_id).or_default().push((path.clone(), index));
                }
                Err(e) => findings.push(Finding::from(&e)),
            }
        }
        let status = if findings.is_empty() {
            ShardStatus::Valid { count: header.count, dim: header.dim }
        } else {
            ShardStatus::Invalid { findings }
        };
        report.shards.push(ShardReport { path: path.clone(), status });
    }

    report.duplicate_ids = locations
        .into_iter()
        .filter(|(_, locs)| {
            let first = &locs[0].0;
            locs.iter().any(|(p, _)| p != first)
        })
        .map(|(record_id, locations)| DuplicateId { record_id, locations })
        .collect();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, caption: &str, v: Vec<f32>) -> CorpusRecord {
        CorpusRecord::new(id, caption, v).with_url(format!("https://example.org/{id}.jpg"))
    }

    #[test]
    fn empty_shard_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.tdcs");
        let summary = write_shard(&[], &p).unwrap();
        assert_eq!(summary, ShardSummary { count: 0, dim: 0, byte_len: HEADER_LEN + TRAILER_LEN });
        let shard = read_shard(&p).unwrap();
        assert_eq!(shard.header.count, 0);
        assert!(shard.records.is_empty());
    }

    #[test]
    fn two_records_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("two.tdcs");
        let records = vec![
            rec(7, "a rose", vec![0.5, 0.5, 0.5, 0.5]).with_text_embedding(vec![1.0, 0.0, 0.0, 0.0]),
            rec(3, "ciel bleu \u{2601}", vec![0.0, 0.6, 0.0, 0.8]).with_text_embedding(vec![0.0, 0.0, 1.0, 0.0]),
        ];
        write_shard(&records, &p).unwrap();
        assert_eq!(read_shard(&p).unwrap().records, records);
    }

    #[test]
    fn write_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tdcs");
        let err = write_shard(&[rec(1, "a", vec![1.0, 0.0]), rec(2, "b", vec![1.0, 0.0, 0.0])], &p).unwrap_err();
        assert!(matches!(err, ShardError::DimensionMismatch { index: 1, .. }));
        let err = write_shard(&[rec(1, "a", vec![1.0, 0.0]), rec(1, "b", vec![0.0, 1.0])], &p).unwrap_err();
        assert!(matches!(err, ShardError::DuplicateRecordId { index: 1, record_id: 1 }));
        let err = write_shard(&[rec(1, "a", vec![1.0, 0.0]), rec(2, "b", vec![0.9, 0.0])], &p).unwrap_err();
        assert!(matches!(err, ShardError::NonUnitEmbedding { index: 1, .. }));
    }

    #[test]
    fn corrupted_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tdcs");
        write_shard(&[rec(1, "a", vec![1.0, 0.0])], &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        let err = read_shard(&p).unwrap_err();
        assert_eq!(err.code(), "bad-magic");
    }

    #[test]
    fn truncation_and_checksum_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tdcs");
        write_shard(&[rec(1, "abc", vec![1.0, 0.0]), rec(2, "def", vec![0.0, 1.0])], &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert_eq!(read_shard(&p).unwrap_err().code(), "truncated");

        let mut flipped = bytes.clone();
        flipped[HEADER_LEN as usize + 13] ^= 0x01;
        std::fs::write(&p, &flipped).unwrap();
        assert_eq!(read_shard(&p).unwrap_err().code(), "checksum");

        let mut longer = bytes.clone();
        longer.push(0);
        std::fs::write(&p, &longer).unwrap();
        assert_eq!(read_shard(&p).unwrap_err().code(), "trailing-bytes");

        let mut version = bytes;
        version[4] = 9;
        std::fs::write(&p, &version).unwrap();
        assert_eq!(read_shard(&p).unwrap_err().code(), "bad-version");
    }

    // Hand-assemble a shard so the stored vector violates the norm invariant.
    fn raw_shard(vectors: &[(u64, Vec<f32>)]) -> Vec<u8> {
        let dim = vectors[0].1.len() as u32;
        let header = ShardHeader { version: SHARD_VERSION, flags: 0, dim, count: vectors.len() as u64 };
        let mut payload = Vec::new();
        for (id, v) in vectors {
            encode_record(&CorpusRecord::new(*id, "x", v.clone()), 0, &mut payload);
        }
        let mut bytes = header.encode().to_vec();
        bytes.extend_from_slice(&payload);
        bytes.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        bytes
    }

    #[test]
    fn non_unit_record_names_its_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("norm.tdcs");
        std::fs::write(&p, raw_shard(&[(1, vec![1.0, 0.0]), (2, vec![0.9, 0.0])])).unwrap();
        match read_shard(&p).unwrap_err() {
            ShardError::NonUnitEmbedding { index, record_id, norm, .. } => {
                assert_eq!((index, record_id), (1, 2));
                assert!((norm - 0.9).abs() < 1e-6);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_reports_duplicates_and_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.tdcs");
        let b = dir.path().join("b.tdcs");
        let c = dir.path().join("c.tdcs");
        write_shard(&[rec(1, "a", vec![1.0, 0.0]), rec(2, "b", vec![0.0, 1.0])], &a).unwrap();
        write_shard(&[rec(3, "c", vec![1.0, 0.0])], &b).unwrap();
        let missing = dir.path().join("missing.tdcs");

        let report = validate_corpus(&[a.clone(), b.clone()]);
        assert!(report.is_clean());

        write_shard(&[rec(2, "dup", vec![1.0, 0.0])], &c).unwrap();
        let report = validate_corpus(&[a.clone(), missing.clone(), c.clone()]);
        assert!(!report.is_clean());
        assert!(matches!(report.shards[1].status, ShardStatus::Unreadable { .. }));
        assert!(matches!(report.shards[0].status, ShardStatus::Valid { count: 2, .. }));
        assert!(matches!(report.shards[2].status, ShardStatus::Valid { count: 1, .. }));
        assert_eq!(report.duplicate_ids, vec![DuplicateId { record_id: 2, locations: vec![(a, 1), (c, 0)] }]);
        assert_eq!(report, validate_corpus(&[dir.path().join("a.tdcs"), missing, dir.path().join("c.tdcs")]));
    }

    #[test]
    fn validation_lists_every_bad_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("many.tdcs");
        std::fs::write(&p, raw_shard(&[(1, vec![0.5, 0.0]), (2, vec![1.0, 0.0]), (3, vec![0.0, 2.0])])).unwrap();
        let report = validate_corpus(&[p]);
        let ShardStatus::Invalid { findings } = &report.shards[0].status else { panic!() };
        let idx: Vec<_> = findings.iter().map(|f| f.record_index).collect();
        assert_eq!(idx, vec![Some(0), Some(2)]);
    }

    #[test]
    fn list_file_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let shards = vec![dir.path().join("s0.tdcs"), dir.path().join("sub/s1.tdcs")];
        let list = dir.path().join("corpus.txt");
        Corpus::write_list_file(&shards, &list).unwrap();
        assert_eq!(std::fs::read_to_string(&list).unwrap(), "s0.tdcs\nsub/s1.tdcs\n");
        assert_eq!(Corpus::from_list_file(&list).unwrap().shards, shards);
    }

    #[test]
    fn eval_set_rejects_empty() {
        assert!(matches!(EvalSet::new("e", vec![]), Err(EvalSetError::Empty)));
    }
}
