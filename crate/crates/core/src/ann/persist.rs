//! Index files.
//!
//! ```text
//! "TDAI" | version u16 | kind u16 | d u32 | n u64 | nlist u32 | seed u64 | iters u32
//! | nlist × d f32 centroids | n × u64 id_map
//! | per list: len u64, then len × (position u32, d × f32)
//! | crc32 of everything above
//! ```
//!
//! A flat index is written as a single list holding every position, with no centroids.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{AnnIndex, IndexKind, IvfLayout};

pub const INDEX_MAGIC: [u8; 4] = *b"TDAI";
pub const INDEX_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic, not an index file")]
    BadMagic,
    #[error("unsupported index version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported index kind tag {0}")]
    UnsupportedKind(u16),
    #[error("truncated index file")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("inconsistent index: {0}")]
    Inconsistent(String),
}

pub fn encode_index(index: &AnnIndex) -> Vec<u8> {
    let d = index.dim;
    let mut buf = Vec::with_capacity(64 + index.vectors.len() * 4 + index.ids.len() * 12);
    buf.extend_from_slice(&INDEX_MAGIC);
    buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.kind as u16).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(index.ids.len() as u64).to_le_bytes());
    let (nlist, seed, iters) = index.ivf.as_ref().map_or((0, 0, 0), |l| (l.lists.len() as u32, l.seed, l.iters));
    buf.extend_from_slice(&nlist.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&iters.to_le_bytes());
    if let Some(layout) = &index.ivf {
        for x in &layout.centroids {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    for id in &index.ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    let all: Vec<u32>;
    let lists: Vec<&[u32]> = match &index.ivf {
        Some(layout) => layout.lists.iter().map(Vec::as_slice).collect(),
        None => {
            all = (0..index.ids.len() as u32).collect();
            vec![&all]
        }
    };
    for list in lists {
        buf.extend_from_slice(&(list.len() as u64).to_le_bytes());
        for &pos in list {
            buf.extend_from_slice(&pos.to_le_bytes());
            for x in index.row(pos as usize) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        if self.bytes.len() < n {
            return Err(PersistError::Truncated);
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, PersistError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, PersistError> {
        let bytes = self.take(n.checked_mul(4).ok_or(PersistError::Truncated)?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_index(bytes: &[u8]) -> Result<AnnIndex, PersistError> {
    if bytes.len() < 4 || bytes[..4] != INDEX_MAGIC {
        return Err(PersistError::BadMagic);
    }
    if bytes.len() < 4 + 4 {
        return Err(PersistError::Truncated);
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let mut cur = Cursor { bytes: &body[4..] };
    let version = cur.u16()?;
    if version != INDEX_VERSION {
        return Err(PersistError::UnsupportedVersion(version));
    }
    let tag = cur.u16()?;
    let kind = IndexKind::from_tag(tag).ok_or(PersistError::UnsupportedKind(tag))?;
    let stored = u32::from_le_bytes(crc.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(PersistError::ChecksumMismatch { stored, computed });
    }

    let dim = cur.u32()? as usize;
    let n = usize::try_from(cur.u64()?).map_err(|_| PersistError::Truncated)?;
    let nlist = cur.u32()? as usize;
    let seed = cur.u64()?;
    let iters = cur.u32()?;
    let centroids = cur.f32s(nlist * dim)?;
    let ids = (0..n).map(|_| cur.u64()).collect::<Result<Vec<_>, _>>()?;
    let stored_lists = if kind == IndexKind::Flat { 1 } else { nlist };
    if kind == IndexKind::Flat && nlist != 0 {
        return Err(PersistError::Inconsistent("flat index with centroids".into()));
    }
    let mut vectors = vec![0f32; n * dim];
    let mut filled = vec![false; n];
    let mut lists = Vec::with_capacity(stored_lists);
    for _ in 0..stored_lists {
        let len = cur.u64()? as usize;
        let mut list = Vec::with_capacity(len.min(n));
        for _ in 0..len {
            let pos = cur.u32()? as usize;
            if pos >= n || filled[pos] {
                return Err(PersistError::Inconsistent(format!("position {pos} out of range or repeated")));
            }
            filled[pos] = true;
            vectors[pos * dim..(pos + 1) * dim].copy_from_slice(&cur.f32s(dim)?);
            list.push(pos as u32);
        }
        lists.push(list);
    }
    if filled.iter().any(|f| !f) {
        return Err(PersistError::Inconsistent("inverted lists do not cover every position".into()));
    }
    if !cur.bytes.is_empty() {
        return Err(PersistError::Inconsistent(format!("{} unexpected bytes before checksum", cur.bytes.len())));
    }
    let ivf = match kind {
        IndexKind::Flat => None,
        IndexKind::Ivf => Some(IvfLayout { centroids, lists, seed, iters }),
    };
    Ok(AnnIndex { kind, dim, ids, vectors, ivf })
}

pub fn save_index(index: &AnnIndex, path: impl AsRef<Path>) -> Result<u64, PersistError> {
    let path = path.as_ref();
    let bytes = encode_index(index);
    let io_err = |source| PersistError::Io { path: path.to_path_buf(), source };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    f.flush().map_err(io_err)?;
    Ok(bytes.len() as u64)
}

pub fn load_index(path: impl AsRef<Path>) -> Result<AnnIndex, PersistError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| PersistError::Io { path: path.to_path_buf(), source })?;
    decode_index(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::{build_flat_index, build_ivf_index};
    use super::*;

    fn column() -> Vec<(u64, Vec<f32>)> {
        (0..40u64)
            .map(|i| {
                let a = i as f32 * 0.37;
                (1000 + i, vec![a.cos() * 0.6, a.sin() * 0.6, 0.8])
            })
            .collect()
    }

    #[test]
    fn ivf_roundtrip_is_bit_identical() {
        let idx = build_ivf_index(&column(), 5, 11, 20).unwrap();
        let bytes = encode_index(&idx);
        let back = decode_index(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(encode_index(&back), bytes);
    }

    #[test]
    fn flat_roundtrip_and_corruption() {
        let idx = build_flat_index(&column()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.tdai");
        save_index(&idx, &p).unwrap();
        assert_eq!(load_index(&p).unwrap(), idx);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[40] ^= 0xff;
        assert!(matches!(decode_index(&bytes), Err(PersistError::ChecksumMismatch { .. })));
        bytes[0] = b'Z';
        assert!(matches!(decode_index(&bytes), Err(PersistError::BadMagic)));
    }
}
