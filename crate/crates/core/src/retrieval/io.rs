//! Database file format (little-endian):
//!
//! ```text
//! magic   "HRDB"
//! u16     version (1)
//! u8      depth C
//! u16     width d
//! u32     instance count
//! [32]u8  SHA-256 of the encoder params file
//! per instance:
//!   u32   id length, then UTF-8 id bytes
//!   u32*C label path node ids
//!   f32*(C*d) index vectors, level 1 first
//! u32     CRC32 of everything above
//! ```

use super::{RetrievalDatabase, RetrievalError};
use crate::taxonomy::{LabelPath, NodeId};

pub const DB_MAGIC: &[u8; 4] = b"HRDB";
pub const DB_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 2 + 4 + 32;

fn fingerprint_bytes(hex: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = hex.get(2 * i..2 * i + 2).and_then(|s| u8::from_str_radix(s, 16).ok()).unwrap_or(0);
    }
    out
}

pub(super) fn to_bytes(db: &RetrievalDatabase) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + db.len() * (16 + db.depth * (4 + 4 * db.dim)));
    out.extend_from_slice(DB_MAGIC);
    out.extend_from_slice(&DB_VERSION.to_le_bytes());
    out.push(db.depth as u8);
    out.extend_from_slice(&(db.dim as u16).to_le_bytes());
    out.extend_from_slice(&(db.len() as u32).to_le_bytes());
    out.extend_from_slice(&fingerprint_bytes(&db.encoder_fingerprint));
    for inst in &db.instances {
        out.extend_from_slice(&(inst.doc_id.len() as u32).to_le_bytes());
        out.extend_from_slice(inst.doc_id.as_bytes());
        for id in inst.path.nodes() {
            out.extend_from_slice(&id.0.to_le_bytes());
        }
        for x in inst.vectors.iter().flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self.pos.checked_add(n).ok_or(RetrievalError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(RetrievalError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], RetrievalError> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }
}

pub(super) fn from_bytes(bytes: &[u8]) -> Result<RetrievalDatabase, RetrievalError> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(RetrievalError::Truncated);
    }
    if &bytes[..4] != DB_MAGIC {
        return Err(RetrievalError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DB_VERSION {
        return Err(RetrievalError::Version(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(RetrievalError::Checksum);
    }
    let mut r = Reader { buf: body, pos: 6 };
    let depth = r.array::<1>()?[0] as usize;
    let dim = u16::from_le_bytes(r.array()?) as usize;
    let count = u32::from_le_bytes(r.array()?) as usize;
    let fp: [u8; 32] = r.array()?;
    if depth == 0 || dim == 0 {
        return Err(RetrievalError::Corrupt(format!("depth {depth}, width {dim}")));
    }
    let fingerprint: String = fp.iter().map(|b| format!("{b:02x}")).collect();
    let mut db = RetrievalDatabase::empty(depth, dim, fingerprint);
    // Each instance needs at least this many bytes; bounds the allocation.
    let min_record = 4 + depth * 4 + depth * dim * 4;
    if count > (body.len() - r.pos) / min_record {
        return Err(RetrievalError::Truncated);
    }
    db.instances.reserve(count);
    for _ in 0..count {
        let id_len = u32::from_le_bytes(r.array()?) as usize;
        let id = std::str::from_utf8(r.bytes(id_len)?)
            .map_err(|_| RetrievalError::Corrupt("instance id is not UTF-8".into()))?
            .to_string();
        let path = (0..depth)
            .map(|_| Ok(NodeId(u32::from_le_bytes(r.array()?))))
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        let mut vectors = Vec::with_capacity(depth);
        for _ in 0..depth {
            let v = (0..dim)
                .map(|_| Ok(f32::from_le_bytes(r.array()?)))
                .collect::<Result<Vec<_>, RetrievalError>>()?;
            vectors.push(v);
        }
        db.push(id, vectors, LabelPath(path)).map_err(|e| RetrievalError::Corrupt(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(RetrievalError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(db)
}
