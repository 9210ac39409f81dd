//! Trainable tensors of the reference indexer and their on-disk form.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic  "HIXP"
//! u16    version (1)
//! u32    vocab size V
//! u32    width d
//! u32    depth C
//! u32*C  level widths
//! f32*   embedding (V x d), then per level: projection (d x d),
//!        bias (d), classifier head (width x d); all row-major
//! u32    CRC32 of everything above
//! ```

use rand::Rng;

use super::IndexerError;
use crate::rng;

pub const PARAMS_MAGIC: &[u8; 4] = b"HIXP";
pub const PARAMS_VERSION: u16 = 1;
const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    /// d x d, row-major; stands in for the level's soft prompt.
    pub proj: Vec<f64>,
    pub bias: Vec<f64>,
    /// width x d classifier head.
    pub head: Vec<f64>,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab: usize,
    pub dim: usize,
    /// V x d, row-major. Also the (tied) output layer of the masked-token head.
    pub embedding: Vec<f64>,
    pub levels: Vec<LevelParams>,
}

impl EncoderParams {
    pub fn zeros(vocab: usize, dim: usize, widths: &[usize]) -> Self {
        Self {
            vocab,
            dim,
            embedding: vec![0.0; vocab * dim],
            levels: widths
                .iter()
                .map(|&width| LevelParams {
                    proj: vec![0.0; dim * dim],
                    bias: vec![0.0; dim],
                    head: vec![0.0; width * dim],
                    width,
                })
                .collect(),
        }
    }

    /// Embeddings, projections and heads uniform in (-0.05, 0.05); biases zero.
    pub fn init(vocab: usize, dim: usize, widths: &[usize], seed: u64) -> Self {
        let mut p = Self::zeros(vocab, dim, widths);
        let mut rng = rng::derive(seed, "indexer-init");
        let mut fill = |xs: &mut [f64]| {
            for x in xs {
                *x = rng.random_range(-INIT_RANGE..INIT_RANGE);
            }
        };
        fill(&mut p.embedding);
        for level in &mut p.levels {
            fill(&mut level.proj);
            fill(&mut level.head);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab, self.dim, &self.widths())
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.width).collect()
    }

    pub fn embedding_row(&self, token: u32) -> &[f64] {
        let t = token as usize;
        &self.embedding[t * self.dim..(t + 1) * self.dim]
    }

    /// Tensors in file order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embedding];
        for l in &self.levels {
            out.extend([l.proj.as_slice(), l.bias.as_slice(), l.head.as_slice()]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.embedding];
        for l in &mut self.levels {
            out.push(&mut l.proj);
            out.push(&mut l.bias);
            out.push(&mut l.head);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Value of the `i`-th scalar in file order.
    pub fn get(&self, mut i: usize) -> f64 {
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut i: usize, value: f64) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.num_params() * 4);
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.depth() as u32).to_le_bytes());
        for l in &self.levels {
            out.extend_from_slice(&(l.width as u32).to_le_bytes());
        }
        for t in self.tensors() {
            for &x in t {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexerError> {
        if bytes.len() < 4 + 2 + 12 + 4 {
            return Err(IndexerError::Truncated);
        }
        if &bytes[..4] != PARAMS_MAGIC {
            return Err(IndexerError::BadMagic);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != PARAMS_VERSION {
            return Err(IndexerError::Version(version));
        }
        if crc32fast::hash(body) != stored {
            return Err(IndexerError::Checksum);
        }
        let vocab = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let depth = r.u32()? as usize;
        if vocab == 0 || dim == 0 || depth == 0 || depth > 64 {
            return Err(IndexerError::Shape(format!("V={vocab} d={dim} C={depth}")));
        }
        let mut widths = Vec::with_capacity(depth);
        for _ in 0..depth {
            widths.push(r.u32()? as usize);
        }
        let total = widths
            .iter()
            .try_fold(vocab.checked_mul(dim), |acc, &w| {
                let level = dim.checked_mul(dim)?.checked_add(dim)?.checked_add(w.checked_mul(dim)?)?;
                acc?.checked_add(level).map(Some)
            })
            .flatten()
            .and_then(|n| n.checked_mul(4));
        match total {
            Some(n) if n == body.len() - r.pos => {}
            Some(n) if n > body.len() - r.pos => return Err(IndexerError::Truncated),
            _ => return Err(IndexerError::Shape("tensor section size does not match header".into())),
        }
        let mut p = Self::zeros(vocab, dim, &widths);
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x = r.f32()? as f64;
            }
        }
        if !p.is_finite() {
            return Err(IndexerError::NonFinite("stored parameters".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> crate::Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// SHA-256 (hex) of the serialized parameters; recorded in databases.
    pub fn fingerprint(&self) -> String {
        crate::sha256_hex(&self.to_bytes())
    }

    /// Round every entry through f32, so in-memory params equal what a
    /// save/load cycle yields.
    pub fn quantized(mut self) -> Self {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        self
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], IndexerError> {
        let end = self.pos.checked_add(N).ok_or(IndexerError::Truncated)?;
        let bytes = self.buf.get(self.pos..end).ok_or(IndexerError::Truncated)?;
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, IndexerError> {
        self.take().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, IndexerError> {
        self.take().map(u32::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32, IndexerError> {
        self.take().map(f32::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let p = EncoderParams::init(50, 6, &[2, 5], 9);
        let bytes = p.to_bytes();
        let q = EncoderParams::from_bytes(&bytes).unwrap();
        assert_eq!(q.to_bytes(), bytes);
        assert_eq!(q, p.clone().quantized());
        assert_eq!(p.fingerprint(), q.fingerprint());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = EncoderParams::init(20, 4, &[3], 1).to_bytes();
        let mut bad = bytes.clone();
        bad[40] ^= 0x10;
        assert_eq!(EncoderParams::from_bytes(&bad).unwrap_err(), IndexerError::Checksum);
        // The trailer of a cut file no longer matches.
        assert_eq!(EncoderParams::from_bytes(&bytes[..bytes.len() - 9]).unwrap_err(), IndexerError::Checksum);
        assert_eq!(EncoderParams::from_bytes(&bytes[..10]).unwrap_err(), IndexerError::Truncated);
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(EncoderParams::from_bytes(&magic).unwrap_err(), IndexerError::BadMagic);
        let mut version = bytes;
        version[4] = 9;
        assert_eq!(EncoderParams::from_bytes(&version).unwrap_err(), IndexerError::Version(9));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = EncoderParams::init(30, 4, &[2, 3], 5);
        assert_eq!(a, EncoderParams::init(30, 4, &[2, 3], 5));
        assert_ne!(a, EncoderParams::init(30, 4, &[2, 3], 6));
        assert!(a.tensors().iter().all(|t| t.iter().all(|x| x.abs() < INIT_RANGE)));
        assert!(a.levels.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(a.num_params(), 30 * 4 + 2 * (16 + 4) + 5 * 4);
        let i = 30 * 4 + 3;
        assert_eq!(a.get(i), a.levels[0].proj[3]);
    }
}
