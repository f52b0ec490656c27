//! QVWV vocabulary files, all integers and floats little-endian:
//!
//! ```text
//! "QVWV" | version u32 | K u32 | C_T u32 | tap_len u32 | tap UTF-8
//!        | centroids K×C_T f32 (row-major) | kmeans_objective f64
//! ```

use super::Vocabulary;
use crate::error::{format_err, Error, Result};

pub const QVWV_MAGIC: &[u8; 4] = b"QVWV";
pub const QVWV_VERSION: u32 = 1;

pub fn encode_vocabulary(vocab: &Vocabulary) -> Vec<u8> {
    let tap = vocab.tap.as_bytes();
    let mut out = Vec::with_capacity(24 + tap.len() + vocab.centroids().len() * 4);
    out.extend_from_slice(QVWV_MAGIC);
    out.extend_from_slice(&QVWV_VERSION.to_le_bytes());
    out.extend_from_slice(&(vocab.k() as u32).to_le_bytes());
    out.extend_from_slice(&(vocab.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(tap.len() as u32).to_le_bytes());
    out.extend_from_slice(tap);
    for v in vocab.centroids() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&vocab.kmeans_objective.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err!("vocabulary file truncated in {what}"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_vocabulary(bytes: &[u8]) -> Result<Vocabulary> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != QVWV_MAGIC {
        return Err(format_err!("not a QVWV vocabulary file"));
    }
    let version = r.u32("version")?;
    if version != QVWV_VERSION {
        return Err(format_err!("unsupported vocabulary version {version}"));
    }
    let k = r.u32("K")? as usize;
    let dim = r.u32("C_T")? as usize;
    if k == 0 || dim == 0 {
        return Err(format_err!("vocabulary header has K={k}, C_T={dim}"));
    }
    let tap_len = r.u32("tap length")? as usize;
    let tap = std::str::from_utf8(r.take(tap_len, "tap name")?)
        .map_err(|_| format_err!("tap name is not UTF-8"))?
        .to_string();
    let count = k
        .checked_mul(dim)
        .ok_or_else(|| format_err!("K×C_T overflows"))?;
    let payload = r.take(
        count.checked_mul(4).ok_or_else(|| format_err!("K×C_T overflows"))?,
        "centroids",
    )?;
    let centroids: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let objective = f64::from_le_bytes(r.take(8, "objective")?.try_into().expect("8 bytes"));
    if r.pos != bytes.len() {
        return Err(format_err!("{} trailing bytes after vocabulary", bytes.len() - r.pos));
    }
    Vocabulary::new(centroids, k, dim, tap, objective).map_err(|e| match e {
        Error::NonFinite(_) => format_err!("vocabulary holds non-finite centroids"),
        other => other,
    })
}
