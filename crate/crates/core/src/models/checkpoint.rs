// Checkpoint layout (all integers little-endian):
//
//   "CLKB" | u32 version | u64 body_len | body | u32 crc32
//
// body = u32 header_len | header (UTF-8 JSON: descriptor + provenance)
//        | u32 n_params | n_params x (u32 name_len | name | u32 ndim
//        | ndim x u32 dim | f32 values)
//
// The CRC covers every byte before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureDescriptor, Classifier, ModelError, Provenance, Result};
use crate::tensor::{Parameter, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLKB";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    descriptor: ArchitectureDescriptor,
    provenance: Provenance,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| ModelError::Format(format!("{what} too large")))
}

pub(crate) fn encode(model: &Classifier) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        descriptor: model.descriptor().clone(),
        provenance: model.provenance().clone(),
    })
    .map_err(|e| ModelError::Format(e.to_string()))?;

    let mut body = Vec::new();
    put_u32(&mut body, len_u32(header.len(), "header")?);
    body.extend_from_slice(&header);
    put_u32(&mut body, len_u32(model.params().len(), "parameter count")?);
    for p in model.params() {
        put_u32(&mut body, len_u32(p.name().len(), "parameter name")?);
        body.extend_from_slice(p.name().as_bytes());
        put_u32(&mut body, len_u32(p.value().shape().len(), "rank")?);
        for &d in p.value().shape() {
            put_u32(&mut body, len_u32(d, "dimension")?);
        }
        for v in p.value().data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut out = Vec::with_capacity(PREAMBLE + body.len() + 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Truncated(format!("while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Classifier> {
    if bytes.len() < 4 {
        return Err(ModelError::Truncated("missing magic".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(ModelError::Truncated("missing preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected_total = (PREAMBLE as u64).saturating_add(body_len).saturating_add(4);
    if (bytes.len() as u64) < expected_total {
        return Err(ModelError::Truncated(format!(
            "file has {} bytes, header declares {expected_total}",
            bytes.len()
        )));
    }
    if (bytes.len() as u64) > expected_total {
        return Err(ModelError::Format("trailing bytes after checksum".into()));
    }
    let split = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[split..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..split]);
    if stored != computed {
        return Err(ModelError::Checksum { stored, computed });
    }

    let mut r = Reader {
        buf: &bytes[PREAMBLE..split],
        pos: 0,
    };
    let header_len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| ModelError::Format(format!("header: {e}")))?;
    let n_params = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(n_params.min(1024));
    for _ in 0..n_params {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| ModelError::Format(format!("parameter name: {e}")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count.saturating_mul(4), "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(Parameter::new(name, Tensor::new(shape, data)?));
    }
    if r.pos != r.buf.len() {
        return Err(ModelError::Format("unused bytes in body".into()));
    }
    Classifier::from_parts(header.descriptor, params, header.provenance)
}

pub fn save_checkpoint(model: &Classifier, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(model)?;
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Classifier> {
    decode(&fs::read(path)?)
}
