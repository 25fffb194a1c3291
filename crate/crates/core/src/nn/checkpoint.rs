//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic       8 bytes  "CRLCKPT\0"
//! version     u32      1
//! config      u32 length + UTF-8 key=value text
//! table 1     u32 length + UTF-8 rendered first-stage layer table
//! table 2     u32 length + UTF-8 rendered second-stage layer table
//! count       u32      number of parameter arrays
//! per array:  u32 length + UTF-8 name ("1/conv1a.weight"),
//!             4 × u32 shape, then product(shape) little-endian f32
//! ```
//!
//! Loading rebuilds both tables from the stored configuration, requires them
//! to render identically to the stored tables, and checks every array's name
//! and shape against the rebuilt networks.

use std::io::{Read, Write};
use std::path::Path;

use super::crl::{CrlConfig, CrlModel};
use super::network::Network;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CRLCKPT\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Serialises a model to bytes.
pub fn encode(model: &CrlModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, &model.config.to_text());
    put_str(&mut out, &model.stage1.spec().render());
    put_str(&mut out, &model.stage2.spec().render());
    let stages = [(1, &model.stage1), (2, &model.stage2)];
    let count: usize = stages.iter().map(|(_, n)| n.params().len()).sum();
    put_u32(&mut out, count as u32);
    for (stage, net) in stages {
        for (name, t) in net.params() {
            put_str(&mut out, &format!("{stage}/{name}"));
            for d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data().iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(field, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        String::from_utf8(self.take(n, field)?.to_vec()).map_err(|_| Error::format(field, "not UTF-8"))
    }
}

/// Rebuilds a model from bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<CrlModel> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a checkpoint file"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let config = CrlConfig::from_text(&cur.string("config")?)?;
    let model = CrlModel::new(config)?;
    for (field, net) in [("table 1", &model.stage1), ("table 2", &model.stage2)] {
        if cur.string(field)? != net.spec().render() {
            return Err(Error::format(field, "stored layer table differs from the configuration's"));
        }
    }
    let expected = model.stage1.params().len() + model.stage2.params().len();
    let count = cur.u32("count")? as usize;
    if count != expected {
        return Err(Error::format("count", format!("{count} arrays, model has {expected}")));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let full = cur.string("name")?;
        let (net, name): (&Network, &str) = match full.split_once('/') {
            Some(("1", n)) => (&model.stage1, n),
            Some(("2", n)) => (&model.stage2, n),
            _ => return Err(Error::format("name", format!("bad parameter name {full}"))),
        };
        let t = net
            .param(name)
            .ok_or_else(|| Error::format("name", format!("unknown parameter {full}")))?;
        if !seen.insert(full.clone()) {
            return Err(Error::format("name", format!("duplicate parameter {full}")));
        }
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = cur.u32("shape")? as usize;
        }
        if shape != t.shape() {
            return Err(Error::format(
                "shape",
                format!("{full} stored as {shape:?}, table needs {:?}", t.shape()),
            ));
        }
        let raw = cur.take(4 * t.numel(), "values")?;
        t.update_data(|d| {
            for (v, b) in d.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
            }
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format("values", "trailing bytes after the last array"));
    }
    Ok(model)
}

pub fn save(model: &CrlModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<CrlModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
