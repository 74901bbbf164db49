//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! `b"HNTSCKPT"`, `u32` version, `u32` metadata count, then per entry two
//! length-prefixed UTF-8 strings; `u32` tensor count, then per tensor a
//! length-prefixed name, `u32` rank, `u64` dims and `f64` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamModule, TensorSpec};
use crate::error::{HintsError, Result};

pub const MAGIC: &[u8; 8] = b"HNTSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamModule,
}

fn corrupt(msg: impl Into<String>) -> HintsError {
    HintsError::CorruptCheckpoint(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| corrupt(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        if n > 1 << 20 {
            return Err(corrupt(format!("implausible {what} length {n}")));
        }
        String::from_utf8(self.bytes(n, what)?).map_err(|_| corrupt(format!("{what} is not utf-8")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn new(params: ParamModule) -> Self {
        Self {
            metadata: BTreeMap::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| corrupt(format!("missing metadata key `{key}`")))
    }

    /// Fails with `VersionMismatch` unless metadata `key` equals `expected`.
    pub fn expect_meta(&self, key: &str, expected: impl ToString) -> Result<()> {
        let expected = expected.to_string();
        let found = self.meta(key)?;
        if found != expected {
            return Err(HintsError::VersionMismatch {
                expected: format!("{key}={expected}"),
                found: format!("{key}={found}"),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.params.specs().len() as u32).to_le_bytes());
        for s in self.params.specs() {
            put_str(&mut out, &s.name);
            out.extend((s.shape.len() as u32).to_le_bytes());
            for d in &s.shape {
                out.extend((*d as u64).to_le_bytes());
            }
            for v in self.params.slice(&s.name) {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader { inner: r };
        let magic = r.bytes(8, "magic")?;
        if magic != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(HintsError::VersionMismatch {
                expected: format!("format {FORMAT_VERSION}"),
                found: format!("format {version}"),
            });
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32("metadata count")? {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            metadata.insert(k, v);
        }
        let mut specs = Vec::new();
        let mut data = Vec::new();
        for _ in 0..r.u32("tensor count")? {
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(corrupt(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > 1 << 28 {
                return Err(corrupt(format!("tensor `{name}` too large")));
            }
            let bytes = r.bytes(numel * 8, "tensor values")?;
            specs.push(TensorSpec {
                name,
                shape,
                offset: data.len(),
            });
            data.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))));
        }
        let mut rest = Vec::new();
        let _ = r.inner.read_to_end(&mut rest);
        if !rest.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            metadata,
            params: ParamModule::from_parts(specs, data)?,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HintsError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| HintsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| HintsError::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Packs several modules into one, prefixing tensor names with `<name>/`.
pub fn bundle(parts: &[(&str, &ParamModule)]) -> ParamModule {
    let mut b = ParamModule::builder();
    for (prefix, m) in parts {
        for s in m.specs() {
            b = b.tensor(&format!("{prefix}/{}", s.name), &s.shape, m.slice(&s.name).to_vec());
        }
    }
    b.build()
}

/// Extracts the tensors under `<name>/` from a bundled module.
pub fn unbundle(m: &ParamModule, prefix: &str) -> Result<ParamModule> {
    let tag = format!("{prefix}/");
    let mut b = ParamModule::builder();
    let mut any = false;
    for s in m.specs() {
        if let Some(rest) = s.name.strip_prefix(&tag) {
            b = b.tensor(rest, &s.shape, m.slice(&s.name).to_vec());
            any = true;
        }
    }
    if !any {
        return Err(corrupt(format!("no tensors under `{prefix}`")));
    }
    Ok(b.build())
}
