//! Single-file checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  content
//! 0       8     magic b"FLOWIID\0"
//! 8       4     u32 format version (currently 1)
//! 12      8     u64 manifest length N in bytes
//! 20      N     manifest, UTF-8 text, '\n'-terminated lines
//! 20+N    ...   payload: tensors back to back as f32 little-endian
//! ```
//!
//! Manifest lines:
//!
//! ```text
//! kind <string>
//! meta <key> <value...>                    value runs to end of line
//! tensor <name> f32 <d0,d1,...> <offset> <count>
//! ```
//!
//! `offset` is in bytes from the start of the payload, `count` in elements.
//! Scalars use an empty dimension list written as `-`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FLOWIID\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }

    pub fn meta_usize(&self, key: &str) -> Option<usize> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }

    pub fn push_all(&mut self, tensors: impl IntoIterator<Item = (String, Vec<usize>, Vec<f32>)>) {
        self.tensors.extend(
            tensors
                .into_iter()
                .map(|(name, shape, data)| NamedTensor { name, shape, data }),
        );
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// `(name, shape, data)` views, for parameter import.
    pub fn views(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.tensors
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice()))
    }

    fn manifest(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("kind {}\n", self.kind));
        for (k, v) in &self.meta {
            s.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let dims = if t.shape.is_empty() {
                "-".to_string()
            } else {
                t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            };
            s.push_str(&format!("tensor {} f32 {dims} {offset} {}\n", t.name, t.data.len()));
            offset += 4 * t.data.len();
        }
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() || t.name.contains(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("malformed tensor entry {}", t.name)));
            }
        }
        if self.meta.iter().any(|(k, v)| k.contains(char::is_whitespace) || v.contains('\n')) {
            return Err(Error::InvalidInput("meta keys may not contain whitespace".into()));
        }
        let manifest = self.manifest();
        let payload: usize = self.tensors.iter().map(|t| 4 * t.data.len()).sum();
        let mut out = Vec::with_capacity(20 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err("not a flowiid checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let manifest = bytes
            .get(20..20 + mlen)
            .ok_or("truncated manifest")?;
        let manifest = std::str::from_utf8(manifest).map_err(|e| format!("manifest not utf-8: {e}"))?;
        let payload = &bytes[20 + mlen..];

        let mut ckpt = Checkpoint::default();
        for (lineno, line) in manifest.lines().enumerate() {
            let bad = |what: &str| format!("manifest line {}: {what}: {line:?}", lineno + 1);
            let (head, rest) = line.split_once(' ').ok_or_else(|| bad("missing field"))?;
            match head {
                "kind" => ckpt.kind = rest.to_string(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 5 || f[1] != "f32" {
                        return Err(bad("expected `<name> f32 <dims> <offset> <count>`"));
                    }
                    let shape: Vec<usize> = if f[2] == "-" {
                        Vec::new()
                    } else {
                        f[2].split(',')
                            .map(|d| d.parse().map_err(|_| bad("bad dimension")))
                            .collect::<std::result::Result<_, _>>()?
                    };
                    let offset: usize = f[3].parse().map_err(|_| bad("bad offset"))?;
                    let count: usize = f[4].parse().map_err(|_| bad("bad count"))?;
                    if shape.iter().product::<usize>() != count {
                        return Err(bad("count disagrees with shape"));
                    }
                    let raw = payload
                        .get(offset..offset + 4 * count)
                        .ok_or_else(|| bad("payload out of range"))?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    ckpt.tensors.push(NamedTensor {
                        name: f[0].to_string(),
                        shape,
                        data,
                    });
                }
                _ => return Err(bad("unknown record")),
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}
