//! Checkpoint files: an index of (name, shape, offset) entries followed by
//! raw little-endian f32 data, plus the model config and a kind tag.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"VRCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Stage1,
    Stage2,
    Denoiser,
}

impl ModelKind {
    fn as_str(self) -> &'static str {
        match self {
            ModelKind::Stage1 => "stage1",
            ModelKind::Stage2 => "stage2",
            ModelKind::Denoiser => "denoiser",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(ModelKind::Stage1),
            "stage2" => Ok(ModelKind::Stage2),
            "denoiser" => Ok(ModelKind::Denoiser),
            other => Err(Error::Checkpoint(format!("unknown model kind {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Model config as JSON; the concrete type depends on `kind`.
    pub config: serde_json::Value,
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_store(
        kind: ModelKind,
        config: serde_json::Value,
        store: &ParamStore,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, shape, data) in store.export()? {
            entries.insert(name, (shape, data));
        }
        Ok(Checkpoint {
            kind,
            config,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut index: Vec<u8> = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        index
            .write_u32::<LittleEndian>(self.entries.len() as u32)
            .unwrap();
        for (name, (shape, data)) in &self.entries {
            let offset = blob.len() as u64;
            index.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            index.write_all(name.as_bytes()).unwrap();
            index.write_u32::<LittleEndian>(shape.len() as u32).unwrap();
            for &d in shape {
                index.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            index.write_u64::<LittleEndian>(offset).unwrap();
            for &v in data {
                blob.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        let cfg = serde_json::to_vec(&self.config)?;
        let kind = self.kind.as_str().as_bytes();
        let mut out: Vec<u8> = Vec::new();
        out.write_all(MAGIC).unwrap();
        out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        out.write_u32::<LittleEndian>(kind.len() as u32).unwrap();
        out.write_all(kind).unwrap();
        out.write_u32::<LittleEndian>(cfg.len() as u32).unwrap();
        out.write_all(&cfg).unwrap();
        out.write_all(&index).unwrap();
        out.write_u64::<LittleEndian>(blob.len() as u64).unwrap();
        out.write_all(&blob).unwrap();
        std::fs::write(path, out).map_err(|e| Error::io(path.to_path_buf(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        let mut cur = Cursor::new(&bytes);
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let read_bytes = |cur: &mut Cursor<&Vec<u8>>, len: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; len];
            cur.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("{}: truncated", path.display())))?;
            Ok(buf)
        };
        let kind_len = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
        let kind = String::from_utf8(read_bytes(&mut cur, kind_len)?)
            .map_err(|_| bad("invalid kind string"))?;
        let kind = ModelKind::parse(&kind)?;
        let cfg_len = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
        let config: serde_json::Value = serde_json::from_slice(&read_bytes(&mut cur, cfg_len)?)?;
        let count = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
        let mut meta: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
            let name = String::from_utf8(read_bytes(&mut cur, name_len)?)
                .map_err(|_| bad("invalid parameter name"))?;
            let ndims = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize);
            }
            let offset = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))?;
            meta.push((name, shape, offset));
        }
        let blob_len = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
        let blob = read_bytes(&mut cur, blob_len)?;
        let mut entries = BTreeMap::new();
        for (name, shape, offset) in meta {
            let numel: usize = shape.iter().product();
            let start = offset as usize;
            let end = start + numel * 4;
            if end > blob.len() {
                return Err(bad(&format!("entry {name} points past the data blob")));
            }
            let mut data = Vec::with_capacity(numel);
            let mut slice = Cursor::new(&blob[start..end]);
            for _ in 0..numel {
                data.push(slice.read_f32::<LittleEndian>().unwrap());
            }
            entries.insert(name, (shape, data));
        }
        Ok(Checkpoint {
            kind,
            config,
            entries,
        })
    }

    pub fn component_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .entries
            .keys()
            .map(|k| k.split('.').next().unwrap_or(k).to_string())
            .collect();
        out.dedup();
        out
    }

    pub fn has_component(&self, prefix: &str) -> bool {
        self.entries
            .keys()
            .any(|k| k.split('.').next() == Some(prefix))
    }
}
