//! Named-tensor checkpoint archive.
//!
//! Layout: magic "CSFK1", entry count (u32 LE), then per entry: name length
//! (u32 LE) + UTF-8 name, dtype code (u8), rank (u8), extents (u64 LE each),
//! raw little-endian values. The model config travels as a JSON sidecar next
//! to the archive (`<path>.json`).

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element, Tensor};

const MAGIC: &[u8; 5] = b"CSFK1";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Serialize named tensors in archive order.
pub fn save_archive<E: Element>(path: &Path, entries: &[(String, Tensor<E>)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(E::DTYPE.code());
        buf.push(t.rank() as u8);
        for &ext in t.shape() {
            buf.extend_from_slice(&(ext as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.to_le_bytes(&mut buf);
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("archive truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Load an archive written with the same element type.
pub fn load_archive<E: Element>(path: &Path) -> Result<Vec<(String, Tensor<E>)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    if cur.take(5)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a CSFK1 archive (bad magic)",
            path.display()
        )));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let code = cur.u8()?;
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        if dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "entry `{name}` has dtype {dtype:?}, expected {:?}",
                E::DTYPE
            )));
        }
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = E::DTYPE.byte_width();
        let raw = cur.take(numel * width)?;
        let data: Vec<E> = raw.chunks_exact(width).map(E::from_le_slice).collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(out)
}

/// Save model parameters (plus any extra named tensors such as optimizer
/// state or the MAEIP head) with the config sidecar.
pub fn save_model<E: Element>(
    path: &Path,
    cfg: &ModelConfig,
    params: &ModelParams<E>,
    extra: &[(String, Tensor<E>)],
) -> Result<()> {
    let mut entries = params.leaves();
    entries.extend(extra.iter().cloned());
    save_archive(path, &entries)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

pub struct LoadedModel<E: Element> {
    pub config: ModelConfig,
    pub params: ModelParams<E>,
    /// Archive entries that are not model parameters (optimizer state, head).
    pub extra: HashMap<String, Tensor<E>>,
    /// Parameter names absent from the archive (left at fresh init).
    pub missing: Vec<String>,
    /// Parameter names that were initialized from the archive.
    pub loaded: Vec<String>,
}

/// Load a model checkpoint. With `strict` every model parameter must be
/// present; otherwise a partial load (e.g. an encoder-only MAEIP checkpoint
/// into a full model) reports what matched and what stayed fresh.
pub fn load_model<E: Element>(path: &Path, strict: bool) -> Result<LoadedModel<E>> {
    let sidecar = sidecar_path(path);
    let cfg_text = fs::read_to_string(&sidecar).map_err(|e| {
        Error::Checkpoint(format!("missing config sidecar {}: {e}", sidecar.display()))
    })?;
    let config: ModelConfig = serde_json::from_str(&cfg_text)?;
    let entries = load_archive::<E>(path)?;
    let all_names: Vec<String> = entries.iter().map(|(n, _)| n.clone()).collect();
    let map: HashMap<String, Tensor<E>> = entries.into_iter().collect();
    let (params, missing, leftover) = ModelParams::from_named(&config, map, strict, 0xC5F0)?;
    let leftover_set: std::collections::HashSet<&str> =
        leftover.iter().map(|s| s.as_str()).collect();
    let loaded: Vec<String> = all_names
        .iter()
        .filter(|n| !leftover_set.contains(n.as_str()))
        .cloned()
        .collect();
    // Re-load leftovers as extra entries.
    let extra: HashMap<String, Tensor<E>> = load_archive::<E>(path)?
        .into_iter()
        .filter(|(n, _)| leftover_set.contains(n.as_str()))
        .collect();
    Ok(LoadedModel {
        config,
        params,
        extra,
        missing,
        loaded,
    })
}
