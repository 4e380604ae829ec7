//! Versioned binary checkpoint container: a JSON config header plus named
//! f64 arrays, bit-exact across write/read.
//!
//! Layout: magic `TLCKPT01`, u32 config-JSON length, config JSON, u32 entry
//! count, then per entry: u32 name length, name, u8 rank, u64 dims,
//! little-endian f64 data.

use crate::encoder::{EncoderConfig, EncoderModel, ParamMut, ParamRef, ParamSet};
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"TLCKPT01";

/// A named array loaded from a container.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    V(Array1<f64>),
    M(Array2<f64>),
}

impl Entry {
    pub fn as_vec(&self) -> Option<&Array1<f64>> {
        match self {
            Entry::V(v) => Some(v),
            Entry::M(_) => None,
        }
    }

    pub fn as_mat(&self) -> Option<&Array2<f64>> {
        match self {
            Entry::M(m) => Some(m),
            Entry::V(_) => None,
        }
    }
}

/// Writes a container with an arbitrary JSON header and named arrays.
pub fn save_container(
    path: &Path,
    config_json: &str,
    entries: &[(String, Entry)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let cj = config_json.as_bytes();
    buf.extend_from_slice(&(cj.len() as u32).to_le_bytes());
    buf.extend_from_slice(cj);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, e) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        match e {
            Entry::V(v) => {
                buf.push(1);
                buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
                for x in v.iter() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            Entry::M(m) => {
                buf.push(2);
                buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
                buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
                for x in m.iter() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Reads a container back as (config JSON, named arrays).
pub fn load_container(path: &Path) -> Result<(String, BTreeMap<String, Entry>)> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint container", path.display())));
    }
    let clen = r.u32()? as usize;
    let config_json = String::from_utf8(r.take(clen)?.to_vec())
        .map_err(|_| Error::Format("config header is not UTF-8".into()))?;
    let n = r.u32()? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..n {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let rank = r.take(1)?[0];
        let entry = match rank {
            1 => {
                let len = r.u64()? as usize;
                Entry::V(Array1::from_vec(r.f64s(len)?))
            }
            2 => {
                let rows = r.u64()? as usize;
                let cols = r.u64()? as usize;
                Entry::M(
                    Array2::from_shape_vec((rows, cols), r.f64s(rows * cols)?)
                        .map_err(|e| Error::Format(e.to_string()))?,
                )
            }
            other => return Err(Error::Format(format!("unknown entry rank {other}"))),
        };
        entries.insert(name, entry);
    }
    Ok((config_json, entries))
}

fn model_entries(params: &ParamSet, prefix: &str) -> Vec<(String, Entry)> {
    let mut out = Vec::new();
    params.for_each(&mut |name, p| {
        let full = if prefix.is_empty() { name } else { format!("{prefix}{name}") };
        out.push((
            full,
            match p {
                ParamRef::V(v) => Entry::V(v.clone()),
                ParamRef::M(m) => Entry::M(m.clone()),
            },
        ));
    });
    out
}

/// Saves an encoder model plus optional extra named arrays (heads, etc.).
pub fn save_model(path: &Path, model: &EncoderModel, extra: &[(String, Entry)]) -> Result<()> {
    let config_json = serde_json::to_string(&model.config)
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut entries = model_entries(&model.params, "");
    entries.extend(extra.iter().cloned());
    save_container(path, &config_json, &entries)
}

/// Loads an encoder model; extra arrays come back for the caller to claim.
pub fn load_model(path: &Path) -> Result<(EncoderModel, BTreeMap<String, Entry>)> {
    let (config_json, mut entries) = load_container(path)?;
    let config: EncoderConfig =
        serde_json::from_str(&config_json).map_err(|e| Error::Format(e.to_string()))?;
    config.validate()?;
    let mut params = ParamSet::zeros(&config);
    let mut missing = Vec::new();
    params.for_each_mut(&mut |name, p| match entries.remove(&name) {
        Some(Entry::V(v)) => {
            if let ParamMut::V(dst) = p {
                if dst.len() == v.len() {
                    dst.assign(&v);
                    return;
                }
            }
            missing.push(format!("{name} (shape mismatch)"));
        }
        Some(Entry::M(m)) => {
            if let ParamMut::M(dst) = p {
                if dst.dim() == m.dim() {
                    dst.assign(&m);
                    return;
                }
            }
            missing.push(format!("{name} (shape mismatch)"));
        }
        None => missing.push(name),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint missing or mismatched parameters: {}",
            missing.join(", ")
        )));
    }
    Ok((EncoderModel { config, params }, entries))
}

/// SHA-256 of a file, hex-encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, EncoderModel};

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = EncoderConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            input_dim: 8,
            ..Default::default()
        };
        let model = EncoderModel::init(cfg, 42).unwrap();
        let head = (
            "head.w".to_string(),
            Entry::M(Array2::from_shape_fn((16, 9), |(i, j)| (i * 9 + j) as f64 * 0.01)),
        );
        save_model(&path, &model, &[head.clone()]).unwrap();
        let (loaded, extra) = load_model(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params.to_flat(), model.params.to_flat());
        assert_eq!(extra.get("head.w"), Some(&head.1));
        // Byte-stable on re-save.
        let path2 = dir.path().join("m2.ckpt");
        save_model(&path2, &loaded, &[head]).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxx").unwrap();
        assert!(load_container(&path).is_err());
    }
}
