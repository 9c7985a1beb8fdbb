//! Gzipped single-file archives: a JSON header followed by raw little-endian tensors.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use voxgrad::{AdamState, NamedTensors, StoredTensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ULFCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    index: Vec<(String, Vec<usize>)>,
}

/// Metadata plus a flat namespace of tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Archive {
    pub fn new(meta: &impl Serialize) -> Result<Self> {
        Ok(Self {
            meta: serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
            tensors: BTreeMap::new(),
        })
    }

    pub fn meta<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn put(&mut self, prefix: &str, group: &NamedTensors) {
        for (k, v) in &group.0 {
            self.tensors.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    pub fn take(&self, prefix: &str) -> NamedTensors {
        let p = format!("{prefix}/");
        NamedTensors(
            self.tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v.clone())))
                .collect(),
        )
    }

    pub fn has(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    /// Stores Adam moments under `<prefix>.m` / `<prefix>.v`; the step goes in the metadata.
    pub fn put_adam(&mut self, prefix: &str, state: &AdamState) {
        self.put(&format!("{prefix}.m"), &state.m);
        self.put(&format!("{prefix}.v"), &state.v);
    }

    pub fn take_adam(&self, prefix: &str, step: u64) -> AdamState {
        AdamState {
            step,
            m: self.take(&format!("{prefix}.m")),
            v: self.take(&format!("{prefix}.v")),
        }
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let unwritable = |source| Error::Unwritable {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(unwritable)?;
        }
        let tmp = tmp_path(path);
        let header = Header {
            meta: self.meta.clone(),
            index: self.tensors.iter().map(|(k, v)| (k.clone(), v.shape.clone())).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let write = || -> std::io::Result<()> {
            let mut gz = GzEncoder::new(BufWriter::new(File::create(&tmp)?), Compression::fast());
            gz.write_all(MAGIC)?;
            gz.write_all(&(json.len() as u64).to_le_bytes())?;
            gz.write_all(&json)?;
            for t in self.tensors.values() {
                for x in &t.data {
                    gz.write_all(&x.to_le_bytes())?;
                }
            }
            gz.finish()?.flush()
        };
        write().map_err(unwritable)?;
        fs::rename(&tmp, path).map_err(unwritable)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bad = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
        let mut r = GzDecoder::new(BufReader::new(File::open(path).map_err(bad)?));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint", path.display())));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(bad)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(bad)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        let mut buf = [0u8; 8];
        for (name, shape) in header.index {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(bad)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.insert(name, StoredTensor { shape, data });
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Where a training run checkpoints, and whether it picks up from an earlier one.
#[derive(Clone, Debug, Default)]
pub struct RunControl {
    /// Directory for `<stem>.ckpt` and `<stem>_log.csv`; nothing is written when `None`.
    pub dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop (after checkpointing) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

impl RunControl {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub fn checkpoint_path(&self, stem: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{stem}.ckpt")))
    }

    pub fn log_path(&self, stem: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{stem}_log.csv")))
    }

    /// The archive to resume from, if resuming is on and one exists.
    pub fn resume_from(&self, stem: &str) -> Result<Option<Archive>> {
        match self.checkpoint_path(stem) {
            Some(p) if self.resume && p.is_file() => Archive::load(&p).map(Some),
            _ => Ok(None),
        }
    }

    pub fn should_stop(&self, epochs_done: usize) -> bool {
        self.stop_after.is_some_and(|n| epochs_done >= n)
    }
}

/// Writes `rows` under `header` as CSV.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Unwritable {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut a = Archive::new(&serde_json::json!({"epoch": 3})).unwrap();
        let mut g = NamedTensors::default();
        g.0.insert(
            "w".into(),
            StoredTensor {
                shape: vec![2, 2],
                data: vec![1.0, -0.5, f64::MIN_POSITIVE, 1e300],
            },
        );
        a.put("weights", &g);
        a.save(&path).unwrap();
        let b = Archive::load(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.take("weights"), g);
        assert!(!b.has("best"));
    }

    #[test]
    fn rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut gz = GzEncoder::new(File::create(&path).unwrap(), Compression::fast());
        gz.write_all(b"not a checkpoint at all").unwrap();
        gz.finish().unwrap();
        assert!(matches!(Archive::load(&path), Err(Error::Checkpoint(_))));
    }
}
