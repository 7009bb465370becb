//! Binary checkpoints: every parameter tensor with its name and shape,
//! guarded by a digest of the model configuration that produced it.
//!
//! Writes go through a temporary file in the destination directory and are
//! atomically renamed into place, so a crash mid-save never corrupts an
//! existing checkpoint.

use std::error::Error;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::autodiff::Array;
use crate::model::{ModelConfig, Params};

const MAGIC: &[u8; 4] = b"POGD";
const VERSION: u32 = 1;
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 2;

#[derive(Debug)]
pub enum CheckpointError {
    Io {
        path: PathBuf,
        source: io::Error,
    },
    Format {
        path: PathBuf,
        message: String,
    },
    ConfigMismatch {
        path: PathBuf,
    },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, source } => {
                write!(f, "checkpoint i/o error at {}: {source}", path.display())
            }
            CheckpointError::Format { path, message } => {
                write!(f, "malformed checkpoint {}: {message}", path.display())
            }
            CheckpointError::ConfigMismatch { path } => write!(
                f,
                "checkpoint {} was written under a different model configuration",
                path.display()
            ),
        }
    }
}

impl Error for CheckpointError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            CheckpointError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Digest of the configuration, pinned into every checkpoint header.
pub fn config_digest(config: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("model config is always serializable");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    hasher.finalize().into()
}

/// Serialize the parameters to `path` atomically.
pub fn save(path: &Path, config: &ModelConfig, params: &Params<f32>) -> Result<(), CheckpointError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .map_err(io_err(path))?;

    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        w.write_all(MAGIC).map_err(io_err(path))?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io_err(path))?;
        w.write_all(&config_digest(config)).map_err(io_err(path))?;
        w.write_u32::<LittleEndian>(params.map.len() as u32)
            .map_err(io_err(path))?;
        for (name, tensor) in &params.map {
            let bytes = name.as_bytes();
            w.write_u32::<LittleEndian>(bytes.len() as u32)
                .map_err(io_err(path))?;
            w.write_all(bytes).map_err(io_err(path))?;
            w.write_u32::<LittleEndian>(tensor.shape.len() as u32)
                .map_err(io_err(path))?;
            for dim in &tensor.shape {
                w.write_u32::<LittleEndian>(*dim as u32).map_err(io_err(path))?;
            }
            for v in &tensor.data {
                w.write_f32::<LittleEndian>(*v).map_err(io_err(path))?;
            }
        }
        w.flush().map_err(io_err(path))?;
    }

    tmp.persist(path)
        .map_err(|e| CheckpointError::Io {
            path: path.to_path_buf(),
            source: e.error,
        })?;
    Ok(())
}

/// Load a checkpoint, refusing anything whose header digest does not match
/// the supplied configuration.
pub fn load(path: &Path, config: &ModelConfig) -> Result<Params<f32>, CheckpointError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(format_err(path, "bad magic bytes"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err(path))?;
    if version != VERSION {
        return Err(format_err(
            path,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest).map_err(io_err(path))?;
    if digest != config_digest(config) {
        return Err(CheckpointError::ConfigMismatch {
            path: path.to_path_buf(),
        });
    }

    let count = r.read_u32::<LittleEndian>().map_err(io_err(path))?;
    let mut map = IndexMap::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(io_err(path))?;
        if name_len > MAX_NAME_LEN {
            return Err(format_err(path, format!("tensor name of {name_len} bytes")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes).map_err(io_err(path))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| format_err(path, "tensor name is not valid utf-8"))?;

        let rank = r.read_u32::<LittleEndian>().map_err(io_err(path))?;
        if rank == 0 || rank > MAX_RANK {
            return Err(format_err(path, format!("tensor '{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel = 1usize;
        for _ in 0..rank {
            let dim = r.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
            if dim == 0 {
                return Err(format_err(path, format!("tensor '{name}' has a zero dimension")));
            }
            numel = numel.saturating_mul(dim);
            shape.push(dim);
        }
        if numel > (1 << 28) {
            return Err(format_err(path, format!("tensor '{name}' is implausibly large")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f32::<LittleEndian>().map_err(io_err(path))?);
        }
        if map.insert(name.clone(), Array { shape, data }).is_some() {
            return Err(format_err(path, format!("duplicate tensor '{name}'")));
        }
    }

    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(format_err(path, "trailing bytes after the last tensor")),
        Err(e) => return Err(io_err(path)(e)),
    }

    Ok(Params { map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_config;

    fn sample_params() -> (ModelConfig, Params<f32>) {
        let config = test_config();
        let slots = vec!["food".to_string(), "area".to_string()];
        let params = Params::init(&config, &slots, 7).unwrap();
        (config, params)
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, params) = sample_params();
        save(&path, &config, &params).unwrap();
        let loaded = load(&path, &config).unwrap();

        assert_eq!(params.map.len(), loaded.map.len());
        for ((n1, t1), (n2, t2)) in params.map.iter().zip(loaded.map.iter()) {
            assert_eq!(n1, n2, "tensor order must be preserved");
            assert_eq!(t1.shape, t2.shape);
            assert_eq!(t1.data, t2.data, "payload must round-trip bit-exactly");
        }
    }

    #[test]
    fn config_change_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, params) = sample_params();
        save(&path, &config, &params).unwrap();

        let mut other = config.clone();
        other.d_h += 1;
        let err = load(&path, &other).unwrap_err();
        assert!(matches!(err, CheckpointError::ConfigMismatch { .. }));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, params) = sample_params();
        save(&path, &config, &params).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load(&path, &config).is_err());
    }

    #[test]
    fn garbage_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"NOPEnope").unwrap();
        let (config, _) = sample_params();
        let err = load(&path, &config).unwrap_err();
        assert!(matches!(err, CheckpointError::Format { .. }));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, params) = sample_params();
        save(&path, &config, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path, &config).unwrap_err();
        assert!(err.to_string().contains("trailing"));
    }

    #[test]
    fn save_replaces_existing_checkpoint_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, mut params) = sample_params();
        save(&path, &config, &params).unwrap();
        params.map["classifier.out.b"].data[0] = 42.0;
        save(&path, &config, &params).unwrap();
        let loaded = load(&path, &config).unwrap();
        assert_eq!(loaded.map["classifier.out.b"].data[0], 42.0);
        // No stray temp files should remain.
        let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }
}
