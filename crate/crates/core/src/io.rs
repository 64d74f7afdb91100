//! Versioned, checksummed binary container for named tensors.
//!
//! One format backs every on-disk model artifact (GAN checkpoints, trained
//! classifiers, pretrained backbone weights): a magic tag, a format version,
//! the scalar kind, a JSON metadata blob, the tensor table, and a trailing
//! SHA-256 over everything before it. Writes go through a temp file and a
//! rename so a crash never leaves a half-written artifact behind.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::{Scalar, ScalarKind};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("artifact file missing: {0}")]
    FileMissing(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic in {0}: not an artifact of the expected type")]
    BadMagic(PathBuf),
    #[error("unsupported artifact format version {0}")]
    UnsupportedVersion(u32),
    #[error("artifact scalar kind {found} does not match expected {expected}")]
    ScalarKindMismatch { expected: ScalarKind, found: String },
    #[error("checksum mismatch in {0}: file corrupt or tampered")]
    ChecksumMismatch(PathBuf),
    #[error("artifact truncated: {0}")]
    Truncated(String),
    #[error("tensor {0} missing from artifact")]
    MissingTensor(String),
}

/// Decoded artifact: metadata JSON plus named tensors in file order.
#[derive(Debug, Clone)]
pub struct Artifact<T: Scalar> {
    pub meta_json: String,
    pub tensors: Vec<(String, ArrayD<T>)>,
}

impl<T: Scalar> Artifact<T> {
    pub fn tensor(&self, name: &str) -> Result<&ArrayD<T>, ArtifactError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ArtifactError::MissingTensor(name.to_string()))
    }

    pub fn take_tensor(&mut self, name: &str) -> Result<ArrayD<T>, ArtifactError> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| ArtifactError::MissingTensor(name.to_string()))?;
        Ok(self.tensors.remove(idx).1)
    }
}

/// Serializes to an in-memory buffer (digest included).
pub fn encode_artifact<T: Scalar>(
    magic: &[u8; 8],
    meta_json: &str,
    tensors: &[(String, &ArrayD<T>)],
) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(T::KIND.code());
    let meta = meta_json.as_bytes();
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, tensor) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(tensor.ndim() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let data = tensor
            .as_standard_layout();
        for &v in data.iter() {
            v.write_le(&mut buf);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Writes an artifact atomically (temp file + rename).
pub fn write_artifact<T: Scalar>(
    path: &Path,
    magic: &[u8; 8],
    meta_json: &str,
    tensors: &[(String, &ArrayD<T>)],
) -> Result<(), ArtifactError> {
    let buf = encode_artifact(magic, meta_json, tensors);
    let tmp = path.with_extension("tmp");
    let io_err = |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&buf).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

/// Reads and fully verifies an artifact.
pub fn read_artifact<T: Scalar>(path: &Path, magic: &[u8; 8]) -> Result<Artifact<T>, ArtifactError> {
    let mut f = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ArtifactError::FileMissing(path.to_path_buf()))
        }
        Err(e) => {
            return Err(ArtifactError::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }
    };
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_artifact(&buf, magic, path)
}

fn decode_artifact<T: Scalar>(
    buf: &[u8],
    magic: &[u8; 8],
    path: &Path,
) -> Result<Artifact<T>, ArtifactError> {
    if buf.len() < 8 + 4 + 1 + 32 {
        return Err(ArtifactError::Truncated("header".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    let computed = Sha256::digest(body);
    if computed.as_slice() != digest {
        return Err(ArtifactError::ChecksumMismatch(path.to_path_buf()));
    }
    if &body[..8] != magic {
        return Err(ArtifactError::BadMagic(path.to_path_buf()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ArtifactError::UnsupportedVersion(version));
    }
    let kind_code = body[12];
    if kind_code != T::KIND.code() {
        let found = match ScalarKind::from_code(kind_code) {
            Some(k) => k.to_string(),
            None => format!("unknown({kind_code})"),
        };
        return Err(ArtifactError::ScalarKindMismatch {
            expected: T::KIND,
            found,
        });
    }

    let mut pos = 13usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], ArtifactError> {
        if *pos + n > body.len() {
            return Err(ArtifactError::Truncated(format!("offset {pos}")));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let meta_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let meta_json = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
        .map_err(|_| ArtifactError::Truncated("metadata not utf-8".into()))?;
    let n_tensors = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;

    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| ArtifactError::Truncated("tensor name not utf-8".into()))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(&mut pos, count * T::BYTES)?;
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            data.push(T::read_le(&raw[i * T::BYTES..]));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|_| ArtifactError::Truncated(format!("tensor {name} shape")))?;
        tensors.push((name, arr));
    }

    Ok(Artifact {
        meta_json,
        tensors,
    })
}

/// Hex SHA-256 of a byte string. Used for config fingerprints and for
/// integrity checks over in-memory parameter sets.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
