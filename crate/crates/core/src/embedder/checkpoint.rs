//! Binary checkpoint holding the embedder and the classifier.
//!
//! ```text
//! magic "FSCILCKP" | version u32 | config digest [32]
//! config json len u32 | config json
//! frozen u8
//! tensor count u32 | { name len u32 | name | rank u32 | dims u64.. | f64.. }
//! class count u32 | class ids u64.. | boundary count u32 | boundaries u64..
//! sha-256 of everything above [32]
//! ```
//!
//! All integers and floats little-endian. Classifier `mu` and `sigma` are
//! stored in the tensor table as `classifier.mu` / `classifier.sigma`.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{EmbedderConfig, EmbedderError, EmbedderParams};
use crate::classifier::StochasticClassifier;
use crate::diffmath::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSCILCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint version {found} not supported (reader is version {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch or truncated file")]
    CorruptChecksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Embedder(#[from] EmbedderError),
}

/// SHA-256 of the embedder config's JSON form.
pub fn config_digest(config: &EmbedderConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serialises");
    Sha256::digest(&json).into()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not utf-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| CheckpointError::Malformed("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

fn encode(params: &EmbedderParams, classifier: &StochasticClassifier, version: u32) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(version);
    w.0.extend_from_slice(&config_digest(params.config()));
    w.bytes(&serde_json::to_vec(params.config()).expect("config serialises"));
    w.0.push(params.is_frozen() as u8);

    let mut tensors: Vec<(String, Tensor)> = params
        .names()
        .iter()
        .cloned()
        .zip(params.tensors().iter().cloned())
        .collect();
    if let (Ok(mu), Ok(sigma)) = (classifier.mu_matrix(), classifier.sigma_matrix()) {
        tensors.push(("classifier.mu".into(), mu));
        tensors.push(("classifier.sigma".into(), sigma));
    }
    w.u32(tensors.len() as u32);
    for (name, t) in &tensors {
        w.tensor(name, t);
    }
    w.u64(classifier.dim() as u64);
    w.u32(classifier.num_classes() as u32);
    for &c in classifier.class_ids() {
        w.u64(c as u64);
    }
    w.u32(classifier.session_boundaries().len() as u32);
    for &b in classifier.session_boundaries() {
        w.u64(b as u64);
    }
    let checksum = Sha256::digest(&w.0);
    w.0.extend_from_slice(&checksum);
    w.0
}

fn decode(bytes: &[u8], expected_version: u32) -> Result<(EmbedderParams, StochasticClassifier), CheckpointError> {
    if bytes.len() < 32 + 8 + 4 {
        return Err(CheckpointError::CorruptChecksum);
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(CheckpointError::CorruptChecksum);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Malformed("bad magic".into()));
    }
    let version = r.u32()?;
    if version != expected_version {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: expected_version,
        });
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let config: EmbedderConfig =
        serde_json::from_slice(r.bytes()?).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    if config_digest(&config) != digest {
        return Err(CheckpointError::Malformed("config digest mismatch".into()));
    }
    let frozen = r.take(1)?[0] != 0;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        named.push(r.tensor()?);
    }
    let mut mu = None;
    let mut sigma = None;
    named.retain(|(name, t)| match name.as_str() {
        "classifier.mu" => {
            mu = Some(t.clone());
            false
        }
        "classifier.sigma" => {
            sigma = Some(t.clone());
            false
        }
        _ => true,
    });
    let params = EmbedderParams::from_named(config, named, frozen)?;

    let dim = r.u64()? as usize;
    let n_classes = r.u32()? as usize;
    let class_ids = (0..n_classes)
        .map(|_| r.u64().map(|c| c as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let n_bounds = r.u32()? as usize;
    let boundaries = (0..n_bounds)
        .map(|_| r.u64().map(|b| b as usize))
        .collect::<Result<Vec<_>, _>>()?;
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    let columns = |t: Option<Tensor>| -> Result<Vec<Vec<f64>>, CheckpointError> {
        match t {
            None if n_classes == 0 => Ok(Vec::new()),
            Some(t) if t.shape() == [dim, n_classes] => Ok((0..n_classes).map(|j| t.column(j)).collect()),
            _ => Err(CheckpointError::Malformed("classifier tensors do not match class table".into())),
        }
    };
    let classifier = StochasticClassifier::from_parts(dim, columns(mu)?, columns(sigma)?, class_ids, boundaries)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok((params, classifier))
}

pub fn write_checkpoint(params: &EmbedderParams, classifier: &StochasticClassifier) -> Vec<u8> {
    encode(params, classifier, CHECKPOINT_VERSION)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(EmbedderParams, StochasticClassifier), CheckpointError> {
    decode(bytes, CHECKPOINT_VERSION)
}

pub fn save_checkpoint(
    params: &EmbedderParams,
    classifier: &StochasticClassifier,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    std::fs::write(path, write_checkpoint(params, classifier))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EmbedderParams, StochasticClassifier), CheckpointError> {
    read_checkpoint(&std::fs::read(path)?)
}
