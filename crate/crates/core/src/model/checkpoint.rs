//! Binary checkpoint format.
//!
//! ```text
//! "NMOS" | version u32 | header_len u32 | header JSON
//!        | tensor_count u32 | records... | digest u64
//! record = name_len u32 | name | ndim u32 | dims u32... | f32 data
//! ```
//!
//! All integers and floats are little-endian. The digest is the first eight
//! bytes of SHA-256 over everything before it. Optimizer moments, when
//! present, are stored as extra records `optim.m/<param>` and
//! `optim.v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Architecture, Network};
use crate::autograd::{Adam, AdamConfig, Tensor};
use crate::features::FeatureConfig;

pub const MAGIC: &[u8; 4] = b"NMOS";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "optim.m/";
const MOMENT_V: &str = "optim.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint digest mismatch: stored {stored:016x}, computed {computed:016x}")]
    DigestMismatch { stored: u64, computed: u64 },
    #[error("invalid checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    TensorShape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("{0} bytes after the digest")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
}

/// JSON header: everything needed to rebuild the network plus free-form
/// training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub architecture: Architecture,
    pub features: FeatureConfig,
    pub seed: u64,
    pub metadata: BTreeMap<String, String>,
    pub optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub network: Network<f32>,
    pub optimizer: Option<Adam<f32>>,
}

impl Checkpoint {
    pub fn new(network: Network<f32>, seed: u64, metadata: BTreeMap<String, String>) -> Self {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            architecture: network.arch.clone(),
            features: network.features.clone(),
            seed,
            metadata,
            optimizer: None,
        };
        Self { header, network, optimizer: None }
    }

    pub fn with_optimizer(mut self, adam: Adam<f32>) -> Self {
        let c = adam.config;
        self.header.optimizer =
            Some(OptimizerHeader { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, steps: adam.steps() });
        self.optimizer = Some(adam);
        self
    }
}

fn digest(bytes: &[u8]) -> u64 {
    let hash = Sha256::digest(bytes);
    u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len());
    for &d in shape {
        put_u32(out, d);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&ckpt.header).expect("header serializes");
    put_u32(&mut out, header.len());
    out.extend_from_slice(&header);

    let mut records: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    for (name, t) in ckpt.network.params.iter() {
        records.push((name.to_string(), t.shape().to_vec(), t.data()));
    }
    if let Some(adam) = &ckpt.optimizer {
        for (prefix, moments) in [(MOMENT_M, adam.first_moments()), (MOMENT_V, adam.second_moments())] {
            for (name, data) in moments {
                let shape = ckpt.network.params.get(name).map(|t| t.shape().to_vec()).unwrap_or(vec![data.len()]);
                records.push((format!("{prefix}{name}"), shape, data));
            }
        }
    }
    put_u32(&mut out, records.len());
    for (name, shape, data) in &records {
        put_record(&mut out, name, shape, data);
    }
    let d = digest(&out);
    out.extend_from_slice(&d.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

fn read_header(r: &mut Reader) -> Result<CheckpointHeader, CheckpointError> {
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let len = r.u32("header length")?;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != version {
        return Err(CheckpointError::Header("header version disagrees with file version".into()));
    }
    if header.architecture != Architecture::for_features(&header.features) {
        return Err(CheckpointError::Header("architecture does not match the feature configuration".into()));
    }
    Ok(header)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated("digest"));
    }
    let mut r = Reader { bytes, pos: 0 };
    let header = read_header(&mut r)?;

    let count = r.u32("tensor count")?;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name")?;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| CheckpointError::Header("tensor name is not UTF-8".into()))?;
        let ndim = r.u32("tensor shape")?;
        let shape = (0..ndim).map(|_| r.u32("tensor shape")).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated("tensor data"))?;
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?, "tensor data")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        records.insert(name, (shape, data));
    }
    let body_end = r.pos;
    let stored = u64::from_le_bytes(r.take(8, "digest")?.try_into().expect("8 bytes"));
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    let computed = digest(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::DigestMismatch { stored, computed });
    }

    let mut network = Network::<f32>::zeroed(header.features.clone());
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    let mut loaded = std::collections::BTreeSet::new();
    for (name, (shape, data)) in records {
        let (target, key) = if let Some(p) = name.strip_prefix(MOMENT_M) {
            (&mut first, p.to_string())
        } else if let Some(p) = name.strip_prefix(MOMENT_V) {
            (&mut second, p.to_string())
        } else {
            let t = network.params.get_mut(&name).map_err(|_| CheckpointError::UnexpectedTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::TensorShape { name, found: shape, expected: t.shape().to_vec() });
            }
            let trainable = t.requires_grad();
            *t = Tensor::new(shape, data).expect("shape checked").with_requires_grad(trainable);
            loaded.insert(name);
            continue;
        };
        let expected = network.params.get(&key).map_err(|_| CheckpointError::UnexpectedTensor(name.clone()))?;
        if expected.shape() != shape.as_slice() {
            return Err(CheckpointError::TensorShape { name, found: shape, expected: expected.shape().to_vec() });
        }
        target.insert(key, data);
    }
    if let Some(missing) = network.params.names().find(|n| !loaded.contains(*n)) {
        return Err(CheckpointError::MissingTensor(missing.to_string()));
    }

    let optimizer = header.optimizer.as_ref().map(|o| {
        Adam::from_state(AdamConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps }, o.steps, first, second)
    });
    Ok(Checkpoint { header, network, optimizer })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&bytes)
}

/// Reads only the magic, version and JSON header.
pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHeader, CheckpointError> {
    use std::io::Read;
    let path = path.as_ref();
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut file = std::fs::File::open(path).map_err(io)?;
    let mut prefix = [0u8; 12];
    let mut got = 0;
    while got < 12 {
        let n = file.read(&mut prefix[got..]).map_err(io)?;
        if n == 0 {
            break;
        }
        got += n;
    }
    let mut r = Reader { bytes: &prefix[..got], pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let len = r.u32("header length")?;
    let mut buf = prefix[..got].to_vec();
    buf.resize(12 + len, 0);
    file.read_exact(&mut buf[12..]).map_err(|_| CheckpointError::Truncated("header"))?;
    read_header(&mut Reader { bytes: &buf, pos: 0 })
}
