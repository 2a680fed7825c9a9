//! Binary activation dump: the interchange file between an extraction
//! front end and this crate.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "ACTV"            4 bytes
//! version           u32
//! manifest length   u32
//! manifest          UTF-8 JSON
//! tensor record*    u32 name length, name, u32 rank, u64 dims[rank], f32 payload
//! ```
//!
//! Records run to end of file. Payloads are row-major.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ActivationDataset, AttentionRows, ContextRecord, TokenGroup, TokenId};
use crate::error::{Error, Result};
use crate::pipeline::tokens::TokenAnnotation;

pub const MAGIC: [u8; 4] = *b"ACTV";
pub const VERSION: u32 = 1;
pub const MLP_TENSOR: &str = "mlp_activations";
pub const ATTENTION_TENSOR: &str = "attention";

const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("not an activation dump: expected magic \"ACTV\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported dump version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated header: {0}")]
    TruncatedHeader(&'static str),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("truncated payload in tensor '{tensor}': expected {expected} bytes, found {found}")]
    TruncatedPayload { tensor: String, expected: u64, found: u64 },
    #[error("truncated record after tensor '{after}'")]
    TruncatedRecord { after: String },
    #[error("dimension mismatch in tensor '{tensor}': {detail}")]
    DimensionMismatch { tensor: String, detail: String },
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("duplicate tensor '{0}'")]
    DuplicateTensor(String),
    #[error("invalid dump content: {0}")]
    Invalid(String),
}

/// One context of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestContext {
    pub tokens: Vec<TokenId>,
    pub target: usize,
    pub group: Option<TokenGroup>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub model: String,
    #[serde(default)]
    pub tokenizer: Option<String>,
    /// Layer whose MLP activations are stored.
    pub mlp_layer: usize,
    /// Layers whose attention rows are stored, in tensor order.
    #[serde(default)]
    pub attention_layers: Vec<usize>,
    pub contexts: Vec<ManifestContext>,
    /// Token counts of the reference corpus.
    #[serde(default)]
    pub token_frequencies: BTreeMap<TokenId, u64>,
    #[serde(default)]
    pub surfaces: BTreeMap<TokenId, String>,
    #[serde(default)]
    pub annotations: BTreeMap<TokenId, TokenAnnotation>,
    /// Set when part-of-speech tags could not be produced.
    #[serde(default)]
    pub annotation_degraded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f32>) -> Result<Tensor> {
        let name = name.into();
        let n: u64 = dims.iter().product();
        if n != data.len() as u64 {
            return Err(DumpError::DimensionMismatch {
                tensor: name,
                detail: format!("dims {dims:?} hold {n} values but {} were given", data.len()),
            }
            .into());
        }
        Ok(Tensor { name, dims, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub version: u32,
    pub manifest: DumpManifest,
    pub tensors: Vec<Tensor>,
}

impl ActivationDump {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| DumpError::Manifest(e.to_string()))?;
        w.write_all(&MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(&manifest)?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for d in &t.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * t.data.len());
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(r: &mut impl Read) -> Result<ActivationDump> {
        let mut magic = [0u8; 4];
        let got = read_up_to(r, &mut magic)?;
        if got < 4 || magic != MAGIC {
            return Err(DumpError::BadMagic {
                found: magic[..got].to_vec(),
            }
            .into());
        }
        let version = read_u32(r).map_err(|_| DumpError::TruncatedHeader("version"))?;
        if version != VERSION {
            return Err(DumpError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            }
            .into());
        }
        let len = read_u32(r).map_err(|_| DumpError::TruncatedHeader("manifest length"))?;
        let mut manifest = vec![0u8; len as usize];
        if read_up_to(r, &mut manifest)? < manifest.len() {
            return Err(DumpError::TruncatedHeader("manifest").into());
        }
        let manifest: DumpManifest =
            serde_json::from_slice(&manifest).map_err(|e| DumpError::Manifest(e.to_string()))?;

        let mut tensors: Vec<Tensor> = Vec::new();
        loop {
            let after = tensors.last().map_or_else(|| "manifest".to_string(), |t| t.name.clone());
            let truncated = || DumpError::TruncatedRecord { after: after.clone() };
            let mut len_bytes = [0u8; 4];
            match read_up_to(r, &mut len_bytes)? {
                0 => break,
                4 => {}
                _ => return Err(truncated().into()),
            }
            let name_len = u32::from_le_bytes(len_bytes);
            if name_len > MAX_NAME_LEN {
                return Err(DumpError::Invalid(format!("tensor name of {name_len} bytes")).into());
            }
            let mut name = vec![0u8; name_len as usize];
            if read_up_to(r, &mut name)? < name.len() {
                return Err(truncated().into());
            }
            let name = String::from_utf8(name).map_err(|_| DumpError::Invalid("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r).map_err(|_| truncated())?;
            if rank > MAX_RANK {
                return Err(DumpError::DimensionMismatch {
                    tensor: name,
                    detail: format!("rank {rank} exceeds {MAX_RANK}"),
                }
                .into());
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                if read_up_to(r, &mut b)? < 8 {
                    return Err(truncated().into());
                }
                dims.push(u64::from_le_bytes(b));
            }
            let expected = dims
                .iter()
                .try_fold(4u64, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| DumpError::DimensionMismatch {
                    tensor: name.clone(),
                    detail: format!("dims {dims:?} overflow"),
                })?;
            let mut payload = Vec::new();
            let found = r.by_ref().take(expected).read_to_end(&mut payload)? as u64;
            if found < expected {
                return Err(DumpError::TruncatedPayload {
                    tensor: name,
                    expected,
                    found,
                }
                .into());
            }
            if tensors.iter().any(|t| t.name == name) {
                return Err(DumpError::DuplicateTensor(name).into());
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        Ok(ActivationDump {
            version,
            manifest,
            tensors,
        })
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

fn read_u32(r: &mut impl Read) -> std::result::Result<u32, ()> {
    let mut b = [0u8; 4];
    match read_up_to(r, &mut b) {
        Ok(4) => Ok(u32::from_le_bytes(b)),
        _ => Err(()),
    }
}

pub fn write_dump(path: &Path, dump: &ActivationDump) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    dump.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<ActivationDump> {
    ActivationDump::read_from(&mut BufReader::new(File::open(path)?))
}

/// Reads and validates a dump.
pub fn ingest_dump(path: &Path) -> Result<(ActivationDataset, DumpManifest)> {
    let dump = read_dump(path)?;
    let dataset = dataset_from_dump(&dump)?;
    Ok((dataset, dump.manifest))
}

fn mismatch(tensor: &str, detail: String) -> Error {
    DumpError::DimensionMismatch {
        tensor: tensor.to_string(),
        detail,
    }
    .into()
}

/// Checks every dump invariant and builds the in-memory dataset.
pub fn dataset_from_dump(dump: &ActivationDump) -> Result<ActivationDataset> {
    let m = &dump.manifest;
    let n_ctx = m.contexts.len();
    if n_ctx == 0 {
        return Err(DumpError::Invalid("manifest lists no contexts".into()).into());
    }
    for t in &dump.tensors {
        let n: u64 = t.dims.iter().product();
        if n != t.data.len() as u64 {
            return Err(mismatch(&t.name, format!("dims {:?} but {} values", t.dims, t.data.len())));
        }
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(DumpError::Invalid(format!("tensor '{}' has a non-finite value at {i}", t.name)).into());
        }
    }
    let mlp = dump
        .tensor(MLP_TENSOR)
        .ok_or_else(|| DumpError::MissingTensor(MLP_TENSOR.into()))?;
    if mlp.dims.len() != 2 {
        return Err(mismatch(MLP_TENSOR, format!("rank {} (expected contexts x neurons)", mlp.dims.len())));
    }
    if mlp.dims[0] != n_ctx as u64 {
        return Err(mismatch(
            MLP_TENSOR,
            format!("{} rows but the manifest lists {n_ctx} contexts", mlp.dims[0]),
        ));
    }
    let n_neurons = mlp.dims[1] as usize;
    if n_neurons == 0 {
        return Err(mismatch(MLP_TENSOR, "zero neurons".into()));
    }
    let activations = DMatrix::from_fn(n_neurons, n_ctx, |r, c| mlp.data[c * n_neurons + r] as f64);

    let contexts: Vec<ContextRecord> = m
        .contexts
        .iter()
        .map(|c| ContextRecord {
            tokens: c.tokens.clone(),
            target: c.target,
            group: c.group,
            loss: c.loss,
        })
        .collect();

    let attention = match dump.tensor(ATTENTION_TENSOR) {
        None => None,
        Some(t) => {
            if t.dims.len() != 4 {
                return Err(mismatch(
                    ATTENTION_TENSOR,
                    format!("rank {} (expected contexts x layers x heads x keys)", t.dims.len()),
                ));
            }
            if t.dims[0] != n_ctx as u64 {
                return Err(mismatch(
                    ATTENTION_TENSOR,
                    format!("{} rows but the manifest lists {n_ctx} contexts", t.dims[0]),
                ));
            }
            if t.dims[1] != m.attention_layers.len() as u64 {
                return Err(mismatch(
                    ATTENTION_TENSOR,
                    format!("{} layers but the manifest names {}", t.dims[1], m.attention_layers.len()),
                ));
            }
            let rows = AttentionRows {
                layers: m.attention_layers.clone(),
                n_heads: t.dims[2] as usize,
                key_len: t.dims[3] as usize,
                data: t.data.iter().map(|v| *v as f64).collect(),
            };
            for (c, ctx) in contexts.iter().enumerate() {
                if ctx.target >= rows.key_len {
                    return Err(mismatch(
                        ATTENTION_TENSOR,
                        format!("context {c} targets position {} beyond {} keys", ctx.target, rows.key_len),
                    ));
                }
                for li in 0..rows.layers.len() {
                    for h in 0..rows.n_heads {
                        let row = rows.row(c, li, h);
                        let total: f64 = row[..=ctx.target].iter().sum();
                        if (total - 1.0).abs() > crate::routing::ROW_SUM_TOLERANCE || row.iter().any(|v| *v < 0.0) {
                            return Err(DumpError::Invalid(format!(
                                "attention row of context {c}, layer {}, head {h} sums to {total}",
                                rows.layers[li]
                            ))
                            .into());
                        }
                    }
                }
            }
            Some(rows)
        }
    };
    let dataset = ActivationDataset {
        layer: m.mlp_layer,
        activations,
        contexts,
        attention,
    };
    dataset.validate().map_err(|e| DumpError::Invalid(e.to_string()))?;
    Ok(dataset)
}

/// Dump of a dataset; values are stored as `f32`.
pub fn dump_from_dataset(dataset: &ActivationDataset, mut manifest: DumpManifest) -> Result<ActivationDump> {
    dataset.validate()?;
    manifest.mlp_layer = dataset.layer;
    manifest.contexts = dataset
        .contexts
        .iter()
        .map(|c| ManifestContext {
            tokens: c.tokens.clone(),
            target: c.target,
            group: c.group,
            loss: c.loss,
        })
        .collect();
    let (n, c) = dataset.activations.shape();
    let mut data = Vec::with_capacity(n * c);
    for ctx in 0..c {
        data.extend(dataset.activations.column(ctx).iter().map(|v| *v as f32));
    }
    let mut tensors = vec![Tensor::new(MLP_TENSOR, vec![c as u64, n as u64], data)?];
    if let Some(rows) = &dataset.attention {
        manifest.attention_layers = rows.layers.clone();
        tensors.push(Tensor::new(
            ATTENTION_TENSOR,
            vec![c as u64, rows.layers.len() as u64, rows.n_heads as u64, rows.key_len as u64],
            rows.data.iter().map(|v| *v as f32).collect(),
        )?);
    } else {
        manifest.attention_layers.clear();
    }
    Ok(ActivationDump {
        version: VERSION,
        manifest,
        tensors,
    })
}
