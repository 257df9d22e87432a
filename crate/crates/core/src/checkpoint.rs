//! Parameter archives and their JSON sidecars.
//!
//! Archive layout (little endian): magic `SCKP`, format version `u32`,
//! tensor count `u32`, then per tensor: name length `u32`, UTF-8 name,
//! kind `u8`, rank `u32`, dims `u64 × rank`, values `f64 × len`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{build_model, Model, ModelError, ModelSpec, ParamGroup};
use crate::nn::ParamKind;

const MAGIC: &[u8; 4] = b"SCKP";
const FORMAT_VERSION: u32 = 1;

/// Batch-norm statistics are frozen together with the weights of a frozen layer.
pub const BN_POLICY: &str = "frozen-with-weights";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub spec_hash: String,
    pub truncation: usize,
    pub truncation_cut: String,
    pub class_names: Vec<String>,
    pub parameter_count: usize,
    pub bn_policy: String,
    /// Path of the JSONL training history, if any.
    pub history: Option<String>,
    /// Free-form origin, e.g. `whole/stage2/final`.
    pub label: Option<String>,
    /// SHA-256 of the archive bytes.
    pub archive_sha256: String,
}

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::Scale => 2,
        ParamKind::Shift => 3,
        ParamKind::RunningMean => 4,
        ParamKind::RunningVar => 5,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sidecar_path(archive: &Path) -> PathBuf {
    let mut s = archive.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encode(model: &Model) -> Vec<u8> {
    let params = model.named_params();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(params.len() as u32).unwrap();
    for (name, p) in params {
        buf.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        buf.extend_from_slice(name.as_bytes());
        buf.push(kind_code(p.kind));
        buf.write_u32::<LittleEndian>(p.value.ndim() as u32).unwrap();
        for d in p.value.shape() {
            buf.write_u64::<LittleEndian>(*d as u64).unwrap();
        }
        for v in p.value.iter() {
            buf.write_f64::<LittleEndian>(*v).unwrap();
        }
    }
    buf
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = BufWriter::new(fs::File::create(&tmp).map_err(io_err(&tmp))?);
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.into_inner()
            .map_err(|e| io_err(&tmp)(e.into_error()))?
            .sync_all()
            .map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes `archive` and its sidecar; returns the sidecar contents.
pub fn save_checkpoint(
    model: &Model,
    archive: &Path,
    history: Option<&Path>,
    label: Option<&str>,
) -> Result<CheckpointMeta, ModelError> {
    let bytes = encode(model);
    let spec = model.spec().clone();
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        spec_hash: spec.hash(),
        truncation: spec.backbone.truncation,
        truncation_cut: spec.backbone.describe_cut()?,
        class_names: model.class_names().to_vec(),
        parameter_count: model.parameter_count(),
        bn_policy: BN_POLICY.to_string(),
        history: history.map(|h| h.display().to_string()),
        label: label.map(str::to_string),
        archive_sha256: hex::encode(Sha256::digest(&bytes)),
        spec,
    };
    write_atomic(archive, &bytes)?;
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    write_atomic(&sidecar_path(archive), &json)?;
    Ok(meta)
}

fn read_err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn decode(bytes: &[u8]) -> Result<BTreeMap<String, ArrayD<f64>>, ModelError> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| read_err("truncated header"))?;
    if &magic != MAGIC {
        return Err(read_err("not a parameter archive"));
    }
    let short = |_| read_err("archive is truncated");
    let version = r.read_u32::<LittleEndian>().map_err(short)?;
    if version != FORMAT_VERSION {
        return Err(read_err(format!("unsupported archive version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(short)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        if r.len() < len {
            return Err(read_err("archive is truncated"));
        }
        let name = String::from_utf8(r[..len].to_vec()).map_err(|_| read_err("tensor name is not UTF-8"))?;
        r = &r[len..];
        let _kind = r.read_u8().map_err(short)?;
        let rank = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u64::<LittleEndian>().map_err(short)? as usize);
        }
        let n: usize = dims.iter().product();
        if r.len() < n * 8 {
            return Err(read_err("archive is truncated"));
        }
        let mut values = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut values).map_err(short)?;
        let t = ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| read_err(e.to_string()))?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Reads every tensor from an archive.
pub fn read_archive(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>, ModelError> {
    let mut bytes = Vec::new();
    BufReader::new(
        fs::File::open(path).map_err(|e| ModelError::WeightsUnavailable(format!("{}: {e}", path.display())))?,
    )
    .read_to_end(&mut bytes)
    .map_err(io_err(path))?;
    decode(&bytes)
}

pub fn read_meta(archive: &Path) -> Result<CheckpointMeta, ModelError> {
    let side = sidecar_path(archive);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    serde_json::from_str(&text).map_err(|e| read_err(format!("{}: {e}", side.display())))
}

/// Rebuilds a model from an archive and its sidecar, verifying the archive digest.
pub fn load_checkpoint(archive: &Path) -> Result<(Model, CheckpointMeta), ModelError> {
    let meta = read_meta(archive)?;
    let bytes = fs::read(archive).map_err(io_err(archive))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != meta.archive_sha256 {
        return Err(read_err(format!(
            "{} does not match its sidecar digest",
            archive.display()
        )));
    }
    let tensors = decode(&bytes)?;
    let mut spec = meta.spec.clone();
    spec.backbone.pretrained = false;
    let mut model = build_model(spec)?.with_class_names(meta.class_names.clone())?;
    for group in [ParamGroup::Backbone, ParamGroup::Added, ParamGroup::Final] {
        model.load_group(&tensors, group)?;
    }
    model.set_spec(meta.spec.clone());
    Ok((model, meta))
}
