//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.txt    encoder config, key = value
//! <dir>/tensors.bin   every tensor as little-endian f32, concatenated
//! <dir>/manifest.txt  tensor.<name> = <dims> @ <byte offset>, metadata,
//!                     sha256 of blob and config, then a sha256 over the
//!                     manifest lines above it
//! ```
//!
//! Optimizer moments, when present, are stored as `optimizer.m.<name>` and
//! `optimizer.v.<name>` tensors in the same blob.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::IxDyn;
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::kv::KvDocument;
use crate::optim::{OptimizerSettings, OptimizerState};

pub const CONFIG_FILE: &str = "config.txt";
pub const BLOB_FILE: &str = "tensors.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT: &str = "ligero-checkpoint-1";
const TENSOR_PREFIX: &str = "tensor.";
const META_PREFIX: &str = "meta.";
const M_PREFIX: &str = "optimizer.m.";
const V_PREFIX: &str = "optimizer.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub optimizer: Option<OptimizerState>,
    /// Free-form run metadata (step, optimizer variant, seed, ...).
    pub metadata: KvDocument,
}

impl Checkpoint {
    pub fn new(params: ParameterSet) -> Self {
        Self {
            params,
            optimizer: None,
            metadata: KvDocument::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
}

pub fn save(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_text = ckpt.params.config().to_kv().render();

    let mut tensors: Vec<(String, &Tensor)> = ckpt.params.iter().map(|(k, t)| (k.to_string(), t)).collect();
    if let Some(opt) = &ckpt.optimizer {
        tensors.extend(opt.first_moments().map(|(k, t)| (format!("{M_PREFIX}{k}"), t)));
        tensors.extend(opt.second_moments().map(|(k, t)| (format!("{V_PREFIX}{k}"), t)));
    }

    let mut manifest = KvDocument::new();
    manifest.set("format", FORMAT);
    manifest.set("dtype", "f32-le");
    let mut blob = Vec::new();
    for (name, tensor) in &tensors {
        manifest.set(
            &format!("{TENSOR_PREFIX}{name}"),
            format!("{} @ {}", shape_text(tensor.shape()), blob.len()),
        );
        for &x in tensor.iter() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if let Some(opt) = &ckpt.optimizer {
        for (k, v) in opt.settings().to_kv().entries() {
            manifest.set(&format!("optimizer.{k}"), v);
        }
        manifest.set("optimizer.step", opt.step());
    }
    for (k, v) in ckpt.metadata.entries() {
        manifest.set(&format!("{META_PREFIX}{k}"), v);
    }
    manifest.set("blob_bytes", blob.len());
    manifest.set("blob_sha256", sha256_hex(&blob));
    manifest.set("config_sha256", sha256_hex(config_text.as_bytes()));
    let body = manifest.render();
    let manifest_text = format!("{body}manifest_sha256 = {}\n", sha256_hex(body.as_bytes()));

    write(&dir.join(CONFIG_FILE), config_text.as_bytes())?;
    write(&dir.join(BLOB_FILE), &blob)?;
    write(&dir.join(MANIFEST_FILE), manifest_text.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_entry(path: &Path, name: &str, value: &str) -> Result<(Vec<usize>, usize)> {
    let (dims, offset) = value
        .split_once('@')
        .ok_or_else(|| corrupt(path, format!("entry {name} lacks an offset")))?;
    let shape = dims
        .trim()
        .split('x')
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| corrupt(path, format!("bad shape for {name}")))?;
    let offset = offset
        .trim()
        .parse()
        .map_err(|_| corrupt(path, format!("bad offset for {name}")))?;
    Ok((shape, offset))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_bytes = read(&manifest_path)?;
    let manifest_text =
        String::from_utf8(manifest_bytes).map_err(|_| corrupt(&manifest_path, "manifest is not UTF-8"))?;
    let body_end = manifest_text
        .rfind("manifest_sha256 = ")
        .ok_or_else(|| corrupt(&manifest_path, "manifest hash missing"))?;
    let (body, tail) = manifest_text.split_at(body_end);
    let recorded = tail.trim_start_matches("manifest_sha256 = ").trim_end_matches('\n');
    if recorded != sha256_hex(body.as_bytes()) || !body.ends_with('\n') {
        return Err(corrupt(&manifest_path, "manifest hash mismatch"));
    }
    let manifest = KvDocument::parse(body).map_err(|e| corrupt(&manifest_path, e.to_string()))?;
    if manifest.get("format") != Some(FORMAT) || manifest.get("dtype") != Some("f32-le") {
        return Err(corrupt(&manifest_path, "unsupported format"));
    }

    let config_path = dir.join(CONFIG_FILE);
    let config_bytes = read(&config_path)?;
    if manifest.get("config_sha256") != Some(sha256_hex(&config_bytes).as_str()) {
        return Err(corrupt(&config_path, "config hash mismatch"));
    }
    let config_text = String::from_utf8(config_bytes).map_err(|_| corrupt(&config_path, "config is not UTF-8"))?;
    let config = EncoderConfig::from_kv(&KvDocument::parse(&config_text)?)?;

    let blob_path = dir.join(BLOB_FILE);
    let blob = read(&blob_path)?;
    if manifest.get("blob_sha256") != Some(sha256_hex(&blob).as_str())
        || manifest.get("blob_bytes") != Some(blob.len().to_string().as_str())
    {
        return Err(corrupt(&blob_path, "blob hash mismatch"));
    }

    let mut params = BTreeMap::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    let mut metadata = KvDocument::new();
    let mut expected_offset = 0usize;
    for (key, value) in manifest.entries() {
        if let Some(meta) = key.strip_prefix(META_PREFIX) {
            metadata.set(meta, value);
            continue;
        }
        let Some(name) = key.strip_prefix(TENSOR_PREFIX) else {
            continue;
        };
        let (shape, offset) = parse_entry(&manifest_path, name, value)?;
        let numel: usize = shape.iter().product();
        let end = offset + 4 * numel;
        if offset != expected_offset || end > blob.len() {
            return Err(corrupt(&manifest_path, format!("{name} overlaps or overruns the blob")));
        }
        expected_offset = end;
        let data: Vec<f64> = blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Tensor::from_shape_vec(IxDyn(&shape), data).expect("length checked");
        if let Some(base) = name.strip_prefix(M_PREFIX) {
            first.insert(base.to_string(), tensor);
        } else if let Some(base) = name.strip_prefix(V_PREFIX) {
            second.insert(base.to_string(), tensor);
        } else {
            params.insert(name.to_string(), tensor);
        }
    }
    if expected_offset != blob.len() {
        return Err(corrupt(&blob_path, "trailing bytes in blob"));
    }
    let params = ParameterSet::from_tensors(config, params).map_err(|e| corrupt(&manifest_path, e.to_string()))?;

    let optimizer = match manifest.get("optimizer.step") {
        None => None,
        Some(step) => {
            let step = step
                .parse()
                .map_err(|_| corrupt(&manifest_path, "bad optimizer step"))?;
            let mut settings_doc = KvDocument::new();
            for (k, v) in manifest.entries() {
                if let Some(rest) = k.strip_prefix("optimizer.") {
                    if rest != "step" && !rest.starts_with("m.") && !rest.starts_with("v.") {
                        settings_doc.set(rest, v);
                    }
                }
            }
            let settings = OptimizerSettings::from_kv(&settings_doc)?;
            Some(
                OptimizerState::from_parts(settings, step, first, second, &params)
                    .map_err(|e| corrupt(&manifest_path, e.to_string()))?,
            )
        }
    };

    Ok(Checkpoint {
        params,
        optimizer,
        metadata,
    })
}

/// Rounds every value to the nearest f32 so that a subsequent save/load is
/// lossless.
pub fn round_to_storage(params: &mut ParameterSet) {
    for (_, t) in params.iter_mut() {
        t.mapv_inplace(|x| x as f32 as f64);
    }
}
