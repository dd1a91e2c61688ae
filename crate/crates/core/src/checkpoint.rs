//! Checkpoint container: a JSON manifest (format version, model dimensions,
//! vocabulary, tensor layout) followed by flat little-endian f32 parameter
//! blobs in manifest order.
//!
//! The student and the distillation head live in separate sections; the
//! inference path loads a checkpoint whose head section is absent or was
//! stripped.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{DistillError, DistillHead, HeadConfig};
use crate::model::{ModelConfig, ModelError, StudentModel, Vocab};
use crate::tensor::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated blob: expected {expected} bytes, found {found}")]
    TruncatedBlob { expected: usize, found: usize },
    #[error("manifest/blob size disagreement: manifest declares {expected} bytes, file carries {found}")]
    SizeDisagreement { expected: usize, found: usize },
    #[error("checkpoint has no {0:?} section")]
    MissingSection(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Section {
    name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_width: Option<usize>,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model: ModelConfig,
    vocab: Vec<String>,
    sections: Vec<Section>,
}

const STUDENT_SECTION: &str = "student";
const HEAD_SECTION: &str = "head";

fn section_for(name: &str, params: &ParamSet) -> Section {
    Section {
        name: name.to_string(),
        margin: None,
        hidden_width: None,
        tensors: params
            .iter()
            .map(|(n, t)| TensorMeta {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    }
}

fn blob_bytes(params: &ParamSet, out: &mut Vec<u8>) {
    for (_, tensor) in params.iter() {
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

/// Serialize a checkpoint, atomically (write temp file, then rename).
pub fn save_checkpoint(
    path: &Path,
    student: &StudentModel,
    head: Option<&DistillHead>,
) -> Result<(), CheckpointError> {
    let mut sections = vec![section_for(STUDENT_SECTION, &student.params)];
    if let Some(head) = head {
        let mut section = section_for(HEAD_SECTION, &head.params);
        section.margin = Some(head.cfg.margin);
        section.hidden_width = Some(head.cfg.hidden_width);
        sections.push(section);
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        model: student.cfg,
        vocab: student.vocab.symbols().to_vec(),
        sections,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    blob_bytes(&student.params, &mut bytes);
    if let Some(head) = head {
        blob_bytes(&head.params, &mut bytes);
    }

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_manifest(bytes: &[u8]) -> Result<(Manifest, usize), CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::TruncatedBlob {
            expected: 4,
            found: bytes.len(),
        });
    }
    let manifest_len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let header_end = 4 + manifest_len;
    if bytes.len() < header_end {
        return Err(CheckpointError::TruncatedBlob {
            expected: header_end,
            found: bytes.len(),
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[4..header_end])
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: manifest.version,
        });
    }
    Ok((manifest, header_end))
}

fn declared_payload(manifest: &Manifest) -> usize {
    manifest
        .sections
        .iter()
        .flat_map(|s| s.tensors.iter())
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum()
}

fn read_section(section: &Section, payload: &[u8], offset: &mut usize) -> ParamSet {
    let mut params = ParamSet::new();
    for meta in &section.tensors {
        let len: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let at = *offset + i * 4;
            let raw: [u8; 4] = payload[at..at + 4].try_into().expect("bounds checked");
            data.push(f32::from_le_bytes(raw) as f64);
        }
        *offset += len * 4;
        params.insert(
            meta.name.clone(),
            Tensor::new(meta.shape.clone(), data).expect("shape matches collected data"),
        );
    }
    params
}

/// Load a checkpoint: the student model plus the head when its section is
/// present.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(StudentModel, Option<DistillHead>), CheckpointError> {
    let bytes = fs::read(path)?;
    let (manifest, header_end) = parse_manifest(&bytes)?;
    let payload = &bytes[header_end..];
    let expected = declared_payload(&manifest);
    if payload.len() < expected {
        return Err(CheckpointError::TruncatedBlob {
            expected: header_end + expected,
            found: bytes.len(),
        });
    }
    if payload.len() > expected {
        return Err(CheckpointError::SizeDisagreement {
            expected: header_end + expected,
            found: bytes.len(),
        });
    }

    let vocab = Vocab::from_symbols(manifest.vocab.clone())?;
    let mut offset = 0;
    let mut student = None;
    let mut head = None;
    for section in &manifest.sections {
        let params = read_section(section, payload, &mut offset);
        match section.name.as_str() {
            STUDENT_SECTION => {
                student = Some(StudentModel::from_parts(
                    manifest.model,
                    vocab.clone(),
                    params,
                )?);
            }
            HEAD_SECTION => {
                let cfg = HeadConfig {
                    embed_width: manifest.model.width,
                    hidden_width: section.hidden_width.unwrap_or(manifest.model.width),
                    margin: section.margin.unwrap_or(1.0),
                };
                head = Some(DistillHead::from_parts(cfg, params)?);
            }
            other => {
                return Err(CheckpointError::Manifest(format!(
                    "unknown section {other:?}"
                )));
            }
        }
    }
    let student = student.ok_or(CheckpointError::MissingSection(STUDENT_SECTION))?;
    Ok((student, head))
}

/// Inference view: the student alone, whether or not a head is stored.
pub fn load_student(path: &Path) -> Result<StudentModel, CheckpointError> {
    Ok(load_checkpoint(path)?.0)
}

/// Copy a checkpoint with the head section (manifest entry and blob bytes)
/// removed.
pub fn strip_head(src: &Path, dst: &Path) -> Result<(), CheckpointError> {
    let bytes = fs::read(src)?;
    let (manifest, header_end) = parse_manifest(&bytes)?;
    let payload = &bytes[header_end..];

    let mut offset = 0;
    let mut kept_sections = Vec::new();
    let mut kept_payload = Vec::new();
    for section in &manifest.sections {
        let len: usize = section
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum();
        if section.name != HEAD_SECTION {
            kept_sections.push(section.clone());
            kept_payload.extend_from_slice(&payload[offset..offset + len]);
        }
        offset += len;
    }
    let stripped = Manifest {
        version: manifest.version,
        model: manifest.model,
        vocab: manifest.vocab,
        sections: kept_sections,
    };
    let manifest_json =
        serde_json::to_vec(&stripped).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&kept_payload);
    let tmp = dst.with_extension("tmp");
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, dst)?;
    Ok(())
}
