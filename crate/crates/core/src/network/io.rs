//! Model file format.
//!
//! ```text
//! offset 0   8 bytes   magic "LSTMODEL"
//! offset 8   u32 LE    format version
//! offset 12  u64 LE    header length H
//! offset 20  H bytes   UTF-8 JSON header
//! offset 20+H          weight blocks, little-endian f64 or f32
//! ```
//!
//! The header records the state order, schema (and its SHA-256 hash),
//! normalization stats, weight precision, and per member its seed, architecture
//! and block table. Each block is one layer: `W` row-major (`rows × cols`)
//! followed by `b` (`rows`), at `offset` bytes from the start of the weight
//! section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Architecture, EnsembleModel, Layer, MlpParams};
use crate::error::{Error, Result};
use crate::pipeline::{FeatureSchema, NormalizationStats};
use crate::state::{state_order, K};

pub const MODEL_FILE_MAGIC: &[u8; 8] = b"LSTMODEL";
pub const MODEL_FILE_VERSION: u32 = 1;
const PREAMBLE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightPrecision {
    #[default]
    F64,
    F32,
}

impl WeightPrecision {
    fn width(self) -> usize {
        match self {
            WeightPrecision::F64 => 8,
            WeightPrecision::F32 => 4,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    state_order: Vec<String>,
    precision: WeightPrecision,
    schema_hash: String,
    schema: FeatureSchema,
    stats: NormalizationStats,
    members: Vec<MemberHeader>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MemberHeader {
    seed: u64,
    architecture: Architecture,
    blocks: Vec<Block>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Block {
    rows: usize,
    cols: usize,
    offset: u64,
}

pub fn serialize(model: &EnsembleModel, precision: WeightPrecision) -> Result<Vec<u8>> {
    let width = precision.width();
    let mut data = Vec::new();
    let mut members = Vec::with_capacity(model.members.len());
    for (m, &seed) in model.members.iter().zip(&model.member_seeds) {
        let mut blocks = Vec::with_capacity(m.layers.len());
        for l in &m.layers {
            blocks.push(Block {
                rows: l.w.nrows(),
                cols: l.w.ncols(),
                offset: data.len() as u64,
            });
            for &v in l.w.iter().chain(l.b.iter()) {
                match precision {
                    WeightPrecision::F64 => data.extend_from_slice(&v.to_le_bytes()),
                    WeightPrecision::F32 => data.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        debug_assert_eq!(data.len() % width, 0);
        members.push(MemberHeader {
            seed,
            architecture: m.arch.clone(),
            blocks,
        });
    }
    let header = Header {
        format: "loanstate-model".into(),
        state_order: state_order(),
        precision,
        schema_hash: model.schema.hash(),
        schema: model.schema.clone(),
        stats: model.stats.clone(),
        members,
        metadata: model.metadata.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + data.len());
    out.extend_from_slice(MODEL_FILE_MAGIC);
    out.extend_from_slice(&MODEL_FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

fn corrupt(offset: usize, message: impl Into<String>) -> Error {
    Error::Corrupt {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<EnsembleModel> {
    if bytes.len() < PREAMBLE {
        return Err(corrupt(bytes.len(), "file shorter than the fixed preamble"));
    }
    if &bytes[..8] != MODEL_FILE_MAGIC {
        return Err(corrupt(0, "bad magic bytes; not a model file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != MODEL_FILE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: MODEL_FILE_VERSION,
            offset: 8,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = PREAMBLE
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(bytes.len(), format!("header of {hlen} bytes runs past end of file")))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])
        .map_err(|e| corrupt(PREAMBLE, format!("unreadable header: {e}")))?;
    let names = state_order();
    if header.state_order != names {
        return Err(corrupt(PREAMBLE, format!("state order {:?} differs from {names:?}", header.state_order)));
    }
    let hash = header.schema.hash();
    if hash != header.schema_hash {
        return Err(corrupt(PREAMBLE, "recorded schema hash does not match the embedded schema"));
    }
    if header.members.is_empty() {
        return Err(corrupt(PREAMBLE, "model has no members"));
    }
    let width = header.precision.width();
    let data = &bytes[data_start..];
    let mut expected_end = 0usize;
    let mut members = Vec::with_capacity(header.members.len());
    let mut seeds = Vec::with_capacity(header.members.len());
    for (mi, mh) in header.members.iter().enumerate() {
        mh.architecture
            .validate()
            .map_err(|e| corrupt(PREAMBLE, format!("member {mi}: {e}")))?;
        let widths = mh.architecture.widths();
        if mh.blocks.len() != widths.len() - 1 || *widths.last().expect("non-empty") != K {
            return Err(corrupt(PREAMBLE, format!("member {mi}: block table does not match architecture")));
        }
        let mut layers = Vec::with_capacity(mh.blocks.len());
        for (l, b) in mh.blocks.iter().enumerate() {
            if (b.rows, b.cols) != (widths[l + 1], widths[l]) {
                return Err(corrupt(
                    data_start + b.offset as usize,
                    format!(
                        "member {mi} layer {l}: block shape {}x{} but architecture needs {}x{}",
                        b.rows,
                        b.cols,
                        widths[l + 1],
                        widths[l]
                    ),
                ));
            }
            let n = b.rows * b.cols + b.rows;
            let start = b.offset as usize;
            let end = start + n * width;
            if end > data.len() {
                return Err(corrupt(
                    data_start + data.len(),
                    format!("truncated weights: member {mi} layer {l} needs bytes up to {}", data_start + end),
                ));
            }
            let vals: Vec<f64> = data[start..end]
                .chunks_exact(width)
                .map(|c| match header.precision {
                    WeightPrecision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                    WeightPrecision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                })
                .collect();
            if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
                return Err(corrupt(data_start + start + i * width, "non-finite weight"));
            }
            let w = Array2::from_shape_vec((b.rows, b.cols), vals[..b.rows * b.cols].to_vec()).expect("sized");
            let bias = Array1::from(vals[b.rows * b.cols..].to_vec());
            layers.push(Layer { w, b: bias });
            expected_end = expected_end.max(end);
        }
        members.push(MlpParams {
            arch: mh.architecture.clone(),
            layers,
        });
        seeds.push(mh.seed);
    }
    if expected_end != data.len() {
        return Err(corrupt(
            data_start + expected_end,
            format!("{} trailing bytes after the last weight block", data.len() - expected_end),
        ));
    }
    let mut model = EnsembleModel::new(members, seeds, header.schema, header.stats)
        .map_err(|e| corrupt(PREAMBLE, e.to_string()))?;
    model.metadata = header.metadata;
    Ok(model)
}

/// Like [`deserialize`], refusing files whose schema hash differs from `expected_hash`.
pub fn deserialize_expecting(bytes: &[u8], expected_hash: &str) -> Result<EnsembleModel> {
    let model = deserialize(bytes)?;
    let found = model.schema.hash();
    if found != expected_hash {
        return Err(Error::SchemaMismatch {
            expected: expected_hash.to_string(),
            found,
        });
    }
    Ok(model)
}

pub fn write_model_file(path: &Path, model: &EnsembleModel, precision: WeightPrecision) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, serialize(model, precision)?)?;
    Ok(())
}

pub fn read_model_file(path: &Path) -> Result<EnsembleModel> {
    deserialize(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, Activation, TransitionModel};
    use crate::pipeline::{FieldSpec, SourceGroup};

    fn model() -> EnsembleModel {
        let schema = FeatureSchema::new(vec![
            FieldSpec::state(),
            FieldSpec::numeric("a", SourceGroup::Origination),
            FieldSpec::optional("b", SourceGroup::Performance),
        ])
        .unwrap();
        let d = schema.d_x();
        let arch = Architecture::new(d, vec![5, 4], Activation::Tanh).with_dropout(1.0, 0.5);
        let m1 = init_params(&arch, 1).unwrap();
        let m2 = init_params(&arch, 2).unwrap();
        EnsembleModel::new(vec![m1, m2], vec![1, 2], schema, NormalizationStats::identity(d)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = model();
        let back = deserialize(&serialize(&m, WeightPrecision::F64).unwrap()).unwrap();
        assert_eq!(back, m);
        let x = Array2::from_shape_fn((3, m.input_dim()), |(i, j)| (i as f64 - j as f64) * 0.3);
        assert_eq!(back.predict_batch(x.view()), m.predict_batch(x.view()));
    }

    #[test]
    fn f32_storage_rounds_weights() {
        let m = model();
        let back = deserialize(&serialize(&m, WeightPrecision::F32).unwrap()).unwrap();
        assert_eq!(back.members[0], m.members[0].rounded_to_f32());
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let bytes = serialize(&model(), WeightPrecision::F64).unwrap();
        for cut in [5, 15, 40, bytes.len() - 3] {
            assert!(matches!(deserialize(&bytes[..cut]), Err(Error::Corrupt { .. })), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(deserialize(&longer), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn version_and_schema_checks() {
        let m = model();
        let mut bytes = serialize(&m, WeightPrecision::F64).unwrap();
        assert!(deserialize_expecting(&bytes, &m.schema.hash()).is_ok());
        assert!(matches!(deserialize_expecting(&bytes, "deadbeef"), Err(Error::SchemaMismatch { .. })));
        bytes[8] = 9;
        assert!(matches!(
            deserialize(&bytes),
            Err(Error::VersionMismatch { found: 9, offset: 8, .. })
        ));
    }
}
