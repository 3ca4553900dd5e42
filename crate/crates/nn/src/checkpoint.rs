//! Parameter checkpoints: one line of JSON naming every tensor and its shape
//! in serialization order, a newline, then all values as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "gaidrl-params";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes named parameter groups; tensor names become `group/name`.
pub fn encode_checkpoint(groups: &[(&str, &ParamSet)]) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut values = Vec::new();
    for (group, set) in groups {
        for (name, t) in set.iter() {
            tensors.push(TensorEntry {
                name: format!("{group}/{name}"),
                shape: t.shape().to_vec(),
            });
            values.extend_from_slice(t.data());
        }
    }
    let header = CheckpointHeader {
        format: FORMAT_TAG.to_string(),
        version: 1,
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NnError::Format("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
    if header.format != FORMAT_TAG {
        return Err(NnError::Format(format!("unknown format tag {:?}", header.format)));
    }
    let body = &bytes[split + 1..];
    let expected: usize = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if body.len() != expected * 8 {
        return Err(NnError::Format(format!(
            "header lists {expected} values, body holds {} bytes",
            body.len()
        )));
    }
    let mut floats = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    header
        .tensors
        .into_iter()
        .map(|e| {
            let n = e.shape.iter().product();
            let data: Vec<f64> = floats.by_ref().take(n).collect();
            Ok((e.name, Tensor::new(e.shape, data)?))
        })
        .collect()
}

pub fn write_checkpoint(path: &Path, groups: &[(&str, &ParamSet)]) -> Result<()> {
    fs::write(path, encode_checkpoint(groups)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Copies the tensors of `group` out of a decoded checkpoint into `set`.
pub fn restore_group(entries: &[(String, Tensor)], group: &str, set: &mut ParamSet) -> Result<()> {
    let names: Vec<String> = set.names().to_vec();
    for name in names {
        let key = format!("{group}/{name}");
        let (_, t) = entries
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| NnError::Format(format!("checkpoint lacks {key}")))?;
        let dst = set.get_mut(&name).expect("name from set");
        if dst.shape() != t.shape() {
            return Err(NnError::Shape(format!(
                "{key}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
