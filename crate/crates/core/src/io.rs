//! File formats used by the command-line tool and the experiment reports.
//!
//! Tensors are JSON documents `{"shape": [a1, ..., aN], "data": [...]}` with
//! row-major data, marginals are a JSON list of probability vectors and
//! partitions are a JSON list of 0-based axis lists. Floats are written with
//! 17 significant digits so every value reads back bit-for-bit. All writes go
//! through a temporary file in the target directory followed by a rename.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sinkhorn::DualPotentials;
use crate::tensor::{DenseTensor, MarginalFamily, TuplePartition};

/// `v` with 17 significant digits in scientific notation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `contents` to `path` atomically, creating parent directories.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(contents).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Serializes `value` as pretty JSON and writes it atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| format_err(path, format!("cannot serialize: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

fn push_list(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, &v) in values.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&fmt_f64(v));
    }
    out.push(']');
}

pub fn tensor_to_json(t: &DenseTensor) -> String {
    let mut out = String::from("{\"shape\": [");
    for (i, a) in t.shape().iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{a}");
    }
    out.push_str("], \"data\": ");
    push_list(&mut out, t.data());
    out.push_str("}\n");
    out
}

pub fn write_tensor(path: &Path, t: &DenseTensor) -> Result<()> {
    write_atomic(path, tensor_to_json(t).as_bytes())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorFile {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn read_tensor(path: &Path) -> Result<DenseTensor> {
    let file: TensorFile = parse(path)?;
    let expected: usize = file.shape.iter().product();
    if file.data.len() != expected {
        return Err(format_err(
            path,
            format!(
                "field \"data\": length mismatch, {} entries but shape {:?} needs {expected}",
                file.data.len(),
                file.shape
            ),
        ));
    }
    if let Some(a) = file.shape.iter().position(|&a| a == 0) {
        return Err(format_err(path, format!("field \"shape\": extent {a} is zero")));
    }
    DenseTensor::new(file.shape, file.data).map_err(|e| format_err(path, e.to_string()))
}

pub fn read_marginals(path: &Path) -> Result<MarginalFamily> {
    let mu: Vec<Vec<f64>> = parse(path)?;
    MarginalFamily::new(mu).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_marginals(path: &Path, mu: &MarginalFamily) -> Result<()> {
    let mut out = String::from("[");
    for (i, m) in mu.as_slice().iter().enumerate() {
        out.push_str(if i > 0 { ",\n " } else { "" });
        push_list(&mut out, m);
    }
    out.push_str("]\n");
    write_atomic(path, out.as_bytes())
}

pub fn read_partition(path: &Path, ndim: usize) -> Result<TuplePartition> {
    let blocks: Vec<Vec<usize>> = parse(path)?;
    TuplePartition::from_axes(&blocks, ndim).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_partition(path: &Path, partition: &TuplePartition) -> Result<()> {
    write_json(path, &partition.to_axes())
}

/// `{"f": [[...], ...]}`.
pub fn write_duals(path: &Path, duals: &DualPotentials) -> Result<()> {
    let mut out = String::from("{\"f\": [");
    for (i, f) in duals.as_slice().iter().enumerate() {
        out.push_str(if i > 0 { ",\n  " } else { "" });
        push_list(&mut out, f);
    }
    out.push_str("]}\n");
    write_atomic(path, out.as_bytes())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DualsFile {
    f: Vec<Vec<f64>>,
}

pub fn read_duals(path: &Path) -> Result<DualPotentials> {
    let file: DualsFile = parse(path)?;
    DualPotentials::new(file.f).map_err(|e| format_err(path, e.to_string()))
}
