//! File formats: checkpoint JSON, dataset / spectrum / vector / curve / loss
//! history CSV, and generic JSON helpers. Every writer goes through
//! [`atomic_write`], which stages the bytes in a sibling temp file and renames
//! it into place, so a crash mid-write never leaves a truncated file at the
//! declared path.
//!
//! Floats are written in shortest-round-trip decimal form (Rust's `{}`
//! formatting, serde_json's number formatting), which reparses to the exact
//! same 64-bit value.

use crate::caf::LossRecord;
use crate::error::{Error, Result};
use crate::eval::{CurvePoint, MeasurementEntry, MeasurementReport};
use crate::model::{ArchitectureSpec, Dataset, EncoderLayer, ModelParams};
use crate::scalar::{real, Scalar};
use crate::utr::UtrSpectrum;
use ndarray::{Array1, Array2};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Writes `bytes` to `path` via a temp file in the same directory plus an
/// atomic rename. On any failure the temp file is removed and the declared
/// path is left exactly as it was.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let display = path.display().to_string();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("'{display}' has no file name")))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    let write_result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        Ok(())
    })();
    if let Err(e) = write_result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(display, e));
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(display, e)
    })
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Serializes any value as pretty JSON through the atomic writer.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Loads JSON, attaching the path to syntax errors.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    arch: ArchitectureSpec,
    /// Per layer: `[weights row-major, bias]`.
    encoder_layers: Vec<(Vec<f64>, Vec<f64>)>,
    /// Row-major `num_classes x bottleneck_dim`.
    classifier_direction: Vec<f64>,
    classifier_scale: Vec<f64>,
}

/// Saves model parameters as JSON (64-bit interchange precision).
pub fn save_checkpoint<F: Scalar>(params: &ModelParams<F>, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        arch: params.arch.clone(),
        encoder_layers: params
            .encoder_layers
            .iter()
            .map(|l| {
                (
                    l.weight.iter().map(|v| v.to_f64_lossy()).collect(),
                    l.bias.iter().map(|v| v.to_f64_lossy()).collect(),
                )
            })
            .collect(),
        classifier_direction: params
            .classifier_direction
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect(),
        classifier_scale: params
            .classifier_scale
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect(),
    };
    save_json(&file, path)
}

/// Loads and validates a checkpoint; shape mismatches against the embedded
/// architecture are reported as invalid parameters.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<ModelParams<F>> {
    let file: CheckpointFile = load_json(path)?;
    let shapes = file.arch.layer_shapes();
    if file.encoder_layers.len() != shapes.len() {
        return Err(Error::dims(
            "checkpoint encoder layers",
            shapes.len(),
            file.encoder_layers.len(),
        ));
    }
    let mut encoder_layers = Vec::with_capacity(shapes.len());
    for ((flat_w, flat_b), (out, inp)) in file.encoder_layers.into_iter().zip(shapes) {
        if flat_w.len() != out * inp {
            return Err(Error::dims("checkpoint weight", out * inp, flat_w.len()));
        }
        if flat_b.len() != out {
            return Err(Error::dims("checkpoint bias", out, flat_b.len()));
        }
        let weight = Array2::from_shape_vec((out, inp), flat_w.into_iter().map(real::<F>).collect())
            .expect("length checked");
        let bias = Array1::from_vec(flat_b.into_iter().map(real::<F>).collect());
        encoder_layers.push(EncoderLayer { weight, bias });
    }
    let (k, d) = (file.arch.num_classes, file.arch.bottleneck_dim);
    if file.classifier_direction.len() != k * d {
        return Err(Error::dims(
            "checkpoint classifier_direction",
            k * d,
            file.classifier_direction.len(),
        ));
    }
    if file.classifier_scale.len() != k {
        return Err(Error::dims(
            "checkpoint classifier_scale",
            k,
            file.classifier_scale.len(),
        ));
    }
    let params = ModelParams {
        arch: file.arch,
        encoder_layers,
        classifier_direction: Array2::from_shape_vec(
            (k, d),
            file.classifier_direction.into_iter().map(real::<F>).collect(),
        )
        .expect("length checked"),
        classifier_scale: Array1::from_vec(
            file.classifier_scale.into_iter().map(real::<F>).collect(),
        ),
    };
    params.validate()?;
    Ok(params)
}

/// Writes a dataset as CSV with header `f0,...,f{p-1}[,y]`.
pub fn save_dataset<F: Scalar>(data: &Dataset<F>, path: &Path) -> Result<()> {
    let p = data.features.ncols();
    let mut out = String::new();
    for j in 0..p {
        if j > 0 {
            out.push(',');
        }
        out.push_str(&format!("f{j}"));
    }
    if data.labels.is_some() {
        out.push_str(",y");
    }
    out.push('\n');
    for (i, row) in data.features.rows().into_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", v.to_f64_lossy()));
        }
        if let Some(labels) = &data.labels {
            out.push_str(&format!(",{}", labels[i]));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Reads a dataset CSV; the dataset name is the file stem. Malformed headers,
/// ragged rows, and unparseable numbers are reported with their line number.
pub fn load_dataset<F: Scalar>(path: &Path) -> Result<Dataset<F>> {
    let display = path.display().to_string();
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: display.clone(),
        line: 1,
        message: "empty file".into(),
    })?;
    let fields: Vec<&str> = header.split(',').collect();
    let has_labels = fields.last() == Some(&"y");
    let feature_fields = if has_labels {
        &fields[..fields.len() - 1]
    } else {
        &fields[..]
    };
    for (j, f) in feature_fields.iter().enumerate() {
        if *f != format!("f{j}") {
            return Err(Error::Parse {
                path: display,
                line: 1,
                message: format!("expected header field 'f{j}', got '{f}'"),
            });
        }
    }
    let p = feature_fields.len();
    if p == 0 {
        return Err(Error::Parse {
            path: display,
            line: 1,
            message: "no feature columns".into(),
        });
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parts: Vec<&str> = line.split(',').collect();
        let expected = p + usize::from(has_labels);
        if parts.len() != expected {
            return Err(Error::Parse {
                path: display,
                line: line_no,
                message: format!("expected {expected} fields, got {}", parts.len()),
            });
        }
        for part in &parts[..p] {
            let v: f64 = part.trim().parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: line_no,
                message: format!("invalid number '{part}'"),
            })?;
            features.push(real::<F>(v));
        }
        if has_labels {
            let y: usize = parts[p].trim().parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: line_no,
                message: format!("invalid label '{}'", parts[p]),
            })?;
            labels.push(y);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            path: display,
            line: 1,
            message: "no data rows".into(),
        });
    }
    let features = Array2::from_shape_vec((rows, p), features).expect("row count tracked");
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Dataset::new(features, has_labels.then_some(labels), name)
}

/// Writes a spectrum as CSV with header `instance,ch0,...,ch{d-1}`.
pub fn save_spectrum<F: Scalar>(spectrum: &UtrSpectrum<F>, path: &Path) -> Result<()> {
    let d = spectrum.num_channels();
    let mut out = String::from("instance");
    for j in 0..d {
        out.push_str(&format!(",ch{j}"));
    }
    out.push('\n');
    for (i, row) in spectrum.values().rows().into_iter().enumerate() {
        out.push_str(&format!("{i}"));
        for v in row.iter() {
            out.push_str(&format!(",{}", v.to_f64_lossy()));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Reads the value matrix of a spectrum CSV back.
pub fn load_spectrum_values<F: Scalar>(path: &Path) -> Result<Array2<F>> {
    let display = path.display().to_string();
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: display.clone(),
        line: 1,
        message: "empty file".into(),
    })?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.first() != Some(&"instance") {
        return Err(Error::Parse {
            path: display,
            line: 1,
            message: "expected 'instance' as first header field".into(),
        });
    }
    let d = fields.len() - 1;
    let mut values = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != d + 1 {
            return Err(Error::Parse {
                path: display,
                line: line_no,
                message: format!("expected {} fields, got {}", d + 1, parts.len()),
            });
        }
        for part in &parts[1..] {
            let v: f64 = part.trim().parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: line_no,
                message: format!("invalid number '{part}'"),
            })?;
            values.push(real::<F>(v));
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, d), values).map_err(|e| Error::Parse {
        path: display,
        line: 1,
        message: e.to_string(),
    })
}

/// Writes a single-column CSV with header `value`.
pub fn save_vector<F: Scalar>(values: &Array1<F>, path: &Path) -> Result<()> {
    let mut out = String::from("value\n");
    for v in values.iter() {
        out.push_str(&format!("{}\n", v.to_f64_lossy()));
    }
    atomic_write(path, out.as_bytes())
}

/// Writes a loss history as CSV `epoch,phase,loss_name,value`.
pub fn save_loss_history(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,phase,loss_name,value\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch,
            r.phase.as_str(),
            r.loss_name,
            r.value
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// One parsed loss-history row. Strings are owned because a file on disk may
/// name phases or losses this build never emits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHistoryRow {
    pub epoch: usize,
    pub phase: String,
    pub loss_name: String,
    pub value: f64,
}

/// Reads a loss-history CSV back.
pub fn load_loss_history(path: &Path) -> Result<Vec<LossHistoryRow>> {
    let display = path.display().to_string();
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "epoch,phase,loss_name,value")) => {}
        _ => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                message: "expected header 'epoch,phase,loss_name,value'".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                path: display,
                line: line_no,
                message: format!("expected 4 fields, got {}", parts.len()),
            });
        }
        let epoch: usize = parts[0].trim().parse().map_err(|_| Error::Parse {
            path: display.clone(),
            line: line_no,
            message: format!("invalid epoch '{}'", parts[0]),
        })?;
        let value: f64 = parts[3].trim().parse().map_err(|_| Error::Parse {
            path: display.clone(),
            line: line_no,
            message: format!("invalid number '{}'", parts[3]),
        })?;
        rows.push(LossHistoryRow {
            epoch,
            phase: parts[1].to_string(),
            loss_name: parts[2].to_string(),
            value,
        });
    }
    Ok(rows)
}

/// Writes curve points as CSV `threshold,accuracy,count`; an undefined
/// accuracy (no qualifying instance) becomes an empty field.
pub fn save_curve(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut out = String::from("threshold,accuracy,count\n");
    for p in points {
        let acc = p.accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{acc},{}\n", p.threshold, p.count));
    }
    atomic_write(path, out.as_bytes())
}

/// Reads a curve CSV back; empty accuracy fields become `None`.
pub fn load_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let display = path.display().to_string();
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "threshold,accuracy,count")) => {}
        _ => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                message: "expected header 'threshold,accuracy,count'".into(),
            })
        }
    }
    let mut points = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                path: display,
                line: line_no,
                message: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let bad_number = |field: &str| Error::Parse {
            path: display.clone(),
            line: line_no,
            message: format!("invalid number '{field}'"),
        };
        let threshold: f64 = parts[0].trim().parse().map_err(|_| bad_number(parts[0]))?;
        let accuracy = if parts[1].is_empty() {
            None
        } else {
            Some(parts[1].trim().parse().map_err(|_| bad_number(parts[1]))?)
        };
        let count: usize = parts[2].trim().parse().map_err(|_| bad_number(parts[2]))?;
        points.push(CurvePoint {
            threshold,
            accuracy,
            count,
        });
    }
    Ok(points)
}

/// Writes a measurement report as flat CSV
/// `measurement,z_low,z_high,direction`, rows in key order.
pub fn save_report_csv(report: &MeasurementReport, path: &Path) -> Result<()> {
    let mut out = String::from("measurement,z_low,z_high,direction\n");
    for (name, e) in &report.entries {
        out.push_str(&format!(
            "{name},{},{},{}\n",
            e.z_low,
            e.z_high,
            e.direction.as_str()
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// Reads a flat report CSV back.
pub fn load_report_csv(path: &Path) -> Result<MeasurementReport> {
    let display = path.display().to_string();
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "measurement,z_low,z_high,direction")) => {}
        _ => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                message: "expected header 'measurement,z_low,z_high,direction'".into(),
            })
        }
    }
    let mut entries = std::collections::BTreeMap::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                path: display,
                line: line_no,
                message: format!("expected 4 fields, got {}", parts.len()),
            });
        }
        let parse_f64 = |field: &str| -> Result<f64> {
            field.trim().parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: line_no,
                message: format!("invalid number '{field}'"),
            })
        };
        let direction = parts[3].trim().parse().map_err(|_| Error::Parse {
            path: display.clone(),
            line: line_no,
            message: format!("invalid direction '{}'", parts[3]),
        })?;
        entries.insert(
            parts[0].to_string(),
            MeasurementEntry {
                z_low: parse_f64(parts[1])?,
                z_high: parse_f64(parts[2])?,
                direction,
            },
        );
    }
    Ok(MeasurementReport { entries })
}

/// Reads a single-column `value` CSV.
pub fn load_vector<F: Scalar>(path: &Path) -> Result<Array1<F>> {
    let display = path.display().to_string();
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "value")) => {}
        _ => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                message: "expected header 'value'".into(),
            })
        }
    }
    let mut values = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.trim().parse().map_err(|_| Error::Parse {
            path: display.clone(),
            line: idx + 1,
            message: format!("invalid number '{line}'"),
        })?;
        values.push(real::<F>(v));
    }
    Ok(Array1::from_vec(values))
}
