//! Line-delimited JSON dataset and preference files.
//!
//! A dataset file starts with a header line
//! `{"d": 4, "label_kind": "binary", "L": null}` followed by one bag per line.
//! Preference files hold one `{"bag_a", "bag_b", "label"}` record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AggKind, Bag, Dataset, Instance, LabelKind, PreferencePair};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct HeaderRecord {
    d: usize,
    label_kind: String,
    #[serde(rename = "L")]
    levels: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    embedding: Vec<f64>,
    gold_label: Option<f64>,
    external_prior: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BagRecord {
    id: String,
    agg: AggKind,
    label: Option<f64>,
    context_embedding: Option<Vec<f64>>,
    instances: Vec<InstanceRecord>,
}

fn malformed(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_label_kind(h: &HeaderRecord) -> std::result::Result<LabelKind, String> {
    match (h.label_kind.as_str(), h.levels) {
        ("binary", None | Some(1)) => Ok(LabelKind::Binary),
        ("binary", Some(l)) => Err(format!("binary label kind with L = {l}")),
        ("integer", Some(l)) if l >= 1 => Ok(LabelKind::Integer(l)),
        ("integer", _) => Err("integer label kind needs L >= 1".into()),
        (other, _) => Err(format!("unknown label_kind {other:?}")),
    }
}

/// Reads and validates a dataset file.
///
/// `expected` pins the label kind the caller is prepared to handle; a
/// mismatch with the header is an error.
pub fn load_dataset(path: impl AsRef<Path>, expected: Option<LabelKind>) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut header: Option<(usize, LabelKind)> = None;
    let mut bags = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((d, _)) = header else {
            let h: HeaderRecord =
                serde_json::from_str(&line).map_err(|e| malformed(path, line_no, e.to_string()))?;
            let kind = parse_label_kind(&h).map_err(|m| malformed(path, line_no, m))?;
            if let Some(exp) = expected {
                if exp != kind {
                    return Err(malformed(
                        path,
                        line_no,
                        format!("label kind {kind:?} does not match expected {exp:?}"),
                    ));
                }
            }
            header = Some((h.d, kind));
            continue;
        };
        let rec: BagRecord =
            serde_json::from_str(&line).map_err(|e| malformed(path, line_no, e.to_string()))?;
        if rec.instances.is_empty() {
            return Err(malformed(
                path,
                line_no,
                format!("bag {:?} has no instances", rec.id),
            ));
        }
        if let Some(inst) = rec.instances.iter().find(|i| i.embedding.len() != d) {
            return Err(Error::DimensionMismatch {
                instance: inst.id.clone(),
                expected: d,
                got: inst.embedding.len(),
            });
        }
        bags.push(Bag {
            id: rec.id,
            agg: rec.agg,
            label: rec.label,
            context_embedding: rec.context_embedding,
            instances: rec
                .instances
                .into_iter()
                .map(|i| Instance {
                    id: i.id,
                    embedding: i.embedding,
                    gold_label: i.gold_label,
                    external_prior: i.external_prior,
                })
                .collect(),
        });
    }

    let (d, kind) = header.ok_or_else(|| malformed(path, 1, "missing header line"))?;
    Dataset::new(d, kind, bags)
}

/// Writes `ds` in the format read by [`load_dataset`]. Preferences are not
/// part of the dataset file; see [`write_preferences`].
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (label_kind, levels) = match ds.label_kind {
        LabelKind::Binary => ("binary", None),
        LabelKind::Integer(l) => ("integer", Some(l)),
    };
    serde_json::to_writer(
        &mut w,
        &HeaderRecord {
            d: ds.d,
            label_kind: label_kind.into(),
            levels,
        },
    )?;
    w.write_all(b"\n")?;
    for bag in &ds.bags {
        let rec = BagRecord {
            id: bag.id.clone(),
            agg: bag.agg,
            label: bag.label,
            context_embedding: bag.context_embedding.clone(),
            instances: bag
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    id: i.id.clone(),
                    embedding: i.embedding.clone(),
                    gold_label: i.gold_label,
                    external_prior: i.external_prior,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_preferences(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair =
            serde_json::from_str(&line).map_err(|e| malformed(path, idx + 1, e.to_string()))?;
        if pair.label != 1 && pair.label != -1 {
            return Err(malformed(
                path,
                idx + 1,
                format!("label {} is not 1 or -1", pair.label),
            ));
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn write_preferences(pairs: &[PreferencePair], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
