//! Run artifacts: metrics, confusion matrix, training history and manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSplit, WindowedSample};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::train::TrainHistory;
use crate::{CoreError, Result};

/// What is needed to rerun a command and get the same outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub method: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of each input, keyed by a short name.
    pub dataset_digests: BTreeMap<String, String>,
    /// SHA-256 of each emitted file except the manifest itself.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, method: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            method: method.to_string(),
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            dataset_digests: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_clock_seconds: 0.0,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn hash_window(h: &mut Sha256, user: &str, fields: [u64; 6], values: &[f64]) {
    h.update(user.as_bytes());
    h.update([0u8]);
    for v in fields {
        h.update(v.to_le_bytes());
    }
    for v in values {
        h.update(v.to_le_bytes());
    }
}

fn hash_windows(h: &mut Sha256, windows: &[WindowedSample]) {
    h.update((windows.len() as u64).to_le_bytes());
    for w in windows {
        let label = w.activity.map_or(u64::MAX, |a| a as u64);
        let fields = [w.domain.label() as u64, label, w.recording as u64, w.seq_index as u64, w.start as u64, w.width as u64];
        hash_window(h, &w.user_id, fields, &w.values);
    }
}

/// Digest over every window, label and class name of a split.
pub fn digest_split(split: &DatasetSplit) -> String {
    let mut h = Sha256::new();
    for name in &split.class_names {
        h.update(name.as_bytes());
        h.update([0u8]);
    }
    h.update((split.stride as u64).to_le_bytes());
    hash_windows(&mut h, &split.source_train);
    h.update((split.target_train.len() as u64).to_le_bytes());
    for w in split.target_train.windows() {
        let fields = [u64::MAX, u64::MAX, w.recording as u64, w.seq_index as u64, w.start as u64, w.width as u64];
        hash_window(&mut h, &w.user_id, fields, &w.values);
    }
    hash_windows(&mut h, &split.target_val);
    hash_windows(&mut h, &split.target_test);
    hex::encode(h.finalize())
}

/// Rows are true classes, columns predicted classes, both in label index order.
pub fn confusion_csv(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let mut out = String::from("true\\predicted");
    for name in class_names {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for (name, row) in class_names.iter().zip(&cm.counts) {
        out.push_str(name);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn write_file(path: PathBuf, contents: &[u8]) -> Result<String> {
    fs::write(&path, contents).map_err(|e| CoreError::io(&path, e))?;
    Ok(sha256_hex(contents))
}

/// Writes metrics.json, confusion.csv, history.csv and history.json (when a
/// history is given) and finally manifest.json into `out_dir`.
pub fn report(
    metrics: &Metrics,
    class_names: &[String],
    history: Option<&TrainHistory>,
    manifest: &mut RunManifest,
    out_dir: &Path,
) -> Result<()> {
    if class_names.len() != metrics.confusion.classes() {
        return Err(CoreError::Label(format!(
            "{} class names for a {}-class confusion matrix",
            class_names.len(),
            metrics.confusion.classes()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let mut files: Vec<(&str, Vec<u8>)> = vec![
        ("metrics.json", serde_json::to_vec_pretty(metrics)?),
        ("confusion.csv", confusion_csv(&metrics.confusion, class_names).into_bytes()),
    ];
    if let Some(h) = history {
        files.push(("history.csv", h.to_csv().into_bytes()));
        files.push(("history.json", h.to_json()?.into_bytes()));
    }
    for (name, bytes) in files {
        let digest = write_file(out_dir.join(name), &bytes)?;
        manifest.outputs.insert(name.to_string(), digest);
    }
    write_file(out_dir.join("manifest.json"), &serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}
