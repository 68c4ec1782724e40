//! Dataset loaders.
//!
//! Every schema reads the same on-disk layout: a `dataset.json` manifest next
//! to one CSV file per user. Named schemas fix the label set and default
//! sample rate of a known dataset; `generic-csv` takes both from the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{prepare_split, DatasetSplit, RawRecording, CHANNEL_NAMES};
use crate::{CoreError, Result};

pub const MANIFEST_FILE: &str = "dataset.json";

const ACTIVITY_COLUMN: &str = "activity";
const USER_COLUMN: &str = "user";
const TIMESTAMP_COLUMN: &str = "timestamp";

/// `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub sample_rate_hz: Option<f64>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    /// User id to CSV file, relative to the manifest.
    pub files: BTreeMap<String, String>,
}

/// Recordings of one dataset with their label vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub schema: String,
    pub sample_rate_hz: f64,
    pub class_names: Vec<String>,
    pub recordings: Vec<RawRecording>,
}

impl LoadedDataset {
    pub fn users(&self) -> Vec<&str> {
        let mut users: Vec<&str> = self.recordings.iter().map(|r| r.user_id.as_str()).collect();
        users.dedup();
        users
    }

    /// Segments and splits one source/target user pair.
    pub fn cross_user_split(
        &self,
        source_user: &str,
        target_user: &str,
        window_seconds: f64,
        overlap: f64,
        val_fraction: f64,
        seed: u64,
    ) -> Result<DatasetSplit> {
        if source_user == target_user {
            return Err(CoreError::Config(format!("source and target are both {source_user:?}")));
        }
        let pick = |user: &str| -> Result<Vec<RawRecording>> {
            let recs: Vec<RawRecording> = self.recordings_of(user).cloned().collect();
            if recs.is_empty() {
                return Err(CoreError::Data(format!(
                    "user {user:?} not in dataset (users: {})",
                    self.users().join(", ")
                )));
            }
            Ok(recs)
        };
        let (source, target) = (pick(source_user)?, pick(target_user)?);
        prepare_split(self.class_names.clone(), &source, &target, window_seconds, overlap, val_fraction, seed)
    }

    pub fn recordings_of<'a>(&'a self, user: &'a str) -> impl Iterator<Item = &'a RawRecording> + 'a {
        self.recordings.iter().filter(move |r| r.user_id == user)
    }
}

pub trait DatasetSchema: Send + Sync {
    fn name(&self) -> &str;

    /// Fixed label set, or `None` when the manifest must declare it.
    fn labels(&self) -> Option<Vec<String>>;

    fn default_sample_rate_hz(&self) -> Option<f64>;

    fn load(&self, dir: &Path) -> Result<LoadedDataset> {
        let manifest = read_manifest(dir)?;
        let labels = match (self.labels(), &manifest.labels) {
            (Some(fixed), Some(declared)) if &fixed != declared => {
                return Err(CoreError::Schema(format!(
                    "{} declares {} labels that differ from the schema's {}",
                    MANIFEST_FILE,
                    declared.len(),
                    fixed.len()
                )))
            }
            (Some(fixed), _) => fixed,
            (None, Some(declared)) if !declared.is_empty() => declared.clone(),
            (None, _) => {
                return Err(CoreError::Schema(format!(
                    "schema {} needs a label list in {}",
                    self.name(),
                    MANIFEST_FILE
                )))
            }
        };
        let rate = manifest
            .sample_rate_hz
            .or(self.default_sample_rate_hz())
            .ok_or_else(|| CoreError::Schema(format!("{MANIFEST_FILE} lacks sample_rate_hz")))?;
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(CoreError::Data(format!("sample rate must be positive, got {rate}")));
        }
        let mut recordings = Vec::new();
        for (user, file) in &manifest.files {
            recordings.extend(read_user_csv(&dir.join(file), user, rate, &labels)?);
        }
        if recordings.is_empty() {
            return Err(CoreError::Data(format!("{} has no labeled samples", dir.display())));
        }
        Ok(LoadedDataset {
            schema: self.name().to_string(),
            sample_rate_hz: rate,
            class_names: labels,
            recordings,
        })
    }
}

struct GenericCsv;

impl DatasetSchema for GenericCsv {
    fn name(&self) -> &str {
        "generic-csv"
    }

    fn labels(&self) -> Option<Vec<String>> {
        None
    }

    fn default_sample_rate_hz(&self) -> Option<f64> {
        None
    }
}

/// A public dataset with a known activity vocabulary.
struct NamedSchema {
    name: &'static str,
    labels: &'static [&'static str],
    sample_rate_hz: f64,
}

impl DatasetSchema for NamedSchema {
    fn name(&self) -> &str {
        self.name
    }

    fn labels(&self) -> Option<Vec<String>> {
        Some(self.labels.iter().map(|s| s.to_string()).collect())
    }

    fn default_sample_rate_hz(&self) -> Option<f64> {
        Some(self.sample_rate_hz)
    }
}

const OPPT_LABELS: &[&str] = &["stand", "walk", "sit", "lie"];

const PAMAP2_LABELS: &[&str] = &[
    "lying",
    "sitting",
    "standing",
    "walking",
    "running",
    "cycling",
    "nordic_walking",
    "ascending_stairs",
    "descending_stairs",
    "vacuum_cleaning",
    "ironing",
];

const DSADS_LABELS: &[&str] = &[
    "sitting",
    "standing",
    "lying_on_back",
    "lying_on_right",
    "ascending_stairs",
    "descending_stairs",
    "standing_in_elevator",
    "moving_in_elevator",
    "walking_in_parking_lot",
    "walking_treadmill_flat",
    "walking_treadmill_inclined",
    "running_treadmill",
    "exercising_stepper",
    "exercising_cross_trainer",
    "cycling_horizontal",
    "cycling_vertical",
    "rowing",
    "jumping",
    "playing_basketball",
];

/// Schemas selectable by name.
pub struct SchemaRegistry {
    schemas: Vec<Box<dyn DatasetSchema>>,
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        let mut reg = Self { schemas: Vec::new() };
        reg.register(Box::new(GenericCsv));
        reg.register(Box::new(NamedSchema {
            name: "oppt",
            labels: OPPT_LABELS,
            sample_rate_hz: 30.0,
        }));
        reg.register(Box::new(NamedSchema {
            name: "pamap2",
            labels: PAMAP2_LABELS,
            sample_rate_hz: 100.0,
        }));
        reg.register(Box::new(NamedSchema {
            name: "dsads",
            labels: DSADS_LABELS,
            sample_rate_hz: 25.0,
        }));
        reg
    }
}

impl SchemaRegistry {
    /// Adds a schema, replacing any existing one with the same name.
    pub fn register(&mut self, schema: Box<dyn DatasetSchema>) {
        self.schemas.retain(|s| s.name() != schema.name());
        self.schemas.push(schema);
    }

    pub fn get(&self, name: &str) -> Result<&dyn DatasetSchema> {
        self.schemas
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| {
                CoreError::Config(format!(
                    "unknown dataset schema {name:?}; known: {}",
                    self.names().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.schemas.iter().map(|s| s.name()).collect()
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema_name: &str) -> Result<LoadedDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CoreError::Data(format!("{} does not exist", path.display())));
    }
    SchemaRegistry::default().get(schema_name)?.load(path)
}

fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CoreError::Schema(format!("{}: {e}", path.display())))
}

fn label_index(labels: &[String], raw: &str) -> Option<usize> {
    let raw = raw.trim();
    labels.iter().position(|l| l == raw).or_else(|| {
        raw.parse::<usize>().ok().filter(|&i| i < labels.len())
    })
}

/// Reads one user's CSV. Rows whose activity is not a declared label are
/// dropped and split the stream into separate recordings.
fn read_user_csv(path: &Path, user: &str, rate: f64, labels: &[String]) -> Result<Vec<RawRecording>> {
    let file = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CoreError::Schema(format!("{} lacks column {name:?}", path.display())))
    };
    column(TIMESTAMP_COLUMN)?;
    let user_col = column(USER_COLUMN)?;
    let activity_col = column(ACTIVITY_COLUMN)?;
    let channel_cols = CHANNEL_NAMES.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;

    let mut recordings = Vec::new();
    let mut current: Option<RawRecording> = None;
    let mut rows = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        rows += 1;
        if record.get(user_col) != Some(user) {
            return Err(CoreError::Data(format!(
                "{} row {}: user {:?} does not match manifest user {user:?}",
                path.display(),
                line + 2,
                record.get(user_col).unwrap_or("")
            )));
        }
        let Some(activity) = label_index(labels, record.get(activity_col).unwrap_or("")) else {
            if let Some(rec) = current.take() {
                recordings.push(rec);
            }
            continue;
        };
        let mut sample = Vec::with_capacity(channel_cols.len());
        for &c in &channel_cols {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| {
                CoreError::Data(format!("{} row {}: bad value {raw:?}", path.display(), line + 2))
            })?;
            if !v.is_finite() {
                return Err(CoreError::Data(format!(
                    "{} row {}: non-finite sample",
                    path.display(),
                    line + 2
                )));
            }
            sample.push(v);
        }
        let rec = current.get_or_insert_with(|| RawRecording {
            user_id: user.to_string(),
            recording: recordings.len(),
            sample_rate_hz: rate,
            channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            samples: Vec::new(),
            activity: Vec::new(),
        });
        rec.samples.push(sample);
        rec.activity.push(activity);
    }
    if rows == 0 {
        return Err(CoreError::Data(format!("{} has no rows", path.display())));
    }
    recordings.extend(current);
    Ok(recordings)
}

/// Writes recordings in the generic layout: one CSV per user plus the manifest.
pub fn write_generic_csv(
    dir: impl AsRef<Path>,
    recordings: &[RawRecording],
    class_names: &[String],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut by_user: BTreeMap<&str, Vec<&RawRecording>> = BTreeMap::new();
    for r in recordings {
        by_user.entry(&r.user_id).or_default().push(r);
    }
    let rate = recordings
        .first()
        .map(|r| r.sample_rate_hz)
        .ok_or_else(|| CoreError::Data("nothing to write".into()))?;
    let mut files = BTreeMap::new();
    for (user, recs) in by_user {
        let name = format!("{user}.csv");
        let path = dir.join(&name);
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec![TIMESTAMP_COLUMN, USER_COLUMN, ACTIVITY_COLUMN];
        header.extend(CHANNEL_NAMES);
        w.write_record(&header)?;
        let mut t = 0usize;
        for (i, rec) in recs.iter().enumerate() {
            if i > 0 {
                // An undefined-activity row keeps recordings apart on reload.
                let mut gap = vec![format!("{:.6}", t as f64 / rate), user.to_string(), String::new()];
                gap.extend(std::iter::repeat_n("0".to_string(), CHANNEL_NAMES.len()));
                w.write_record(&gap)?;
                t += 1;
            }
            for (s, &a) in rec.samples.iter().zip(&rec.activity) {
                let mut row = vec![
                    format!("{:.6}", t as f64 / rate),
                    user.to_string(),
                    class_names[a].clone(),
                ];
                row.extend(s.iter().map(|v| format!("{v:?}")));
                w.write_record(&row)?;
                t += 1;
            }
        }
        w.flush().map_err(|e| CoreError::io(&path, e))?;
        files.insert(user.to_string(), name);
    }
    let manifest = DatasetManifest {
        sample_rate_hz: Some(rate),
        labels: Some(class_names.to_vec()),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| CoreError::io(&path, e))?;
    Ok(path)
}
