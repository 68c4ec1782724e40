//! Sensor recordings, sliding windows and the source/target dataset split.

pub mod loaders;
pub mod normalize;
pub mod segment;
pub mod split;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use loaders::{load_dataset, MANIFEST_FILE, write_generic_csv, DatasetManifest, DatasetSchema, LoadedDataset, SchemaRegistry};
pub use normalize::{normalize_channels, ChannelStats};
pub use segment::{samples_per_window, segment_windows, window_count, window_stride};
pub use split::{split_target, DatasetSplit, TargetTrain, UnlabeledWindow};
pub use synth::{
    prepare_split, synth_crossuser, synth_crossuser_with_truth, synth_recordings, SynthConfig, SynthTruth, UserTransform,
};

/// Canonical channel order: accelerometer then gyroscope.
pub const CHANNEL_NAMES: [&str; 6] = ["acc_x", "acc_y", "acc_z", "gyr_x", "gyr_y", "gyr_z"];

/// One contiguous stream of samples from one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecording {
    pub user_id: String,
    /// Position of this stream among the user's recordings.
    pub recording: usize,
    pub sample_rate_hz: f64,
    pub channels: Vec<String>,
    /// Row-major `[T, channels]`.
    pub samples: Vec<Vec<f64>>,
    pub activity: Vec<usize>,
}

impl RawRecording {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self, num_classes: usize) -> crate::Result<()> {
        use crate::CoreError;
        if !(self.sample_rate_hz > 0.0) {
            return Err(CoreError::Data(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if self.activity.len() != self.samples.len() {
            return Err(CoreError::Data("activity stream length differs from samples".into()));
        }
        let ch = self.channels.len();
        if self.samples.iter().any(|r| r.len() != ch) {
            return Err(CoreError::Data("ragged sample rows".into()));
        }
        if let Some(a) = self.activity.iter().find(|&&a| a >= num_classes) {
            return Err(CoreError::Label(format!(
                "activity {a} outside the {num_classes} declared labels"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Domain label used by the domain-constraint heads.
    pub fn label(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// A fixed-length multichannel window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedSample {
    /// Row-major `[channels, width]`.
    pub values: Vec<f64>,
    pub channels: usize,
    pub width: usize,
    pub domain: Domain,
    pub activity: Option<usize>,
    pub user_id: String,
    pub recording: usize,
    /// Chronological position among the recording's kept windows.
    pub seq_index: usize,
    /// First sample of the window within its recording.
    pub start: usize,
}

impl WindowedSample {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.width..(c + 1) * self.width]
    }
}
