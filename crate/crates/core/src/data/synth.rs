//! Synthetic cross-user activity data.
//!
//! Each activity is a cyclic left-to-right chain over `K` hidden states, each
//! with its own Gaussian emission regime (a mean level plus a state-specific
//! oscillation). The target user sees the source process through a sensor
//! rotation, per-channel gains and slower or faster state durations.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    normalize_channels, samples_per_window, segment_windows, window_stride, ChannelStats, DatasetSplit, Domain,
    RawRecording, CHANNEL_NAMES,
};
use crate::{CoreError, Result};

pub const SOURCE_USER: &str = "S1";
pub const TARGET_USER: &str = "S2";

/// How the target user's sensors distort the shared generative process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTransform {
    /// Applied to both the accelerometer and the gyroscope triad.
    pub rotation: [[f64; 3]; 3],
    pub gain: [f64; 6],
    /// Multiplies the mean hidden-state duration.
    pub duration_dilation: f64,
}

impl Default for UserTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl UserTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gain: [1.0; 6],
            duration_dilation: 1.0,
        }
    }

    /// Rotation by `degrees` about `axis` (Rodrigues).
    pub fn rotation_about(axis: [f64; 3], degrees: f64) -> [[f64; 3]; 3] {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let [x, y, z] = axis.map(|a| a / n);
        let (s, c) = degrees.to_radians().sin_cos();
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if r.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Config("rotation has non-finite entries".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(CoreError::Config("rotation matrix is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(CoreError::Config(format!("rotation determinant is {det}, expected 1")));
        }
        if self.gain.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(CoreError::Config("channel gains must be positive".into()));
        }
        if !(self.duration_dilation.is_finite() && self.duration_dilation > 0.0) {
            return Err(CoreError::Config("duration dilation must be positive".into()));
        }
        Ok(())
    }

    fn apply(&self, sample: &mut [f64]) {
        for triad in 0..2 {
            let v = [sample[3 * triad], sample[3 * triad + 1], sample[3 * triad + 2]];
            for (i, row) in self.rotation.iter().enumerate() {
                sample[3 * triad + i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            }
        }
        for (s, g) in sample.iter_mut().zip(self.gain) {
            *s *= g;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub states_per_class: usize,
    pub sample_rate_hz: f64,
    pub window_seconds: f64,
    pub overlap: f64,
    pub windows_per_user: usize,
    pub mean_state_seconds: f64,
    /// Spread of the per-class mean levels.
    pub class_separation: f64,
    /// Spread of the per-state offsets around their class level.
    pub state_separation: f64,
    pub oscillation: f64,
    pub noise_std: f64,
    pub val_fraction: f64,
    pub target: UserTransform,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            states_per_class: 3,
            sample_rate_hz: 10.0,
            window_seconds: 3.0,
            overlap: 0.5,
            windows_per_user: 200,
            mean_state_seconds: 6.0,
            class_separation: 1.0,
            state_separation: 0.6,
            oscillation: 0.5,
            noise_std: 0.4,
            val_fraction: 0.5,
            target: UserTransform {
                rotation: UserTransform::rotation_about([0.0, 0.0, 1.0], 60.0),
                gain: [1.3, 0.8, 1.2, 0.75, 1.25, 1.1],
                duration_dilation: 1.5,
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CoreError::Config("need at least two classes".into()));
        }
        if self.states_per_class < 1 {
            return Err(CoreError::Config("need at least one state per class".into()));
        }
        if self.windows_per_user < self.classes {
            return Err(CoreError::Config("fewer windows per user than classes".into()));
        }
        if !(self.mean_state_seconds > 0.0) || !(self.noise_std >= 0.0) {
            return Err(CoreError::Config("state duration must be positive and noise non-negative".into()));
        }
        samples_per_window(self.window_seconds, self.sample_rate_hz)?;
        window_stride(samples_per_window(self.window_seconds, self.sample_rate_hz)?, self.overlap)?;
        self.target.validate()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("activity_{c}")).collect()
    }

    /// Windows per class, largest-remainder split of `windows_per_user`.
    pub fn windows_per_class(&self) -> Vec<usize> {
        let base = self.windows_per_user / self.classes;
        let extra = self.windows_per_user % self.classes;
        (0..self.classes).map(|c| base + usize::from(c < extra)).collect()
    }
}

/// Per-sample hidden states, kept for diagnostics only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub states_per_class: usize,
    pub source_states: Vec<usize>,
    pub target_states: Vec<usize>,
}

impl SynthTruth {
    pub fn states(&self, domain: Domain) -> &[usize] {
        match domain {
            Domain::Source => &self.source_states,
            Domain::Target => &self.target_states,
        }
    }

    /// Hidden states covered by the window starting at `start`.
    pub fn window_states(&self, domain: Domain, start: usize, width: usize) -> &[usize] {
        &self.states(domain)[start..start + width]
    }

    /// Most frequent hidden state in a window (lowest id on ties).
    pub fn majority_state(&self, domain: Domain, start: usize, width: usize) -> usize {
        let mut counts = vec![0usize; self.states_per_class];
        for &s in self.window_states(domain, start, width) {
            counts[s] += 1;
        }
        let best = counts.iter().copied().max().unwrap_or(0);
        counts.iter().position(|&c| c == best).unwrap_or(0)
    }
}

struct Regime {
    mean: [f64; 6],
    amplitude: [f64; 6],
    /// Cycles per second.
    frequency: f64,
    phase: [f64; 6],
}

/// Generates the two raw recordings (source, target) and their hidden states.
pub fn synth_recordings(cfg: &SynthConfig, seed: u64) -> Result<(Vec<RawRecording>, SynthTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.states_per_class;
    let mut regimes: Vec<Vec<Regime>> = Vec::with_capacity(cfg.classes);
    for _ in 0..cfg.classes {
        let level: [f64; 6] = std::array::from_fn(|_| cfg.class_separation * rng.sample::<f64, _>(StandardNormal));
        let states = (0..k)
            .map(|_| Regime {
                mean: std::array::from_fn(|i| level[i] + cfg.state_separation * rng.sample::<f64, _>(StandardNormal)),
                amplitude: std::array::from_fn(|_| cfg.oscillation * rng.gen_range(0.5..1.5)),
                frequency: rng.gen_range(0.2..1.5),
                phase: std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU)),
            })
            .collect();
        regimes.push(states);
    }

    let width = samples_per_window(cfg.window_seconds, cfg.sample_rate_hz)?;
    let stride = window_stride(width, cfg.overlap)?;
    let per_class = cfg.windows_per_class();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| CoreError::Config(e.to_string()))?;

    let mut recordings = Vec::new();
    let mut truth = Vec::new();
    for (user, transform) in [(SOURCE_USER, UserTransform::identity()), (TARGET_USER, cfg.target.clone())] {
        let mean_samples = cfg.mean_state_seconds * transform.duration_dilation * cfg.sample_rate_hz;
        let leave = (1.0 / mean_samples).min(1.0);
        let mut samples = Vec::new();
        let mut activity = Vec::new();
        let mut states = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            // Segment lengths are whole strides so every class boundary
            // falls on a window start and yields exactly `n` windows.
            let span = (n - 1) * stride + width;
            let len = span.div_ceil(stride) * stride;
            let mut s = rng.gen_range(0..k);
            for t in 0..len {
                if t > 0 && rng.gen_bool(leave) {
                    s = (s + 1) % k;
                }
                let r = &regimes[c][s];
                let time = t as f64 / cfg.sample_rate_hz;
                let mut x: [f64; 6] = std::array::from_fn(|i| {
                    r.mean[i]
                        + r.amplitude[i] * (std::f64::consts::TAU * r.frequency * time + r.phase[i]).sin()
                        + noise.sample(&mut rng)
                });
                transform.apply(&mut x);
                samples.push(x.to_vec());
                activity.push(c);
                states.push(s);
            }
        }
        recordings.push(RawRecording {
            user_id: user.to_string(),
            recording: 0,
            sample_rate_hz: cfg.sample_rate_hz,
            channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            samples,
            activity,
        });
        truth.push(states);
    }
    let target_states = truth.pop().unwrap_or_default();
    let source_states = truth.pop().unwrap_or_default();
    Ok((
        recordings,
        SynthTruth {
            states_per_class: k,
            source_states,
            target_states,
        },
    ))
}

/// Segments, normalizes (source statistics) and splits raw recordings.
pub fn prepare_split(
    class_names: Vec<String>,
    source: &[RawRecording],
    target: &[RawRecording],
    window_seconds: f64,
    overlap: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let rate = source
        .first()
        .map(|r| r.sample_rate_hz)
        .ok_or_else(|| CoreError::Data("no source recordings".into()))?;
    let stride = window_stride(samples_per_window(window_seconds, rate)?, overlap)?;
    let mut src = Vec::new();
    for r in source {
        r.validate(class_names.len())?;
        src.extend(segment_windows(r, window_seconds, overlap, Domain::Source)?);
    }
    let mut tgt = Vec::new();
    for r in target {
        r.validate(class_names.len())?;
        tgt.extend(segment_windows(r, window_seconds, overlap, Domain::Target)?);
    }
    let stats = ChannelStats::from_windows(&src).ok_or_else(|| CoreError::Data("no source windows".into()))?;
    normalize_channels(&mut src, &stats);
    normalize_channels(&mut tgt, &stats);
    DatasetSplit::new(class_names, stride, src, tgt, val_fraction, seed)
}

pub fn synth_crossuser_with_truth(cfg: &SynthConfig, seed: u64) -> Result<(DatasetSplit, SynthTruth)> {
    let (recordings, truth) = synth_recordings(cfg, seed)?;
    let split = prepare_split(
        cfg.class_names(),
        &recordings[..1],
        &recordings[1..],
        cfg.window_seconds,
        cfg.overlap,
        cfg.val_fraction,
        seed,
    )?;
    Ok((split, truth))
}

pub fn synth_crossuser(cfg: &SynthConfig, seed: u64) -> Result<DatasetSplit> {
    synth_crossuser_with_truth(cfg, seed).map(|(split, _)| split)
}
