use serde::{Deserialize, Serialize};

use super::WindowedSample;

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics over every sample of the given windows (population std).
    pub fn from_windows(windows: &[WindowedSample]) -> Option<Self> {
        let first = windows.first()?;
        let ch = first.channels;
        let mut sum = vec![0.0; ch];
        let mut count = 0usize;
        for w in windows {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += w.channel(c).iter().sum::<f64>();
            }
            count += w.width;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; ch];
        for w in windows {
            for (c, s) in sq.iter_mut().enumerate() {
                *s += w.channel(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        Some(Self { mean, std })
    }
}

/// Standardizes every channel; zero-variance channels are passed through.
pub fn normalize_channels(windows: &mut [WindowedSample], stats: &ChannelStats) {
    for w in windows.iter_mut() {
        let width = w.width;
        for c in 0..w.channels {
            let std = stats.std[c];
            if std <= f64::EPSILON {
                continue;
            }
            for v in &mut w.values[c * width..(c + 1) * width] {
                *v = (*v - stats.mean[c]) / std;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;

    fn window(values: Vec<f64>, channels: usize) -> WindowedSample {
        let width = values.len() / channels;
        WindowedSample {
            values,
            channels,
            width,
            domain: Domain::Source,
            activity: Some(0),
            user_id: "u".into(),
            recording: 0,
            seq_index: 0,
            start: 0,
        }
    }

    #[test]
    fn standardized_input_is_unchanged() {
        let w = vec![window(vec![-1.0, 1.0, -1.0, 1.0, 3.0, 3.0, 3.0, 3.0], 2)];
        let stats = ChannelStats::from_windows(&w).unwrap();
        assert_eq!(stats.std[1], 0.0);
        let mut out = w.clone();
        normalize_channels(&mut out, &stats);
        for (a, b) in out[0].values.iter().zip(&w[0].values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn source_statistics_become_zero_mean_unit_std() {
        let mut w = vec![
            window(vec![1.0, 2.0, 3.0, 10.0, 20.0, 60.0], 2),
            window(vec![7.0, 5.0, 4.0, -5.0, 0.0, 5.0], 2),
        ];
        let stats = ChannelStats::from_windows(&w).unwrap();
        normalize_channels(&mut w, &stats);
        let after = ChannelStats::from_windows(&w).unwrap();
        for c in 0..2 {
            assert!(after.mean[c].abs() < 1e-12);
            assert!((after.std[c] - 1.0).abs() < 1e-12);
        }
    }
}
