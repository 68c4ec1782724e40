use super::{Domain, RawRecording, WindowedSample};
use crate::{CoreError, Result};

/// Samples per window: `round(window_seconds * fs)`.
pub fn samples_per_window(window_seconds: f64, sample_rate_hz: f64) -> Result<usize> {
    let w = (window_seconds * sample_rate_hz).round();
    if !(w >= 1.0) || !w.is_finite() {
        return Err(CoreError::Config(format!(
            "window of {window_seconds} s at {sample_rate_hz} Hz has no samples"
        )));
    }
    Ok(w as usize)
}

/// Hop between window starts: `round(W * (1 - overlap))`, at least one sample.
pub fn window_stride(width: usize, overlap: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(CoreError::Config(format!("overlap must be in [0, 1), got {overlap}")));
    }
    Ok(((width as f64 * (1.0 - overlap)).round() as usize).max(1))
}

/// Number of window positions in a stream of `len` samples.
pub fn window_count(len: usize, width: usize, stride: usize) -> usize {
    if len < width || width == 0 || stride == 0 {
        0
    } else {
        (len - width) / stride + 1
    }
}

/// Cuts a recording into overlapping windows, discarding any window whose span
/// covers more than one activity.
pub fn segment_windows(
    rec: &RawRecording,
    window_seconds: f64,
    overlap: f64,
    domain: Domain,
) -> Result<Vec<WindowedSample>> {
    let width = samples_per_window(window_seconds, rec.sample_rate_hz)?;
    let stride = window_stride(width, overlap)?;
    if rec.len() < width {
        return Err(CoreError::Data(format!(
            "recording {}#{} has {} samples, shorter than one window of {width}",
            rec.user_id,
            rec.recording,
            rec.len()
        )));
    }
    let channels = rec.num_channels();
    let mut out = Vec::new();
    for k in 0..window_count(rec.len(), width, stride) {
        let start = k * stride;
        let span = &rec.activity[start..start + width];
        if span.iter().any(|&a| a != span[0]) {
            continue;
        }
        let mut values = vec![0.0; channels * width];
        for (t, row) in rec.samples[start..start + width].iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                values[c * width + t] = *v;
            }
        }
        out.push(WindowedSample {
            values,
            channels,
            width,
            domain,
            activity: Some(span[0]),
            user_id: rec.user_id.clone(),
            recording: rec.recording,
            seq_index: out.len(),
            start,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(len: usize, fs: f64, activity: Vec<usize>) -> RawRecording {
        RawRecording {
            user_id: "u".into(),
            recording: 0,
            sample_rate_hz: fs,
            channels: vec!["a".into(), "b".into()],
            samples: (0..len).map(|t| vec![t as f64, -(t as f64)]).collect(),
            activity,
        }
    }

    #[test]
    fn three_second_half_overlap_protocol() {
        assert_eq!(samples_per_window(3.0, 30.0).unwrap(), 90);
        assert_eq!(window_stride(90, 0.5).unwrap(), 45);
        assert_eq!(window_stride(90, 0.0).unwrap(), 90);
    }

    #[test]
    fn thousand_samples_give_21_windows() {
        let r = rec(1000, 30.0, vec![0; 1000]);
        let w = segment_windows(&r, 3.0, 0.5, Domain::Source).unwrap();
        assert_eq!(w.len(), 21);
        assert_eq!(w.len(), window_count(1000, 90, 45));
        assert_eq!(w[1].start, 45);
        assert_eq!(w[1].channel(0)[0], 45.0);
        assert_eq!(w[1].channel(1)[2], -47.0);
        assert!(w.windows(2).all(|p| p[0].seq_index < p[1].seq_index && p[0].start < p[1].start));
    }

    #[test]
    fn zero_overlap_tiles() {
        let r = rec(300, 30.0, vec![1; 300]);
        let w = segment_windows(&r, 3.0, 0.0, Domain::Target).unwrap();
        let starts: Vec<usize> = w.iter().map(|s| s.start).collect();
        assert_eq!(starts, vec![0, 90, 180]);
    }

    #[test]
    fn boundary_windows_are_discarded() {
        let mut act = vec![0; 100];
        act.extend(vec![1; 100]);
        let r = rec(200, 10.0, act);
        let w = segment_windows(&r, 3.0, 0.5, Domain::Source).unwrap();
        // starts 0..=170 step 15; windows covering sample 100 are dropped
        for s in &w {
            assert!(s.start + 30 <= 100 || s.start >= 100);
        }
        assert_eq!(w.iter().filter(|s| s.activity == Some(0)).count(), 5);
        assert_eq!(w.iter().filter(|s| s.activity == Some(1)).count(), 5);
    }

    #[test]
    fn short_recording_is_a_data_error() {
        let r = rec(50, 30.0, vec![0; 50]);
        assert!(matches!(
            segment_windows(&r, 3.0, 0.5, Domain::Source),
            Err(CoreError::Data(_))
        ));
    }
}
