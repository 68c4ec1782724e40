use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, WindowedSample};
use crate::{CoreError, Result};

/// A target window stripped of its activity label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledWindow {
    pub values: Vec<f64>,
    pub channels: usize,
    pub width: usize,
    pub user_id: String,
    pub recording: usize,
    pub seq_index: usize,
    pub start: usize,
}

/// The unlabeled target view handed to training; labels cannot be recovered from it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetTrain {
    windows: Vec<UnlabeledWindow>,
}

impl TargetTrain {
    pub fn from_windows(windows: &[WindowedSample]) -> Self {
        Self {
            windows: windows
                .iter()
                .map(|w| UnlabeledWindow {
                    values: w.values.clone(),
                    channels: w.channels,
                    width: w.width,
                    user_id: w.user_id.clone(),
                    recording: w.recording,
                    seq_index: w.seq_index,
                    start: w.start,
                })
                .collect(),
        }
    }

    pub fn windows(&self) -> &[UnlabeledWindow] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Labeled source windows, the unlabeled target view, and labeled target
/// validation/test subsets used only for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub class_names: Vec<String>,
    pub channels: usize,
    pub width: usize,
    /// Samples between consecutive window starts.
    pub stride: usize,
    pub source_train: Vec<WindowedSample>,
    pub target_train: TargetTrain,
    pub target_val: Vec<WindowedSample>,
    pub target_test: Vec<WindowedSample>,
}

impl DatasetSplit {
    /// Builds the split from normalized windows. The whole target user is the
    /// unlabeled training view; its labeled copy is divided into val/test.
    pub fn new(
        class_names: Vec<String>,
        stride: usize,
        source: Vec<WindowedSample>,
        target: Vec<WindowedSample>,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let first = source
            .first()
            .ok_or_else(|| CoreError::Data("no source windows".into()))?;
        let (channels, width) = (first.channels, first.width);
        if target.is_empty() {
            return Err(CoreError::Data("no target windows".into()));
        }
        if source
            .iter()
            .chain(&target)
            .any(|w| w.channels != channels || w.width != width)
        {
            return Err(CoreError::Data("windows have inconsistent shapes".into()));
        }
        if source.iter().any(|w| w.activity.is_none() || w.domain != Domain::Source) {
            return Err(CoreError::Data("source windows must be labeled source-domain windows".into()));
        }
        let target_train = TargetTrain::from_windows(&target);
        let (target_val, target_test) = split_target(&target, val_fraction, seed)?;
        Ok(Self {
            class_names,
            channels,
            width,
            stride,
            source_train: source,
            target_train,
            target_val,
            target_test,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_source(&self) -> usize {
        self.source_train.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_train.len()
    }
}

/// Stratified, seeded split of labeled target windows into (validation, test).
///
/// Per-class validation counts use largest-remainder rounding so the total is
/// `round(n * val_fraction)` and every class is within one window of its share.
/// Classes with fewer than two windows stay whole in the test subset.
pub fn split_target(
    windows: &[WindowedSample],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<WindowedSample>, Vec<WindowedSample>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(CoreError::Config(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        let a = w
            .activity
            .ok_or_else(|| CoreError::Data("target evaluation windows must carry labels".into()))?;
        by_class.entry(a).or_default().push(i);
    }

    let eligible: Vec<(usize, usize)> = by_class
        .iter()
        .filter(|(c, idx)| {
            if idx.len() < 2 {
                log::warn!("class {c} has {} target window(s); kept whole in test", idx.len());
                false
            } else {
                true
            }
        })
        .map(|(c, idx)| (*c, idx.len()))
        .collect();
    let eligible_total: usize = eligible.iter().map(|e| e.1).sum();
    let goal = (eligible_total as f64 * val_fraction).round() as usize;
    let mut quota: BTreeMap<usize, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    for &(c, n) in &eligible {
        let exact = n as f64 * val_fraction;
        let base = (exact.floor() as usize).clamp(1, n - 1);
        quota.insert(c, base);
        remainders.push((exact - exact.floor(), c));
    }
    let mut assigned: usize = quota.values().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in remainders.iter().cycle().take(remainders.len() * 2) {
        if assigned >= goal {
            break;
        }
        let n = by_class[&c].len();
        let q = quota.get_mut(&c).expect("eligible class");
        if *q + 1 < n {
            *q += 1;
            assigned += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_val = vec![false; windows.len()];
    for (c, idx) in &by_class {
        let Some(&q) = quota.get(c) else { continue };
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..q] {
            in_val[i] = true;
        }
    }
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (w, v) in windows.iter().zip(in_val) {
        if v {
            val.push(w.clone());
        } else {
            test.push(w.clone());
        }
    }
    Ok((val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn windows(counts: &[usize]) -> Vec<WindowedSample> {
        let mut out = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let k = out.len();
                out.push(WindowedSample {
                    values: vec![k as f64],
                    channels: 1,
                    width: 1,
                    domain: Domain::Target,
                    activity: Some(c),
                    user_id: "t".into(),
                    recording: 0,
                    seq_index: k,
                    start: k,
                });
            }
        }
        out
    }

    #[test]
    fn balanced_half_split() {
        let w = windows(&[25, 25, 25, 25]);
        let (val, test) = split_target(&w, 0.5, 1).unwrap();
        assert_eq!((val.len(), test.len()), (50, 50));
    }

    #[test]
    fn same_seed_same_split() {
        let w = windows(&[13, 7, 30]);
        let a = split_target(&w, 0.3, 42).unwrap();
        let b = split_target(&w, 0.3, 42).unwrap();
        assert_eq!(a, b);
        let c = split_target(&w, 0.3, 43).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn per_class_share_within_one() {
        let counts = [13, 7, 30, 2, 9];
        let w = windows(&counts);
        let (val, test) = split_target(&w, 0.37, 5).unwrap();
        assert_eq!(val.len() + test.len(), w.len());
        for (c, &n) in counts.iter().enumerate() {
            let got = val.iter().filter(|s| s.activity == Some(c)).count() as f64;
            assert!((got - n as f64 * 0.37).abs() <= 1.0, "class {c}: {got}");
        }
        let val_ids: Vec<usize> = val.iter().map(|s| s.seq_index).collect();
        assert!(test.iter().all(|s| !val_ids.contains(&s.seq_index)));
    }

    #[test]
    fn singleton_class_stays_in_test() {
        let w = windows(&[1, 10]);
        let (val, test) = split_target(&w, 0.5, 0).unwrap();
        assert!(val.iter().all(|s| s.activity == Some(1)));
        assert_eq!(test.iter().filter(|s| s.activity == Some(0)).count(), 1);
    }

    #[test]
    fn fraction_out_of_range() {
        let w = windows(&[4]);
        assert!(split_target(&w, 0.0, 0).is_err());
        assert!(split_target(&w, 1.0, 0).is_err());
    }
}
