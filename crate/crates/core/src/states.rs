//! Temporal-state pseudo-labels: per-class k-means over refined features,
//! median smoothing along each recording, and canonical state numbering.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::composite_pseudo_label;
use crate::data::Domain;
use crate::{CoreError, Result};

const KMEANS_ITERATIONS: usize = 50;

/// One training window as seen by the state assignment.
#[derive(Clone, Copy, Debug)]
pub struct StateInput<'a> {
    pub features: &'a [f64],
    /// True class for source windows, pseudo-class (or none) for target windows.
    pub class: Option<usize>,
    pub domain: Domain,
    pub recording: usize,
    pub seq_index: usize,
}

impl StateInput<'_> {
    fn key(&self) -> (Domain, usize, usize) {
        (self.domain, self.recording, self.seq_index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalStateLabels {
    pub states: Vec<usize>,
    pub k: usize,
    pub epoch: usize,
}

impl TemporalStateLabels {
    /// The initial labels: every window in state 0.
    pub fn initial(n: usize, k: usize) -> Self {
        Self {
            states: vec![0; n],
            k,
            epoch: 0,
        }
    }

    /// Fraction of windows whose state differs from `previous`.
    pub fn churn(&self, previous: &TemporalStateLabels) -> f64 {
        if self.states.is_empty() {
            return 0.0;
        }
        let changed = self.states.iter().zip(&previous.states).filter(|(a, b)| a != b).count();
        changed as f64 / self.states.len() as f64
    }
}

/// State labels, target pseudo-classes and the composite labels they induce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub states: TemporalStateLabels,
    /// Pseudo-class per target training window; `None` during warmup.
    pub target_classes: Vec<Option<usize>>,
    /// `class · K + state` per training window (source first, then target).
    pub composite: Vec<Option<usize>>,
}

impl PseudoLabels {
    pub fn new(states: TemporalStateLabels, source_classes: &[usize], target_classes: Vec<Option<usize>>) -> Result<Self> {
        let n = source_classes.len() + target_classes.len();
        if states.states.len() != n {
            return Err(CoreError::State(format!(
                "{} state labels for {n} training windows",
                states.states.len()
            )));
        }
        let classes = source_classes.iter().map(|&c| Some(c)).chain(target_classes.iter().copied());
        let composite = classes
            .zip(&states.states)
            .map(|(c, &s)| c.map(|c| composite_pseudo_label(c, s, states.k)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            states,
            target_classes,
            composite,
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. Returns (centroids, assignment).
pub fn kmeans(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = points.len();
    let k = k.min(n);
    if k == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.gen_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(points[next].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().expect("just pushed")));
        }
    }

    lloyd(points, centroids)
}

/// Lloyd iterations from the given initial centroids. Returns (centroids, assignment).
pub fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let k = centroids.len();
    if k == 0 || points.is_empty() {
        return (centroids, vec![0; points.len()]);
    }
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..KMEANS_ITERATIONS {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    (centroids, assign)
}

/// Mean feature vector of each state, or `None` unless all `k` states occur.
fn state_means(points: &[&[f64]], states: impl Iterator<Item = usize>, k: usize) -> Option<Vec<Vec<f64>>> {
    if points.len() < k {
        return None;
    }
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, s) in points.iter().zip(states) {
        if s >= k {
            return None;
        }
        counts[s] += 1;
        for (acc, v) in sums[s].iter_mut().zip(p.iter()) {
            *acc += v;
        }
    }
    if counts.contains(&0) {
        return None;
    }
    Some(sums.into_iter().zip(counts).map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect()).collect())
}

/// Median of three, used to smooth state sequences.
fn median3(a: usize, b: usize, c: usize) -> usize {
    let mut v = [a, b, c];
    v.sort_unstable();
    v[1]
}

/// One width-3 median pass over a sequence; endpoints are unchanged.
pub fn median_filter3(states: &[usize]) -> Vec<usize> {
    let mut out = states.to_vec();
    for i in 1..states.len().saturating_sub(1) {
        out[i] = median3(states[i - 1], states[i], states[i + 1]);
    }
    out
}

/// Assigns a temporal state to every window.
///
/// For each class, the refined features of its windows (both users) are
/// clustered into `k` groups (fewer if the class has fewer windows). Windows
/// without a class are given the state of the nearest centroid of any class.
/// The labels are then median-filtered along each recording's same-class runs,
/// and renumbered per class by first chronological appearance in the source
/// user (then the target user).
///
/// With `previous` labels, a class whose windows cover all `k` previous
/// states starts Lloyd's iterations from those states' means instead of
/// k-means++ seeding, so state identities carry over between epochs.
pub fn assign_temporal_states(
    inputs: &[StateInput],
    k: usize,
    seed: u64,
    epoch: usize,
    previous: Option<&TemporalStateLabels>,
) -> Result<TemporalStateLabels> {
    if let Some(prev) = previous {
        if prev.states.len() != inputs.len() {
            return Err(CoreError::State(format!(
                "{} previous state labels for {} windows",
                prev.states.len(),
                inputs.len()
            )));
        }
    }
    if k == 0 {
        return Err(CoreError::Config("states per class must be at least 1".into()));
    }
    let n = inputs.len();
    // Canonical order makes the result independent of input order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| inputs[i].key());

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        if let Some(c) = inputs[i].class {
            by_class.entry(c).or_default().push(i);
        }
    }

    let mut raw = vec![0usize; n];
    let mut all_centroids: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (&c, members) in &by_class {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let points: Vec<&[f64]> = members.iter().map(|&i| inputs[i].features).collect();
        let warm = previous.and_then(|prev| state_means(&points, members.iter().map(|&i| prev.states[i]), k));
        let (centroids, assign) = match warm {
            Some(init) => lloyd(&points, init),
            None => kmeans(&points, k, &mut rng),
        };
        for (&i, &a) in members.iter().zip(&assign) {
            raw[i] = a;
        }
        for (s, centroid) in centroids.into_iter().enumerate() {
            all_centroids.push((c, s, centroid));
        }
    }
    // Unlabeled windows: nearest centroid over all classes.
    let centroid_points: Vec<Vec<f64>> = all_centroids.iter().map(|t| t.2.clone()).collect();
    let mut effective_class: Vec<Option<usize>> = inputs.iter().map(|w| w.class).collect();
    for &i in &order {
        if inputs[i].class.is_none() && !centroid_points.is_empty() {
            let j = nearest(inputs[i].features, &centroid_points);
            effective_class[i] = Some(all_centroids[j].0);
            raw[i] = all_centroids[j].1;
        }
    }

    // Median filter along same-class runs of each recording.
    let mut smoothed = raw.clone();
    let mut run: Vec<usize> = Vec::new();
    let flush = |run: &mut Vec<usize>, smoothed: &mut Vec<usize>| {
        let seq: Vec<usize> = run.iter().map(|&i| raw[i]).collect();
        for (&i, s) in run.iter().zip(median_filter3(&seq)) {
            smoothed[i] = s;
        }
        run.clear();
    };
    for &i in &order {
        if let Some(&prev) = run.last() {
            let same_stream = inputs[prev].domain == inputs[i].domain && inputs[prev].recording == inputs[i].recording;
            if !same_stream || effective_class[prev] != effective_class[i] {
                flush(&mut run, &mut smoothed);
            }
        }
        run.push(i);
    }
    flush(&mut run, &mut smoothed);

    // Per-class renumbering by first appearance (source before target).
    let mut maps: BTreeMap<Option<usize>, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut states = vec![0usize; n];
    for &i in &order {
        let map = maps.entry(effective_class[i]).or_default();
        let next = map.len();
        let id = *map.entry(smoothed[i]).or_insert(next);
        states[i] = id;
    }
    Ok(TemporalStateLabels { states, k, epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn input(features: &[f64], class: Option<usize>, seq_index: usize) -> StateInput<'_> {
        StateInput {
            features,
            class,
            domain: Domain::Source,
            recording: 0,
            seq_index,
        }
    }

    #[test]
    fn median_filter_removes_isolated_state() {
        assert_eq!(median_filter3(&[0, 0, 1, 0, 0]), vec![0, 0, 0, 0, 0]);
        assert_eq!(median_filter3(&[2, 0]), vec![2, 0]);
    }

    #[test]
    fn one_state_per_class_is_all_zero() {
        let feats: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let inputs: Vec<_> = feats.iter().enumerate().map(|(i, f)| input(f, Some(i % 2), i)).collect();
        let labels = assign_temporal_states(&inputs, 1, 0, 1, None).unwrap();
        assert!(labels.states.iter().all(|&s| s == 0));
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.1).unwrap();
        // Blocks of 5 windows alternate between two blobs, so smoothing keeps them.
        let truth: Vec<usize> = (0..40).map(|i| (i / 5) % 2).collect();
        let feats: Vec<Vec<f64>> = truth
            .iter()
            .map(|&b| vec![10.0 * b as f64 + noise.sample(&mut rng), noise.sample(&mut rng)])
            .collect();
        let inputs: Vec<_> = feats.iter().enumerate().map(|(i, f)| input(f, Some(0), i)).collect();
        let labels = assign_temporal_states(&inputs, 2, 3, 1, None).unwrap();
        assert_eq!(labels.states, truth);
    }

    #[test]
    fn small_class_uses_fewer_states() {
        let feats = [vec![0.0], vec![5.0]];
        let inputs: Vec<_> = feats.iter().enumerate().map(|(i, f)| input(f, Some(0), i)).collect();
        let labels = assign_temporal_states(&inputs, 3, 0, 1, None).unwrap();
        assert_eq!(labels.states, vec![0, 1]);
    }

    #[test]
    fn churn_counts_changes() {
        let a = TemporalStateLabels { states: vec![0, 1, 2, 0], k: 3, epoch: 1 };
        let b = TemporalStateLabels { states: vec![0, 2, 2, 1], k: 3, epoch: 2 };
        assert_eq!(b.churn(&a), 0.5);
    }
}
