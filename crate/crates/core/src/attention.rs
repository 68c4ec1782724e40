//! Temporal relation attention: lag weights fitted by least squares over
//! feature sequences, and the feature refinement they drive.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Feature vectors of consecutive windows, oldest first.
pub type FeatureSequence = Vec<Vec<f64>>;

/// Relative ridge added to the normal equations, scaled by their mean diagonal.
const RIDGE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    /// `beta[i]` weighs the feature `i + 1` steps back.
    pub beta: Vec<f64>,
    pub residual_norm: f64,
}

impl AttentionWeights {
    pub fn lags(&self) -> usize {
        self.beta.len()
    }
}

/// Fits `h_t ≈ Σ_i β_i h_{t−i}` over all sequences.
///
/// Each feature dimension gets its own scalar regression (normal equations
/// with a tiny relative ridge); the per-dimension coefficients are averaged
/// into one β per lag. Dimensions that are zero throughout are skipped.
pub fn fit_attention(sequences: &[FeatureSequence], p: usize) -> Result<AttentionWeights> {
    if p == 0 {
        return Err(CoreError::Config("attention needs at least one lag".into()));
    }
    let usable: Vec<&FeatureSequence> = sequences.iter().filter(|s| s.len() > p).collect();
    let Some(first) = usable.first() else {
        return Err(CoreError::Data(format!("no feature sequence is longer than {p} windows")));
    };
    let dim = first[0].len();
    if usable.iter().any(|s| s.iter().any(|f| f.len() != dim)) {
        return Err(CoreError::Data("feature sequences have mixed dimensions".into()));
    }

    let mut beta_sum = vec![0.0; p];
    let mut fitted = 0usize;
    for j in 0..dim {
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        for seq in &usable {
            for t in p..seq.len() {
                let y = seq[t][j];
                for a in 0..p {
                    let xa = seq[t - 1 - a][j];
                    xty[a] += xa * y;
                    for b in 0..p {
                        xtx[(a, b)] += xa * seq[t - 1 - b][j];
                    }
                }
            }
        }
        let trace = xtx.trace();
        if trace == 0.0 {
            continue;
        }
        let ridge = RIDGE * trace / p as f64;
        for a in 0..p {
            xtx[(a, a)] += ridge;
        }
        let beta = match xtx.clone().cholesky() {
            Some(ch) => ch.solve(&xty),
            None => xtx
                .lu()
                .solve(&xty)
                .ok_or_else(|| CoreError::Data("attention normal equations are singular".into()))?,
        };
        for (s, b) in beta_sum.iter_mut().zip(beta.iter()) {
            *s += b;
        }
        fitted += 1;
    }
    let beta: Vec<f64> = if fitted == 0 {
        vec![1.0 / p as f64; p]
    } else {
        beta_sum.iter().map(|s| s / fitted as f64).collect()
    };

    let mut sq = 0.0;
    for seq in &usable {
        for t in p..seq.len() {
            for j in 0..dim {
                let pred: f64 = (0..p).map(|i| beta[i] * seq[t - 1 - i][j]).sum();
                sq += (seq[t][j] - pred).powi(2);
            }
        }
    }
    Ok(AttentionWeights {
        beta,
        residual_norm: sq.sqrt(),
    })
}

/// Lag indices (0-based) of the `top_k` largest `|β|`, lower lags first on ties.
pub fn top_lags(beta: &[f64], top_k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..beta.len()).collect();
    idx.sort_by(|&a, &b| beta[b].abs().total_cmp(&beta[a].abs()).then(a.cmp(&b)));
    idx.truncate(top_k);
    idx
}

/// `(1 − ρ) h_t + ρ Σ_{i ∈ TopK} w̃_i h_{t−i}`, where `w̃` are the selected β
/// divided by the sum of their absolute values. The first `p` windows are
/// returned unchanged.
pub fn refine_features(seq: &[Vec<f64>], w: &AttentionWeights, top_k: usize, rho: f64) -> Result<FeatureSequence> {
    let p = w.lags();
    if top_k == 0 || top_k > p {
        return Err(CoreError::Config(format!("top_k must be in 1..={p}, got {top_k}")));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(CoreError::Config(format!("rho must be in [0, 1], got {rho}")));
    }
    let lags = top_lags(&w.beta, top_k);
    let norm: f64 = lags.iter().map(|&i| w.beta[i].abs()).sum();
    let mut out = seq.to_vec();
    if norm == 0.0 || rho == 0.0 {
        return Ok(out);
    }
    for t in p..seq.len() {
        for (j, v) in out[t].iter_mut().enumerate() {
            let past: f64 = lags.iter().map(|&i| w.beta[i] / norm * seq[t - 1 - i][j]).sum();
            *v = (1.0 - rho) * seq[t][j] + rho * past;
        }
    }
    Ok(out)
}

/// Splits windows into runs of consecutive windows.
///
/// `keys[i] = (stream, start)`; windows of the same stream whose starts differ
/// by exactly `stride` are consecutive. Returns window indices per run in
/// chronological order.
pub fn contiguous_runs<K: Ord + Copy>(keys: &[(K, usize)], stride: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for i in order {
        let extend = runs.last().and_then(|r| r.last()).is_some_and(|&prev| {
            keys[prev].0 == keys[i].0 && keys[prev].1 + stride == keys[i].1
        });
        if extend {
            runs.last_mut().expect("non-empty").push(i);
        } else {
            runs.push(vec![i]);
        }
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ar_sequence(beta: &[f64], init: &[f64], len: usize) -> Vec<f64> {
        let mut s = init.to_vec();
        while s.len() < len {
            let t = s.len();
            s.push(beta.iter().enumerate().map(|(i, b)| b * s[t - 1 - i]).sum());
        }
        s
    }

    #[test]
    fn recovers_two_lag_weights() {
        let seqs: Vec<FeatureSequence> = [[1.0, -2.0], [0.5, 3.0], [-1.0, 0.25]]
            .iter()
            .map(|init| ar_sequence(&[0.6, 0.4], init, 30).into_iter().map(|v| vec![v, 2.0 * v]).collect())
            .collect();
        let w = fit_attention(&seqs, 2).unwrap();
        assert!((w.beta[0] - 0.6).abs() < 1e-6 && (w.beta[1] - 0.4).abs() < 1e-6, "{:?}", w.beta);
        assert!(w.residual_norm < 1e-6);
    }

    #[test]
    fn constant_sequence_gives_uniform_weights() {
        let seq: FeatureSequence = vec![vec![2.0, -1.0]; 20];
        let w = fit_attention(&[seq], 4).unwrap();
        for b in &w.beta {
            assert!((b - 0.25).abs() < 1e-9, "{:?}", w.beta);
        }
    }

    #[test]
    fn too_short_is_a_data_error() {
        let seq: FeatureSequence = vec![vec![1.0]; 3];
        assert!(matches!(fit_attention(&[seq], 3), Err(CoreError::Data(_))));
    }

    #[test]
    fn rho_zero_is_identity() {
        let seq: FeatureSequence = (0..6).map(|t| vec![t as f64, -(t as f64)]).collect();
        let w = AttentionWeights { beta: vec![0.3, -0.7], residual_norm: 0.0 };
        assert_eq!(refine_features(&seq, &w, 2, 0.0).unwrap(), seq);
    }

    #[test]
    fn rho_one_top_one_copies_previous() {
        let seq: FeatureSequence = (0..5).map(|t| vec![t as f64 * 1.5]).collect();
        let w = AttentionWeights { beta: vec![1.0, 0.0], residual_norm: 0.0 };
        let r = refine_features(&seq, &w, 1, 1.0).unwrap();
        assert_eq!(r[0], seq[0]);
        assert_eq!(r[1], seq[1]);
        for t in 2..5 {
            assert_eq!(r[t], seq[t - 1]);
        }
    }

    #[test]
    fn hand_computed_blend() {
        let seq: FeatureSequence = vec![vec![1.0], vec![2.0], vec![4.0]];
        let w = AttentionWeights { beta: vec![0.6, 0.4], residual_norm: 0.0 };
        let r = refine_features(&seq, &w, 2, 0.5).unwrap();
        // 0.5·4 + 0.5·(0.6·2 + 0.4·1) = 2.8
        assert!((r[2][0] - 2.8).abs() < 1e-12);
        assert_eq!(r[..2], seq[..2]);
    }

    #[test]
    fn runs_split_on_gaps_and_streams() {
        let keys = [(0, 30), (0, 0), (0, 15), (1, 15), (0, 60), (1, 0)];
        assert_eq!(contiguous_runs(&keys, 15), vec![vec![1, 2, 0], vec![4], vec![5, 3]]);
    }
}
