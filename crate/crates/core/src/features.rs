//! The shared convolutional feature extractor.

use dgdata_nn::{BatchNorm, BufferUpdates, Conv1d, Graph, Mode, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            conv1_channels: 32,
            conv2_channels: 64,
            kernel: 9,
            pool: 2,
        }
    }
}

impl FeatureConfig {
    /// Flattened feature length for windows of `width` samples.
    pub fn output_dim(&self, width: usize) -> Result<usize> {
        let conv = |len: usize| -> Result<usize> {
            if self.kernel == 0 || self.kernel > len {
                return Err(CoreError::Config(format!(
                    "kernel {} does not fit a length-{len} feature map",
                    self.kernel
                )));
            }
            Ok(len - self.kernel + 1)
        };
        let pool = |len: usize| -> Result<usize> {
            if self.pool == 0 || self.pool > len {
                return Err(CoreError::Config(format!(
                    "pool {} does not fit a length-{len} feature map",
                    self.pool
                )));
            }
            Ok((len - self.pool) / self.pool + 1)
        };
        let len = pool(conv(pool(conv(width)?)?)?)?;
        Ok(self.conv2_channels * len)
    }
}

/// `conv → bn → relu → pool` twice, then flatten.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub config: FeatureConfig,
    pub channels: usize,
    pub width: usize,
    pub output_dim: usize,
    pub store: ParamStore,
    conv1: Conv1d,
    bn1: BatchNorm,
    conv2: Conv1d,
    bn2: BatchNorm,
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(config: FeatureConfig, channels: usize, width: usize, rng: &mut R) -> Result<Self> {
        if config.conv1_channels == 0 || config.conv2_channels == 0 {
            return Err(CoreError::Config("convolution channel counts must be positive".into()));
        }
        let output_dim = config.output_dim(width)?;
        let mut store = ParamStore::new("features");
        let conv1 = Conv1d::new(&mut store, "conv1", channels, config.conv1_channels, config.kernel, 1, rng);
        let bn1 = BatchNorm::new(&mut store, "bn1", config.conv1_channels);
        let conv2 = Conv1d::new(
            &mut store,
            "conv2",
            config.conv1_channels,
            config.conv2_channels,
            config.kernel,
            1,
            rng,
        );
        let bn2 = BatchNorm::new(&mut store, "bn2", config.conv2_channels);
        Ok(Self {
            config,
            channels,
            width,
            output_dim,
            store,
            conv1,
            bn1,
            conv2,
            bn2,
        })
    }

    /// Stacks windows (each row-major `[channels, width]`) into `[n, channels, width]`.
    pub fn batch_tensor<'a>(&self, windows: impl IntoIterator<Item = &'a [f64]>) -> Result<Tensor> {
        let per = self.channels * self.width;
        let mut data = Vec::new();
        let mut n = 0;
        for w in windows {
            if w.len() != per {
                return Err(CoreError::Nn(dgdata_nn::NnError::Dimension(format!(
                    "window of {} values, extractor expects {} x {}",
                    w.len(),
                    self.channels,
                    self.width
                ))));
            }
            data.extend_from_slice(w);
            n += 1;
        }
        Ok(Tensor::new(vec![n, self.channels, self.width], data)?)
    }

    /// `x: [n, channels, width]` to `[n, output_dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, updates: &mut BufferUpdates) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 3 || shape[1] != self.channels || shape[2] != self.width {
            return Err(CoreError::Nn(dgdata_nn::NnError::Dimension(format!(
                "feature extractor expects [n, {}, {}], got {shape:?}",
                self.channels, self.width
            ))));
        }
        let p = self.config.pool;
        let h = self.conv1.forward(g, &self.store, x)?;
        let h = self.bn1.forward(g, &self.store, h, mode, updates)?;
        let h = g.relu(h)?;
        let h = g.maxpool1d(h, p, p)?;
        let h = self.conv2.forward(g, &self.store, h)?;
        let h = self.bn2.forward(g, &self.store, h, mode, updates)?;
        let h = g.relu(h)?;
        let h = g.maxpool1d(h, p, p)?;
        Ok(g.flatten(h)?)
    }

    /// Eval-mode features for a set of windows, one row each.
    pub fn extract<'a>(&self, windows: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<Vec<f64>>> {
        let x = self.batch_tensor(windows)?;
        let n = x.shape()[0];
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut unused = BufferUpdates::default();
        let f = self.forward(&mut g, xv, Mode::Eval, &mut unused)?;
        let t = g.value(f);
        Ok((0..n).map(|i| t.row(i).to_vec()).collect())
    }
}

/// Eval-mode features in chunks so graphs stay small.
pub fn extract_features(fe: &FeatureExtractor, windows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(256) {
        out.extend(fe.extract(chunk.iter().copied())?);
    }
    Ok(out)
}

/// Running per-dimension minimum and maximum of training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub frozen: bool,
}

impl FeatureRange {
    pub fn new(dim: usize) -> Self {
        Self {
            min: vec![f64::INFINITY; dim],
            max: vec![f64::NEG_INFINITY; dim],
            frozen: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.min.iter().zip(&self.max).all(|(a, b)| a <= b)
    }

    /// Widens the range to cover `rows`; no-op once frozen.
    pub fn update(&mut self, rows: &[f64]) {
        if self.frozen {
            return;
        }
        let d = self.min.len();
        for row in rows.chunks(d) {
            for (i, &v) in row.iter().enumerate() {
                self.min[i] = self.min[i].min(v);
                self.max[i] = self.max[i].max(v);
            }
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}

/// `(f − min)/(max − min)` clipped to `[0, 1]`; zero-width dimensions map to 0.5.
pub fn squash_features(f: &[f64], range: &FeatureRange) -> Vec<f64> {
    let d = range.min.len();
    f.iter()
        .enumerate()
        .map(|(j, &v)| {
            let (lo, hi) = (range.min[j % d], range.max[j % d]);
            let width = hi - lo;
            if !(width > 0.0) {
                0.5
            } else {
                ((v - lo) / width).clamp(0.0, 1.0)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_architecture_on_ninety_samples() {
        assert_eq!(FeatureConfig::default().output_dim(90).unwrap(), 1024);
    }

    #[test]
    fn zero_window_with_zero_biases_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fe = FeatureExtractor::new(FeatureConfig::default(), 6, 90, &mut rng).unwrap();
        for name in ["conv1.bias", "conv2.bias"] {
            let id = fe.store.find(name).unwrap();
            fe.store.get_mut(id).data_mut().fill(0.0);
        }
        let zero = vec![0.0; 6 * 90];
        let f = fe.extract([zero.as_slice()]).unwrap();
        assert_eq!(f[0].len(), 1024);
        assert!(f[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fe = FeatureExtractor::new(FeatureConfig::default(), 6, 90, &mut rng).unwrap();
        let short = vec![0.0; 6 * 80];
        assert!(fe.extract([short.as_slice()]).is_err());
    }

    #[test]
    fn squash_endpoints_and_midpoint() {
        let range = FeatureRange {
            min: vec![-1.0, 2.0, 3.0],
            max: vec![1.0, 4.0, 3.0],
            frozen: false,
        };
        assert_eq!(squash_features(&[-1.0, 2.0, 3.0], &range), vec![0.0, 0.0, 0.5]);
        assert_eq!(squash_features(&[1.0, 4.0, 9.0], &range), vec![1.0, 1.0, 0.5]);
        assert_eq!(squash_features(&[0.0, 3.0, -9.0], &range), vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn frozen_range_stops_moving() {
        let mut r = FeatureRange::new(2);
        r.update(&[0.0, 1.0, 2.0, -1.0]);
        assert_eq!((r.min.clone(), r.max.clone()), (vec![0.0, -1.0], vec![2.0, 1.0]));
        r.freeze();
        r.update(&[10.0, 10.0]);
        assert_eq!(r.max, vec![2.0, 1.0]);
    }
}
