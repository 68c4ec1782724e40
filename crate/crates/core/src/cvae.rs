//! Conditional-VAE building blocks shared by the three components.

use dgdata_nn::{BatchNorm, BufferUpdates, Graph, Linear, Mode, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeConfig {
    pub hidden: usize,
    pub latent: usize,
    /// Width of the hidden layer in adversarial heads.
    pub adversarial_hidden: usize,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            latent: 64,
            adversarial_hidden: 256,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent == 0 || self.adversarial_hidden == 0 {
            return Err(CoreError::Config("network widths must be positive".into()));
        }
        Ok(())
    }
}

/// Latent mean and log-variance nodes.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    pub mean: Var,
    pub logvar: Var,
}

/// Encoder mean/log-variance heads and the sigmoid-terminated decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CvaeBlock {
    pub input_dim: usize,
    pub latent: usize,
    mean1: Linear,
    mean2: Linear,
    logvar1: Linear,
    logvar2: Linear,
    dec1: Linear,
    dec2: Linear,
}

impl CvaeBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, input_dim: usize, cfg: &CvaeConfig, rng: &mut R) -> Self {
        let (h, z) = (cfg.hidden, cfg.latent);
        Self {
            input_dim,
            latent: z,
            mean1: Linear::new(store, "enc_mean.0", input_dim, h, rng),
            mean2: Linear::new(store, "enc_mean.1", h, z, rng),
            logvar1: Linear::new(store, "enc_logvar.0", input_dim, h, rng),
            logvar2: Linear::new(store, "enc_logvar.1", h, z, rng),
            dec1: Linear::new(store, "dec.0", z, h, rng),
            dec2: Linear::new(store, "dec.1", h, input_dim, rng),
        }
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<LatentGaussian> {
        let m = self.mean1.forward(g, store, f)?;
        let m = g.relu(m)?;
        let mean = self.mean2.forward(g, store, m)?;
        let v = self.logvar1.forward(g, store, f)?;
        let v = g.relu(v)?;
        let logvar = self.logvar2.forward(g, store, v)?;
        Ok(LatentGaussian { mean, logvar })
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let h = self.dec1.forward(g, store, z)?;
        let h = g.relu(h)?;
        let out = self.dec2.forward(g, store, h)?;
        Ok(g.sigmoid(out)?)
    }
}

/// A constraint head producing logits from latent codes.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// One linear map.
    Simple(Linear),
    /// `linear → batchnorm → relu → linear`; used behind gradient reversal.
    Adversarial { first: Linear, bn: BatchNorm, second: Linear },
}

impl Head {
    pub fn simple<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, outputs: usize, rng: &mut R) -> Self {
        Head::Simple(Linear::new(store, name, input, outputs, rng))
    }

    pub fn adversarial<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Head::Adversarial {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), hidden),
            second: Linear::new(store, &format!("{name}.1"), hidden, outputs, rng),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Head::Simple(l) => l.fan_out,
            Head::Adversarial { second, .. } => second.fan_out,
        }
    }

    /// Pre-softmax logits.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        mode: Mode,
        updates: &mut BufferUpdates,
    ) -> Result<Var> {
        match self {
            Head::Simple(l) => l.forward(g, store, z),
            Head::Adversarial { first, bn, second } => {
                let h = first.forward(g, store, z)?;
                let h = bn.forward(g, store, h, mode, updates)?;
                let h = g.relu(h)?;
                second.forward(g, store, h)
            }
        }
        .map_err(Into::into)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dgdata_nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(store: &mut ParamStore) {
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_params_encode_to_zero_and_decode_to_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new("c");
        let cfg = CvaeConfig {
            hidden: 5,
            latent: 3,
            adversarial_hidden: 4,
        };
        let block = CvaeBlock::new(&mut store, 7, &cfg, &mut rng);
        zeroed(&mut store);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 7]));
        let lat = block.encode(&mut g, &store, x).unwrap();
        assert_eq!(g.value(lat.mean).shape(), &[2, 3]);
        assert!(g.value(lat.mean).data().iter().all(|&v| v == 0.0));
        assert!(g.value(lat.logvar).data().iter().all(|&v| v == 0.0));
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let out = block.decode(&mut g, &store, z).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 7]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decoder_output_is_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new("c");
        let block = CvaeBlock::new(&mut store, 4, &CvaeConfig::default(), &mut rng);
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![3, 64], (0..192).map(|i| (i as f64 - 96.0) / 10.0).collect()).unwrap());
        let out = block.decode(&mut g, &store, z).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn head_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new("h");
        let simple = Head::simple(&mut store, "s", 3, 4, &mut rng);
        let adv = Head::adversarial(&mut store, "a", 3, 8, 5, &mut rng);
        zeroed(&mut store);
        let mut g = Graph::new();
        let z = g.constant(Tensor::full(&[6, 3], 0.3));
        let mut up = BufferUpdates::default();
        let s = simple.logits(&mut g, &store, z, Mode::Train, &mut up).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
        let a = adv.logits(&mut g, &store, z, Mode::Train, &mut up).unwrap();
        assert_eq!(g.value(a).shape(), &[6, 5]);
        assert_eq!(adv.outputs(), 5);
    }
}
