//! Parameterized layers that register their tensors in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, RunningStats, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel).max(1) as f64).sqrt();
        let kernels = store.add(
            format!("{name}.kernels"),
            uniform(rng, &[out_channels, in_channels, kernel], bound),
        );
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[out_channels], bound));
        Self {
            kernels,
            bias,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernels);
        let b = g.param(store, self.bias);
        g.conv1d(x, k, Some(b), self.stride)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            momentum: 0.1,
        }
    }

    /// Train mode records the new running statistics in `updates`; the store itself is untouched.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        updates: &mut BufferUpdates,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let mut mean = store.get(self.running_mean).data().to_vec();
        let mut var = store.get(self.running_var).data().to_vec();
        let y = g.batchnorm(
            x,
            gamma,
            beta,
            RunningStats {
                mean: &mut mean,
                var: &mut var,
                momentum: self.momentum,
            },
            mode,
        )?;
        if mode == Mode::Train {
            updates.push(self.running_mean, mean);
            updates.push(self.running_var, var);
        }
        Ok(y)
    }
}

/// Buffer values produced by a train-mode forward pass, applied once the step is committed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BufferUpdates(Vec<(ParamId, Vec<f64>)>);

impl BufferUpdates {
    pub fn push(&mut self, id: ParamId, values: Vec<f64>) {
        self.0.push((id, values));
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(self, store: &mut ParamStore) {
        for (id, values) in self.0 {
            store.get_mut(id).data_mut().copy_from_slice(&values);
        }
    }
}
