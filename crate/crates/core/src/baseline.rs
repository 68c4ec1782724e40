//! Source-only reference: the feature extractor plus a linear classifier
//! trained with cross-entropy on the source user alone.

use dgdata_nn::{softmax_rows, Adam, BufferUpdates, Graph, Linear, Mode, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::components::{argmax, Prediction};
use crate::data::DatasetSplit;
use crate::features::FeatureExtractor;
use crate::metrics::{evaluate, Metrics, Predictor};
use crate::train::TrainConfig;
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SourceOnlyModel {
    pub features: FeatureExtractor,
    pub store: ParamStore,
    head: Linear,
}

impl Predictor for SourceOnlyModel {
    fn predict(&self, windows: &[&[f64]]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let mut g = Graph::new();
            let x = g.constant(self.features.batch_tensor(chunk.iter().copied())?);
            let mut unused = BufferUpdates::default();
            let f = self.features.forward(&mut g, x, Mode::Eval, &mut unused)?;
            let logits = self.head.forward(&mut g, &self.store, f)?;
            let probs = softmax_rows(g.value(logits))?;
            for i in 0..chunk.len() {
                let p = probs.row(i).to_vec();
                out.push(Prediction {
                    label: argmax(&p),
                    probabilities: p,
                });
            }
        }
        Ok(out)
    }
}

/// Trains on source windows only, with the same extractor, optimizer, epochs and seed.
pub fn train_source_only(cfg: &TrainConfig, split: &DatasetSplit) -> Result<SourceOnlyModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut features = FeatureExtractor::new(cfg.features.clone(), split.channels, split.width, &mut rng)?;
    let mut store = ParamStore::new("source_only");
    let head = Linear::new(&mut store, "head", features.output_dim, split.num_classes(), &mut rng);
    let adam = cfg.optimizer.adam();
    let mut fe_opt = Adam::new(adam, &features.store)?;
    let mut head_opt = Adam::new(adam, &store)?;
    rng.set_stream(1);

    let labels: Vec<usize> = split
        .source_train
        .iter()
        .map(|w| w.activity.ok_or_else(|| CoreError::Data("unlabeled source window".into())))
        .collect::<Result<_>>()?;
    let n = labels.len();
    let bs = cfg.batch_size.min(n).max(2);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(bs) {
            // Batch norm needs two rows; a trailing singleton is folded into the previous pass.
            if batch.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let x = g.constant(features.batch_tensor(batch.iter().map(|&i| split.source_train[i].values.as_slice()))?);
            let mut updates = BufferUpdates::default();
            let f = features.forward(&mut g, x, Mode::Train, &mut updates)?;
            let logits = head.forward(&mut g, &store, f)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = g.softmax_cross_entropy(logits, &y).map_err(|e| match e {
                dgdata_nn::NnError::NonFinite(op) => CoreError::Divergence {
                    epoch,
                    component: "source_only".into(),
                    detail: format!("non-finite value in {op}"),
                },
                other => other.into(),
            })?;
            g.backward(loss)?;
            let (fe_grads, head_grads) = (g.grads_for(&features.store), g.grads_for(&store));
            fe_opt.step(&mut features.store, &fe_grads)?;
            head_opt.step(&mut store, &head_grads)?;
            updates.apply(&mut features.store);
        }
    }
    Ok(SourceOnlyModel { features, store, head })
}

/// Trains the source-only model and scores it on the target test windows.
pub fn source_only_baseline(cfg: &TrainConfig, split: &DatasetSplit) -> Result<Metrics> {
    let model = train_source_only(cfg, split)?;
    evaluate(&model, &split.target_test, split.num_classes())
}
