//! The iterative three-component training loop.

use std::fmt::Write as _;

use dgdata_nn::{Adam, AdamConfig, BufferUpdates, Graph, Mode, NnError, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{contiguous_runs, fit_attention, refine_features, AttentionWeights};
use crate::components::{
    classify_target, Classifier, Component, ComponentBatch, ComponentKind, FineGrained, LossBreakdown, LossOptions,
    LossWeights, Prediction, Temporal,
};
use crate::cvae::CvaeConfig;
use crate::data::{DatasetSplit, Domain};
use crate::features::{squash_features, FeatureConfig, FeatureExtractor, FeatureRange};
use crate::metrics::{evaluate, Predictor};
use crate::states::{assign_temporal_states, PseudoLabels, StateInput, TemporalStateLabels};
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub lags: usize,
    pub top_k: usize,
    pub rho: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            lags: 4,
            top_k: 2,
            rho: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Half source, half target windows.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub features: FeatureConfig,
    pub cvae: CvaeConfig,
    pub fine_grained: LossWeights,
    pub temporal: LossWeights,
    pub classifier: LossWeights,
    pub states_per_class: usize,
    pub attention: AttentionConfig,
    /// Steepness of the classifier's gradient-reversal ramp.
    pub lambda_steepness: f64,
    /// Fixed gradient-reversal strength of the temporal component.
    pub temporal_lambda: f64,
    /// Epochs before target pseudo-classes enter the class constraints.
    pub warmup_epochs: usize,
    pub extractor_updates: ExtractorUpdates,
    pub seed: u64,
}

/// Which component losses update the shared feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorUpdates {
    pub fine_grained: bool,
    pub temporal: bool,
    pub classifier: bool,
}

impl Default for ExtractorUpdates {
    fn default() -> Self {
        Self {
            fine_grained: true,
            temporal: true,
            classifier: true,
        }
    }
}

impl ExtractorUpdates {
    pub fn get(&self, kind: ComponentKind) -> bool {
        match kind {
            ComponentKind::FineGrained => self.fine_grained,
            ComponentKind::Temporal => self.temporal,
            ComponentKind::Classifier => self.classifier,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            features: FeatureConfig::default(),
            cvae: CvaeConfig::default(),
            fine_grained: LossWeights::default(),
            temporal: LossWeights::default(),
            classifier: LossWeights::default(),
            states_per_class: 3,
            attention: AttentionConfig::default(),
            lambda_steepness: 10.0,
            temporal_lambda: 1.0,
            warmup_epochs: 1,
            extractor_updates: ExtractorUpdates::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small networks for short windows on a single CPU core.
    pub fn desk() -> Self {
        Self {
            features: FeatureConfig {
                conv1_channels: 8,
                conv2_channels: 16,
                kernel: 5,
                pool: 2,
            },
            cvae: CvaeConfig {
                hidden: 32,
                latent: 16,
                adversarial_hidden: 32,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(CoreError::Config(format!(
                "batch_size must be even and at least 2, got {}",
                self.batch_size
            )));
        }
        if self.states_per_class == 0 {
            return Err(CoreError::Config("states_per_class must be at least 1".into()));
        }
        let a = &self.attention;
        if a.lags == 0 || a.top_k == 0 || a.top_k > a.lags || !(0.0..=1.0).contains(&a.rho) {
            return Err(CoreError::Config("attention needs lags >= 1, 1 <= top_k <= lags, rho in [0, 1]".into()));
        }
        if !(self.lambda_steepness >= 0.0) || !(self.temporal_lambda >= 0.0) {
            return Err(CoreError::Config("gradient reversal parameters must be non-negative".into()));
        }
        self.optimizer.adam().validate()?;
        self.cvae.validate()?;
        for w in [&self.fine_grained, &self.temporal, &self.classifier] {
            w.validate()?;
        }
        Ok(())
    }
}

/// Gradient-reversal ramp `2 / (1 + e^{−γ p}) − 1` with γ = 10.
pub fn grl_lambda(progress: f64) -> f64 {
    grl_lambda_with(progress, 10.0)
}

pub fn grl_lambda_with(progress: f64, steepness: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    2.0 / (1.0 + (-steepness * p).exp()) - 1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fine_grained: LossBreakdown,
    pub temporal: LossBreakdown,
    pub classifier: LossBreakdown,
    pub val_accuracy: f64,
    pub state_churn: f64,
    /// Classifier reversal strength at the end of the epoch.
    pub lambda: f64,
    pub attention_beta: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for c in ComponentKind::ALL {
            for t in ["recon", "mean_variance", "class", "domain", "state", "total"] {
                let _ = write!(out, ",{}_{t}", c.name());
            }
        }
        out.push_str(",val_accuracy,state_churn,lambda");
        let lags = self.epochs.first().map_or(0, |r| r.attention_beta.len());
        for i in 1..=lags {
            let _ = write!(out, ",beta_{i}");
        }
        out.push('\n');
        for r in &self.epochs {
            let _ = write!(out, "{}", r.epoch);
            for b in [&r.fine_grained, &r.temporal, &r.classifier] {
                for v in b.terms().iter().chain([&b.total]) {
                    let _ = write!(out, ",{v}");
                }
            }
            let _ = write!(out, ",{},{},{}", r.val_accuracy, r.state_churn, r.lambda);
            for b in &r.attention_beta {
                let _ = write!(out, ",{b}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Feature extractor plus the three components.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub class_names: Vec<String>,
    pub features: FeatureExtractor,
    pub fine_grained: FineGrained,
    pub temporal: Temporal,
    pub classifier: Classifier,
    pub range: FeatureRange,
}

impl TrainedModel {
    pub fn new(cfg: &TrainConfig, split: &DatasetSplit) -> Result<Self> {
        Self::build(cfg, split.class_names.clone(), split.channels, split.width)
    }

    /// Freshly initialized networks for `channels × width` windows.
    pub fn build(cfg: &TrainConfig, class_names: Vec<String>, channels: usize, width: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let features = FeatureExtractor::new(cfg.features.clone(), channels, width, &mut rng)?;
        let d = features.output_dim;
        let (c, k) = (class_names.len(), cfg.states_per_class);
        let fine_grained = FineGrained::new(d, c, k, &cfg.cvae, cfg.fine_grained.clone(), &mut rng)?;
        let temporal = Temporal::new(d, c, k, &cfg.cvae, cfg.temporal.clone(), &mut rng)?;
        let classifier = Classifier::new(d, c, k, &cfg.cvae, cfg.classifier.clone(), &mut rng)?;
        Ok(Self {
            class_names,
            range: FeatureRange::new(d),
            features,
            fine_grained,
            temporal,
            classifier,
        })
    }

    pub fn component(&self, kind: ComponentKind) -> &dyn Component {
        match kind {
            ComponentKind::FineGrained => &self.fine_grained,
            ComponentKind::Temporal => &self.temporal,
            ComponentKind::Classifier => &self.classifier,
        }
    }

    pub fn component_mut(&mut self, kind: ComponentKind) -> &mut dyn Component {
        match kind {
            ComponentKind::FineGrained => &mut self.fine_grained,
            ComponentKind::Temporal => &mut self.temporal,
            ComponentKind::Classifier => &mut self.classifier,
        }
    }
}

impl Predictor for TrainedModel {
    fn predict(&self, windows: &[&[f64]]) -> Result<Vec<Prediction>> {
        classify_target(&self.features, &self.classifier, windows)
    }
}

/// One Adam state per network.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub features: Adam,
    pub fine_grained: Adam,
    pub temporal: Adam,
    pub classifier: Adam,
}

impl Optimizers {
    pub fn new(cfg: &AdamConfig, model: &TrainedModel) -> Result<Self> {
        Ok(Self {
            features: Adam::new(*cfg, &model.features.store)?,
            fine_grained: Adam::new(*cfg, model.fine_grained.store())?,
            temporal: Adam::new(*cfg, model.temporal.store())?,
            classifier: Adam::new(*cfg, model.classifier.store())?,
        })
    }

    pub fn component_mut(&mut self, kind: ComponentKind) -> &mut Adam {
        match kind {
            ComponentKind::FineGrained => &mut self.fine_grained,
            ComponentKind::Temporal => &mut self.temporal,
            ComponentKind::Classifier => &mut self.classifier,
        }
    }

    pub fn component(&self, kind: ComponentKind) -> &Adam {
        match kind {
            ComponentKind::FineGrained => &self.fine_grained,
            ComponentKind::Temporal => &self.temporal,
            ComponentKind::Classifier => &self.classifier,
        }
    }
}

/// Everything that evolves during training; restoring it resumes a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: TrainedModel,
    pub optimizers: Optimizers,
    pub pseudo: PseudoLabels,
    pub history: TrainHistory,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

pub const PSEUDO_LABEL_HEADER: &str = "epoch,window,domain,recording,seq_index,class,state,composite\n";

/// Drives training over one dataset split.
pub struct Trainer<'a> {
    split: &'a DatasetSplit,
    source_classes: Vec<usize>,
    pub state: TrainState,
}

fn divergence(epoch: usize, kind: ComponentKind, e: CoreError) -> CoreError {
    match e {
        CoreError::Nn(NnError::NonFinite(op)) => CoreError::Divergence {
            epoch,
            component: kind.name().into(),
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, split: &'a DatasetSplit) -> Result<Self> {
        cfg.validate()?;
        if split.source_train.is_empty() || split.target_train.is_empty() {
            return Err(CoreError::Data("both users need training windows".into()));
        }
        let model = TrainedModel::new(&cfg, split)?;
        let optimizers = Optimizers::new(&cfg.optimizer.adam(), &model)?;
        let source_classes = Self::source_classes(split)?;
        let n = split.n_source() + split.n_target();
        let pseudo = PseudoLabels::new(
            TemporalStateLabels::initial(n, cfg.states_per_class),
            &source_classes,
            vec![None; split.n_target()],
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut trainer = Self {
            split,
            source_classes,
            state: TrainState {
                config: cfg,
                model,
                optimizers,
                pseudo,
                history: TrainHistory::default(),
                epoch: 0,
                rng,
            },
        };
        if trainer.state.config.warmup_epochs == 0 {
            trainer.refresh_target_classes()?;
        }
        Ok(trainer)
    }

    /// Continues from a saved state.
    pub fn resume(state: TrainState, split: &'a DatasetSplit) -> Result<Self> {
        state.config.validate()?;
        let n = split.n_source() + split.n_target();
        if state.pseudo.states.states.len() != n || state.model.features.width != split.width {
            return Err(CoreError::State("checkpoint does not match the dataset split".into()));
        }
        Ok(Self {
            source_classes: Self::source_classes(split)?,
            split,
            state,
        })
    }

    fn source_classes(split: &DatasetSplit) -> Result<Vec<usize>> {
        split
            .source_train
            .iter()
            .map(|w| w.activity.ok_or_else(|| CoreError::Data("unlabeled source window".into())))
            .collect()
    }

    pub fn split(&self) -> &DatasetSplit {
        self.split
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.state.config.epochs
    }

    /// Runs the remaining epochs.
    pub fn run(mut self) -> Result<(TrainedModel, TrainHistory)> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok((self.state.model, self.state.history))
    }

    fn window_values(&self, i: usize) -> &[f64] {
        let ns = self.split.n_source();
        if i < ns {
            &self.split.source_train[i].values
        } else {
            &self.split.target_train.windows()[i - ns].values
        }
    }

    fn domain_of(&self, i: usize) -> Domain {
        if i < self.split.n_source() {
            Domain::Source
        } else {
            Domain::Target
        }
    }

    fn class_of(&self, i: usize) -> Option<usize> {
        let ns = self.split.n_source();
        if i < ns {
            Some(self.source_classes[i])
        } else {
            self.state.pseudo.target_classes[i - ns]
        }
    }

    /// Domain-balanced minibatches covering the larger user once.
    fn make_batches(&mut self) -> Vec<Vec<usize>> {
        let half = self.state.config.batch_size / 2;
        let (ns, nt) = (self.split.n_source(), self.split.n_target());
        let count = ns.max(nt).div_ceil(half);
        let rng = &mut self.state.rng;
        let mut stream = |n: usize, offset: usize| -> Vec<usize> {
            let mut out = Vec::with_capacity(count * half);
            while out.len() < count * half {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(rng);
                out.extend(perm.into_iter().map(|i| i + offset));
            }
            out.truncate(count * half);
            out
        };
        let src = stream(ns, 0);
        let tgt = stream(nt, ns);
        (0..count)
            .map(|b| {
                let mut batch = src[b * half..(b + 1) * half].to_vec();
                batch.extend_from_slice(&tgt[b * half..(b + 1) * half]);
                batch
            })
            .collect()
    }

    /// One optimizer step of `kind` (and the feature extractor) on `batch`.
    fn step(&mut self, kind: ComponentKind, batch: &[usize], opts: LossOptions) -> Result<LossBreakdown> {
        let x = self.state.model.features.batch_tensor(batch.iter().map(|&i| self.window_values(i)))?;
        let domain: Vec<usize> = batch.iter().map(|&i| self.domain_of(i).label()).collect();
        let class: Vec<Option<usize>> = batch.iter().map(|&i| self.class_of(i)).collect();
        let state: Vec<usize> = batch.iter().map(|&i| self.state.pseudo.states.states[i]).collect();

        let st = &mut self.state;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut fe_updates = BufferUpdates::default();
        let f = st.model.features.forward(&mut g, xv, Mode::Train, &mut fe_updates)?;
        st.model.range.update(g.value(f).data());
        let target = Tensor::new(
            g.value(f).shape().to_vec(),
            squash_features(g.value(f).data(), &st.model.range),
        )?;
        let update_extractor = st.config.extractor_updates.get(kind);
        let comp_input = if update_extractor { f } else { g.detach(f) };
        let comp_batch = ComponentBatch {
            features: comp_input,
            recon_target: &target,
            domain: &domain,
            class: &class,
            state: &state,
        };
        let mut comp_updates = BufferUpdates::default();
        let loss = st
            .model
            .component(kind)
            .loss(&mut g, &comp_batch, opts, &mut st.rng, &mut comp_updates)?;
        if !loss.breakdown.is_finite() {
            return Err(CoreError::Nn(NnError::NonFinite("loss")));
        }
        g.backward(loss.total)?;
        let fe_grads = g.grads_for(&st.model.features.store);
        let comp_grads = g.grads_for(st.model.component(kind).store());
        if update_extractor {
            st.optimizers.features.step(&mut st.model.features.store, &fe_grads)?;
        }
        st.optimizers
            .component_mut(kind)
            .step(st.model.component_mut(kind).store_mut(), &comp_grads)?;
        fe_updates.apply(&mut st.model.features.store);
        comp_updates.apply(st.model.component_mut(kind).store_mut());
        Ok(loss.breakdown)
    }

    fn sweep(&mut self, kind: ComponentKind) -> Result<(LossBreakdown, f64)> {
        let epoch = self.state.epoch + 1;
        let batches = self.make_batches();
        let nb = batches.len();
        let total_steps = (self.state.config.epochs * nb) as f64;
        let mut mean = LossBreakdown::default();
        let mut lambda = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            lambda = match kind {
                ComponentKind::Classifier => grl_lambda_with(
                    (self.state.epoch * nb + b) as f64 / total_steps,
                    self.state.config.lambda_steepness,
                ),
                _ => self.state.config.temporal_lambda,
            };
            let breakdown = self
                .step(kind, batch, LossOptions::with_lambda(lambda))
                .map_err(|e| divergence(epoch, kind, e))?;
            mean.accumulate(&breakdown, nb as f64);
        }
        Ok((mean, lambda))
    }

    /// Eval-mode features of all training windows (source first, then target).
    fn training_features(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.split.n_source() + self.split.n_target();
        let values: Vec<&[f64]> = (0..n).map(|i| self.window_values(i)).collect();
        crate::features::extract_features(&self.state.model.features, &values)
    }

    /// Refits attention, refines features and relabels temporal states.
    /// Returns the fitted weights and the fraction of windows whose state changed.
    pub fn refresh_pseudo_labels(&mut self) -> Result<(AttentionWeights, f64)> {
        let features = self.training_features()?;
        let ns = self.split.n_source();
        let keys: Vec<((Domain, usize), usize)> = (0..features.len())
            .map(|i| {
                if i < ns {
                    let w = &self.split.source_train[i];
                    ((Domain::Source, w.recording), w.start)
                } else {
                    let w = &self.split.target_train.windows()[i - ns];
                    ((Domain::Target, w.recording), w.start)
                }
            })
            .collect();
        let runs = contiguous_runs(&keys, self.split.stride);
        let sequences: Vec<Vec<Vec<f64>>> = runs
            .iter()
            .map(|r| r.iter().map(|&i| features[i].clone()).collect())
            .collect();
        let cfg = &self.state.config;
        let weights = fit_attention(&sequences, cfg.attention.lags)?;
        let mut refined = vec![Vec::new(); features.len()];
        for (run, seq) in runs.iter().zip(&sequences) {
            for (&i, r) in run.iter().zip(refine_features(seq, &weights, cfg.attention.top_k, cfg.attention.rho)?) {
                refined[i] = r;
            }
        }
        let inputs: Vec<StateInput> = (0..features.len())
            .map(|i| {
                let (seq_index, recording) = if i < ns {
                    let w = &self.split.source_train[i];
                    (w.seq_index, w.recording)
                } else {
                    let w = &self.split.target_train.windows()[i - ns];
                    (w.seq_index, w.recording)
                };
                StateInput {
                    features: &refined[i],
                    class: self.class_of(i),
                    domain: self.domain_of(i),
                    recording,
                    seq_index,
                }
            })
            .collect();
        let epoch = self.state.epoch + 1;
        let previous = &self.state.pseudo.states;
        let warm = (previous.epoch > 0).then_some(previous);
        let labels = assign_temporal_states(&inputs, cfg.states_per_class, cfg.seed, epoch, warm)?;
        let churn = labels.churn(&self.state.pseudo.states);
        let targets = self.state.pseudo.target_classes.clone();
        self.state.pseudo = PseudoLabels::new(labels, &self.source_classes, targets)?;
        Ok((weights, churn))
    }

    /// Current pseudo-labels, one CSV row per training window (source first),
    /// under [`PSEUDO_LABEL_HEADER`]. Unlabeled entries are left empty.
    pub fn pseudo_label_rows(&self) -> String {
        let ns = self.split.n_source();
        let pseudo = &self.state.pseudo;
        let mut out = String::new();
        for (i, &state) in pseudo.states.states.iter().enumerate() {
            let (domain, recording, seq_index) = if i < ns {
                let w = &self.split.source_train[i];
                ("source", w.recording, w.seq_index)
            } else {
                let w = &self.split.target_train.windows()[i - ns];
                ("target", w.recording, w.seq_index)
            };
            let opt = |v: Option<usize>| v.map_or_else(String::new, |v| v.to_string());
            let _ = writeln!(
                out,
                "{},{i},{domain},{recording},{seq_index},{},{state},{}",
                self.state.epoch,
                opt(self.class_of(i)),
                opt(pseudo.composite[i])
            );
        }
        out
    }

    /// Replaces target pseudo-classes with the classifier's current predictions.
    fn refresh_target_classes(&mut self) -> Result<()> {
        let values: Vec<&[f64]> = self.split.target_train.windows().iter().map(|w| w.values.as_slice()).collect();
        let preds = self.state.model.predict(&values)?;
        let targets = preds.into_iter().map(|p| Some(p.label)).collect();
        let states = self.state.pseudo.states.clone();
        self.state.pseudo = PseudoLabels::new(states, &self.source_classes, targets)?;
        Ok(())
    }

    /// Runs components (1), (2) with relabeling, and (3), in that order.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.is_finished() {
            return Err(CoreError::State("training already finished".into()));
        }
        let epoch = self.state.epoch + 1;
        let (fine_grained, _) = self.sweep(ComponentKind::FineGrained)?;
        let (temporal, _) = self.sweep(ComponentKind::Temporal)?;
        let (weights, state_churn) = self
            .refresh_pseudo_labels()
            .map_err(|e| divergence(epoch, ComponentKind::Temporal, e))?;
        let (classifier, lambda) = self.sweep(ComponentKind::Classifier)?;
        if epoch == 1 {
            self.state.model.range.freeze();
        }
        if epoch >= self.state.config.warmup_epochs {
            self.refresh_target_classes()
                .map_err(|e| divergence(epoch, ComponentKind::Classifier, e))?;
        }
        let val_accuracy = if self.split.target_val.is_empty() {
            0.0
        } else {
            evaluate(&self.state.model, &self.split.target_val, self.split.num_classes())?.accuracy
        };
        self.state.epoch = epoch;
        self.state.history.epochs.push(EpochRecord {
            epoch,
            fine_grained,
            temporal,
            classifier,
            val_accuracy,
            state_churn,
            lambda,
            attention_beta: weights.beta,
        });
        log::info!(
            "epoch {epoch}: L_f {:.4} L_t {:.4} L_c {:.4} val {:.3} churn {:.3}",
            fine_grained.total,
            temporal.total,
            classifier.total,
            val_accuracy,
            state_churn
        );
        Ok(self.state.history.epochs.last().expect("just pushed"))
    }
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, split: &DatasetSplit) -> Result<(TrainedModel, TrainHistory)> {
    Trainer::new(cfg.clone(), split)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_schedule_endpoints() {
        assert_eq!(grl_lambda(0.0), 0.0);
        let want = 2.0 / (1.0 + (-10.0f64).exp()) - 1.0;
        assert!((grl_lambda(1.0) - want).abs() < 1e-15);
        assert!((grl_lambda(1.0) - 0.99991).abs() < 1e-5);
    }

    #[test]
    fn lambda_schedule_is_monotone() {
        let v: Vec<f64> = (0..100).map(|i| grl_lambda(i as f64 / 99.0)).collect();
        assert!(v.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 100);
        assert_eq!((c.optimizer.beta1, c.optimizer.weight_decay), (0.2, 0.0005));
        assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 7, ..c.clone() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 5}"#).unwrap();
        assert_eq!(parsed.epochs, 5);
        assert_eq!(parsed.batch_size, 32);
    }
}
