//! The fine-grained, temporal-characterization and classifier components.

use dgdata_nn::{softmax_rows, BufferUpdates, Graph, Mode, ParamStore, Tensor, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::cvae::{CvaeBlock, CvaeConfig, Head, LatentGaussian};
use crate::features::FeatureExtractor;
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Reconstruction.
    pub alpha: f64,
    /// Mean-variance.
    pub zeta: f64,
    /// Class-type constraint.
    pub gamma: f64,
    /// Domain constraint.
    pub delta: f64,
    /// Temporal-state constraint.
    pub eta: f64,
    pub var_target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            zeta: 10.0,
            gamma: 30.0,
            delta: 1.0,
            eta: 10.0,
            var_target: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.zeta, self.gamma, self.delta, self.eta];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CoreError::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.var_target.is_finite() && self.var_target > 0.0) {
            return Err(CoreError::Config("var_target must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComponentKind {
    FineGrained,
    Temporal,
    Classifier,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 3] = [ComponentKind::FineGrained, ComponentKind::Temporal, ComponentKind::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::FineGrained => "fine_grained",
            ComponentKind::Temporal => "temporal",
            ComponentKind::Classifier => "classifier",
        }
    }
}

/// Scalar loss values of one component. For the fine-grained component
/// `class` holds the composite class-state constraint and `state` is unused.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub mean_variance: f64,
    pub class: f64,
    pub domain: f64,
    pub state: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [self.recon, self.mean_variance, self.class, self.domain, self.state]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().chain([&self.total]).all(|v| v.is_finite())
    }

    /// Running mean helper: `self += other / n`.
    pub fn accumulate(&mut self, other: &LossBreakdown, n: f64) {
        self.recon += other.recon / n;
        self.mean_variance += other.mean_variance / n;
        self.class += other.class / n;
        self.domain += other.domain / n;
        self.state += other.state / n;
        self.total += other.total / n;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Recon,
    MeanVariance,
    Class,
    Domain,
    State,
}

/// Graph nodes of one component loss.
#[derive(Clone, Debug)]
pub struct ComponentLoss {
    pub total: Var,
    pub terms: Vec<(LossTerm, Var)>,
    pub breakdown: LossBreakdown,
}

impl ComponentLoss {
    pub fn term(&self, t: LossTerm) -> Option<Var> {
        self.terms.iter().find(|(k, _)| *k == t).map(|(_, v)| *v)
    }
}

/// Labels and targets of one minibatch.
#[derive(Clone, Debug)]
pub struct ComponentBatch<'a> {
    /// `h_f(x)`, shape `[n, D]`.
    pub features: Var,
    /// Reconstruction target, shape `[n, D]`.
    pub recon_target: &'a Tensor,
    pub domain: &'a [usize],
    /// True labels for source rows; pseudo-labels or `None` for target rows.
    pub class: &'a [Option<usize>],
    pub state: &'a [usize],
}

impl ComponentBatch<'_> {
    fn check(&self, g: &Graph) -> Result<usize> {
        let n = g.value(self.features).shape()[0];
        if self.recon_target.shape() != g.value(self.features).shape()
            || self.domain.len() != n
            || self.class.len() != n
            || self.state.len() != n
        {
            return Err(CoreError::Nn(dgdata_nn::NnError::Dimension(format!(
                "batch of {n} rows has inconsistent label or target lengths"
            ))));
        }
        Ok(n)
    }
}

/// Gradient-reversal settings for adversarial heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub lambda: f64,
    /// When false, adversarial heads see the latent directly (diagnostics only).
    pub reverse_gradients: bool,
}

impl LossOptions {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            reverse_gradients: true,
        }
    }
}

/// Encoder, decoder and parameters common to every component.
#[derive(Clone, Debug, PartialEq)]
pub struct CvaeCore {
    pub store: ParamStore,
    pub block: CvaeBlock,
    pub weights: LossWeights,
}

impl CvaeCore {
    fn new<R: Rng + ?Sized>(key: &str, input_dim: usize, cfg: &CvaeConfig, weights: LossWeights, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        let mut store = ParamStore::new(key);
        let block = CvaeBlock::new(&mut store, input_dim, cfg, rng);
        Ok(Self { store, block, weights })
    }

    /// Encodes, samples, and builds the reconstruction and mean-variance terms.
    fn base_terms(&self, g: &mut Graph, batch: &ComponentBatch, rng: &mut dyn RngCore) -> Result<(Var, Var, Var)> {
        let LatentGaussian { mean, logvar } = self.block.encode(g, &self.store, batch.features)?;
        let z = g.reparam_sample(mean, logvar, rng)?;
        let recon = self.block.decode(g, &self.store, z)?;
        let target = g.constant(batch.recon_target.clone());
        let l_recon = g.mse(recon, target)?;
        let l_mean = g.mse_to_zero(mean)?;
        let l_var = g.gaussian_kl_to_var(logvar, self.weights.var_target)?;
        let l_mv = g.weighted_sum(&[(l_mean, 1.0), (l_var, 1.0)])?;
        Ok((z, l_recon, l_mv))
    }

    fn encode_mean(&self, g: &mut Graph, f: Var) -> Result<Var> {
        Ok(self.block.encode(g, &self.store, f)?.mean)
    }
}

fn adversarial_input(g: &mut Graph, z: Var, opts: LossOptions) -> Result<Var> {
    if opts.reverse_gradients {
        Ok(g.grad_reverse(z, opts.lambda)?)
    } else {
        Ok(z)
    }
}

fn assemble(g: &mut Graph, terms: Vec<(LossTerm, Var, f64)>) -> Result<ComponentLoss> {
    let weighted: Vec<(Var, f64)> = terms.iter().map(|&(_, v, w)| (v, w)).collect();
    let total = g.weighted_sum(&weighted)?;
    let mut breakdown = LossBreakdown {
        total: g.value(total).item()?,
        ..Default::default()
    };
    for &(t, v, _) in &terms {
        let x = g.value(v).item()?;
        match t {
            LossTerm::Recon => breakdown.recon = x,
            LossTerm::MeanVariance => breakdown.mean_variance = x,
            LossTerm::Class => breakdown.class = x,
            LossTerm::Domain => breakdown.domain = x,
            LossTerm::State => breakdown.state = x,
        }
    }
    Ok(ComponentLoss {
        total,
        terms: terms.into_iter().map(|(t, v, _)| (t, v)).collect(),
        breakdown,
    })
}

/// Composite class-state label `class · K + state`.
pub fn composite_pseudo_label(class: usize, state: usize, k: usize) -> Result<usize> {
    if state >= k {
        return Err(CoreError::Label(format!("state {state} outside 0..{k}")));
    }
    Ok(class * k + state)
}

/// A trainable CVAE component.
pub trait Component: Send + Sync {
    fn kind(&self) -> ComponentKind;

    fn core(&self) -> &CvaeCore;

    fn core_mut(&mut self) -> &mut CvaeCore;

    /// Builds the component's total loss on `batch`. Head batch-norm statistics
    /// computed in train mode are recorded in `updates`.
    fn loss(
        &self,
        g: &mut Graph,
        batch: &ComponentBatch,
        opts: LossOptions,
        rng: &mut dyn RngCore,
        updates: &mut BufferUpdates,
    ) -> Result<ComponentLoss>;

    fn store(&self) -> &ParamStore {
        &self.core().store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.core_mut().store
    }

    fn weights(&self) -> &LossWeights {
        &self.core().weights
    }
}

/// Component (1): composite class-state and (direct) domain constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct FineGrained {
    pub core: CvaeCore,
    pub classes: usize,
    pub states: usize,
    class_state_head: Head,
    domain_head: Head,
}

impl FineGrained {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        classes: usize,
        states: usize,
        cfg: &CvaeConfig,
        weights: LossWeights,
        rng: &mut R,
    ) -> Result<Self> {
        let mut core = CvaeCore::new("fine_grained", input_dim, cfg, weights, rng)?;
        let class_state_head = Head::simple(&mut core.store, "class_state", cfg.latent, classes * states, rng);
        let domain_head = Head::simple(&mut core.store, "domain", cfg.latent, 2, rng);
        Ok(Self {
            core,
            classes,
            states,
            class_state_head,
            domain_head,
        })
    }
}

impl Component for FineGrained {
    fn kind(&self) -> ComponentKind {
        ComponentKind::FineGrained
    }

    fn core(&self) -> &CvaeCore {
        &self.core
    }

    fn core_mut(&mut self) -> &mut CvaeCore {
        &mut self.core
    }

    fn loss(
        &self,
        g: &mut Graph,
        batch: &ComponentBatch,
        _opts: LossOptions,
        rng: &mut dyn RngCore,
        updates: &mut BufferUpdates,
    ) -> Result<ComponentLoss> {
        batch.check(g)?;
        let composite = batch
            .class
            .iter()
            .zip(batch.state)
            .map(|(c, &s)| c.map(|c| composite_pseudo_label(c, s, self.states)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let (z, l_recon, l_mv) = self.core.base_terms(g, batch, rng)?;
        let cs = self.class_state_head.logits(g, &self.core.store, z, Mode::Train, updates)?;
        let l_cs = g.softmax_cross_entropy_masked(cs, &composite)?;
        let d = self.domain_head.logits(g, &self.core.store, z, Mode::Train, updates)?;
        let l_d = g.softmax_cross_entropy(d, batch.domain)?;
        let w = &self.core.weights;
        assemble(
            g,
            vec![
                (LossTerm::Recon, l_recon, w.alpha),
                (LossTerm::MeanVariance, l_mv, w.zeta),
                (LossTerm::Class, l_cs, w.gamma),
                (LossTerm::Domain, l_d, w.delta),
            ],
        )
    }
}

/// Component (2): temporal-state constraint plus reversed domain and class constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct Temporal {
    pub core: CvaeCore,
    pub classes: usize,
    pub states: usize,
    state_head: Head,
    domain_head: Head,
    class_head: Head,
}

impl Temporal {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        classes: usize,
        states: usize,
        cfg: &CvaeConfig,
        weights: LossWeights,
        rng: &mut R,
    ) -> Result<Self> {
        let mut core = CvaeCore::new("temporal", input_dim, cfg, weights, rng)?;
        let state_head = Head::simple(&mut core.store, "state", cfg.latent, states, rng);
        let domain_head = Head::adversarial(&mut core.store, "domain", cfg.latent, cfg.adversarial_hidden, 2, rng);
        let class_head = Head::adversarial(&mut core.store, "class", cfg.latent, cfg.adversarial_hidden, classes, rng);
        Ok(Self {
            core,
            classes,
            states,
            state_head,
            domain_head,
            class_head,
        })
    }
}

impl Component for Temporal {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Temporal
    }

    fn core(&self) -> &CvaeCore {
        &self.core
    }

    fn core_mut(&mut self) -> &mut CvaeCore {
        &mut self.core
    }

    fn loss(
        &self,
        g: &mut Graph,
        batch: &ComponentBatch,
        opts: LossOptions,
        rng: &mut dyn RngCore,
        updates: &mut BufferUpdates,
    ) -> Result<ComponentLoss> {
        batch.check(g)?;
        let (z, l_recon, l_mv) = self.core.base_terms(g, batch, rng)?;
        let s = self.state_head.logits(g, &self.core.store, z, Mode::Train, updates)?;
        let l_s = g.softmax_cross_entropy(s, batch.state)?;
        let zr = adversarial_input(g, z, opts)?;
        let d = self.domain_head.logits(g, &self.core.store, zr, Mode::Train, updates)?;
        let l_d = g.softmax_cross_entropy(d, batch.domain)?;
        let c = self.class_head.logits(g, &self.core.store, zr, Mode::Train, updates)?;
        let l_c = g.softmax_cross_entropy_masked(c, batch.class)?;
        let w = &self.core.weights;
        assemble(
            g,
            vec![
                (LossTerm::Recon, l_recon, w.alpha),
                (LossTerm::MeanVariance, l_mv, w.zeta),
                (LossTerm::Class, l_c, w.gamma),
                (LossTerm::Domain, l_d, w.delta),
                (LossTerm::State, l_s, w.eta),
            ],
        )
    }
}

/// Component (3): source class constraint, temporal-state constraint and a
/// reversed domain constraint with the scheduled lambda.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub core: CvaeCore,
    pub classes: usize,
    pub states: usize,
    state_head: Head,
    class_head: Head,
    domain_head: Head,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        classes: usize,
        states: usize,
        cfg: &CvaeConfig,
        weights: LossWeights,
        rng: &mut R,
    ) -> Result<Self> {
        let mut core = CvaeCore::new("classifier", input_dim, cfg, weights, rng)?;
        let state_head = Head::simple(&mut core.store, "state", cfg.latent, states, rng);
        let class_head = Head::simple(&mut core.store, "source_class", cfg.latent, classes, rng);
        let domain_head = Head::adversarial(&mut core.store, "domain", cfg.latent, cfg.adversarial_hidden, 2, rng);
        Ok(Self {
            core,
            classes,
            states,
            state_head,
            class_head,
            domain_head,
        })
    }

    /// Class logits from the latent mean (no sampling).
    pub fn class_logits(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let mean = self.core.encode_mean(g, f)?;
        let mut unused = BufferUpdates::default();
        self.class_head.logits(g, &self.core.store, mean, Mode::Eval, &mut unused)
    }
}

impl Component for Classifier {
    fn kind(&self) -> ComponentKind {
        ComponentKind::Classifier
    }

    fn core(&self) -> &CvaeCore {
        &self.core
    }

    fn core_mut(&mut self) -> &mut CvaeCore {
        &mut self.core
    }

    fn loss(
        &self,
        g: &mut Graph,
        batch: &ComponentBatch,
        opts: LossOptions,
        rng: &mut dyn RngCore,
        updates: &mut BufferUpdates,
    ) -> Result<ComponentLoss> {
        batch.check(g)?;
        // Only source rows carry labels here; target pseudo-labels are ignored.
        let source_labels: Vec<Option<usize>> = batch
            .domain
            .iter()
            .zip(batch.class)
            .map(|(&d, &c)| if d == 0 { c } else { None })
            .collect();
        if source_labels.iter().all(Option::is_none) {
            return Err(CoreError::BatchComposition(
                "classifier batch has no labeled source windows".into(),
            ));
        }
        let (z, l_recon, l_mv) = self.core.base_terms(g, batch, rng)?;
        let s = self.state_head.logits(g, &self.core.store, z, Mode::Train, updates)?;
        let l_s = g.softmax_cross_entropy(s, batch.state)?;
        let c = self.class_head.logits(g, &self.core.store, z, Mode::Train, updates)?;
        let l_c = g.softmax_cross_entropy_masked(c, &source_labels)?;
        let zr = adversarial_input(g, z, opts)?;
        let d = self.domain_head.logits(g, &self.core.store, zr, Mode::Train, updates)?;
        let l_d = g.softmax_cross_entropy(d, batch.domain)?;
        let w = &self.core.weights;
        assemble(
            g,
            vec![
                (LossTerm::Recon, l_recon, w.alpha),
                (LossTerm::MeanVariance, l_mv, w.zeta),
                (LossTerm::Class, l_c, w.gamma),
                (LossTerm::Domain, l_d, w.delta),
                (LossTerm::State, l_s, w.eta),
            ],
        )
    }
}

/// Predicted activity and class probabilities for one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

/// Deterministic inference: extractor (eval mode), latent mean, source-class head.
pub fn classify_target(fe: &FeatureExtractor, classifier: &Classifier, windows: &[&[f64]]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(256) {
        let mut g = Graph::new();
        let x = g.constant(fe.batch_tensor(chunk.iter().copied())?);
        let mut unused = BufferUpdates::default();
        let f = fe.forward(&mut g, x, Mode::Eval, &mut unused)?;
        let logits = classifier.class_logits(&mut g, f)?;
        let probs = softmax_rows(g.value(logits))?;
        for i in 0..chunk.len() {
            let p = probs.row(i).to_vec();
            let label = argmax(&p);
            out.push(Prediction { label, probabilities: p });
        }
    }
    Ok(out)
}

/// Index of the largest value, first on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_label_examples() {
        assert_eq!(composite_pseudo_label(0, 0, 3).unwrap(), 0);
        assert_eq!(composite_pseudo_label(2, 1, 3).unwrap(), 7);
        assert!(matches!(composite_pseudo_label(1, 3, 3), Err(CoreError::Label(_))));
    }

    #[test]
    fn composite_label_bijects() {
        for k in 1..6 {
            for c in 0..10 {
                for s in 0..k {
                    let y = composite_pseudo_label(c, s, k).unwrap();
                    assert_eq!((y / k, y % k), (c, s));
                }
            }
        }
    }

    #[test]
    fn table_defaults() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.zeta, w.gamma, w.delta, w.eta), (1.0, 10.0, 30.0, 1.0, 10.0));
        assert!(LossWeights { var_target: 0.0, ..w.clone() }.validate().is_err());
        assert!(LossWeights { gamma: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
