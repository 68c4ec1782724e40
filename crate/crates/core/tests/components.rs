use dgdata_core::components::{
    composite_pseudo_label, Classifier, Component, ComponentBatch, ComponentLoss, FineGrained, LossOptions, LossTerm,
    LossWeights, Temporal,
};
use dgdata_core::cvae::CvaeConfig;
use dgdata_nn::testing::{check_coordinate, GradCheckReport};
use dgdata_nn::{BufferUpdates, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 6;
const N: usize = 8;
const C: usize = 3;
const K: usize = 2;
const SAMPLE_SEED: u64 = 77;

fn small_cfg() -> CvaeConfig {
    CvaeConfig {
        hidden: 5,
        latent: 3,
        adversarial_hidden: 4,
    }
}

/// Non-trivial weights so every term shows up in the total.
fn weights() -> LossWeights {
    LossWeights {
        alpha: 1.3,
        zeta: 0.7,
        gamma: 2.0,
        delta: 1.1,
        eta: 0.9,
        var_target: 1.5,
    }
}

struct Case {
    features: Tensor,
    target: Tensor,
    domain: Vec<usize>,
    class: Vec<Option<usize>>,
    state: Vec<usize>,
}

fn case(rng: &mut ChaCha8Rng) -> Case {
    let features = Tensor::new(vec![N, D], (0..N * D).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let target = Tensor::new(vec![N, D], (0..N * D).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
    let domain: Vec<usize> = (0..N).map(|i| usize::from(i >= N / 2)).collect();
    // Source rows labeled; target rows a mix of pseudo-labels and unlabeled.
    let class = (0..N)
        .map(|i| if i < N / 2 || i % 2 == 0 { Some(rng.gen_range(0..C)) } else { None })
        .collect();
    let state = (0..N).map(|_| rng.gen_range(0..K)).collect();
    Case {
        features,
        target,
        domain,
        class,
        state,
    }
}

fn build(kind: usize, rng: &mut ChaCha8Rng) -> Box<dyn Component> {
    let cfg = small_cfg();
    match kind {
        0 => Box::new(FineGrained::new(D, C, K, &cfg, weights(), rng).unwrap()),
        1 => Box::new(Temporal::new(D, C, K, &cfg, weights(), rng).unwrap()),
        _ => Box::new(Classifier::new(D, C, K, &cfg, weights(), rng).unwrap()),
    }
}

fn run(comp: &dyn Component, c: &Case, features: &Tensor, opts: LossOptions) -> (Graph, ComponentLoss, dgdata_nn::Var) {
    let mut g = Graph::new();
    let f = g.leaf(features.clone(), true);
    let batch = ComponentBatch {
        features: f,
        recon_target: &c.target,
        domain: &c.domain,
        class: &c.class,
        state: &c.state,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    let mut updates = BufferUpdates::default();
    let loss = comp.loss(&mut g, &batch, opts, &mut rng, &mut updates).unwrap();
    (g, loss, f)
}

fn plain() -> LossOptions {
    LossOptions {
        lambda: 1.0,
        reverse_gradients: false,
    }
}

/// Central differences of the total loss over every parameter and input feature.
fn fd_report(kind: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comp = build(kind, &mut rng);
    let c = case(&mut rng);
    let (mut g, loss, f) = run(comp.as_ref(), &c, &c.features, plain());
    let f0 = g.value(loss.total).item().unwrap();
    g.backward(loss.total).unwrap();
    let grads = g.grads_for(comp.store());
    let feature_grad = g.grad(f).unwrap().to_vec();

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = comp.store().trainable_ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = comp.store().get(id).numel();
        let analytic = grads.get_or_zero(id, n);
        for j in 0..n {
            let orig = comp.store().get(id).data()[j];
            let outcome = check_coordinate(
                |delta| {
                    comp.store_mut().get_mut(id).data_mut()[j] = orig + delta;
                    let (g, loss, _) = run(comp.as_ref(), &c, &c.features, plain());
                    comp.store_mut().get_mut(id).data_mut()[j] = orig;
                    Ok(g.value(loss.total).item().unwrap())
                },
                f0,
                analytic[j],
            )
            .unwrap();
            report.record(pi + 1, j, analytic[j], outcome);
        }
    }
    for j in 0..N * D {
        let outcome = check_coordinate(
            |delta| {
                let mut x = c.features.clone();
                x.data_mut()[j] += delta;
                let (g, loss, _) = run(comp.as_ref(), &c, &x, plain());
                Ok(g.value(loss.total).item().unwrap())
            },
            f0,
            feature_grad[j],
        )
        .unwrap();
        report.record(0, j, feature_grad[j], outcome);
    }
    report
}

fn assert_fd(kind: usize) {
    let mut total = GradCheckReport::default();
    for seed in 0..10 {
        total.merge(&fd_report(kind, 500 + seed));
    }
    assert!(total.checked > 1000, "only {} coordinates checked", total.checked);
    assert!(total.max_rel_err <= 1e-4, "max rel err {} at {:?}", total.max_rel_err, total.worst);
    assert!(total.skip_fraction() < 0.02, "skipped {}", total.skip_fraction());
}

#[test]
fn fine_grained_loss_matches_finite_differences() {
    assert_fd(0);
}

#[test]
fn temporal_loss_matches_finite_differences() {
    assert_fd(1);
}

#[test]
fn classifier_loss_matches_finite_differences() {
    assert_fd(2);
}

/// Gradients of one loss term w.r.t. the encoder parameters and the input features.
fn encoder_grads(comp: &dyn Component, c: &Case, term: LossTerm, opts: LossOptions) -> Vec<f64> {
    let (mut g, loss, f) = run(comp, c, &c.features, opts);
    let v = loss.term(term).unwrap();
    g.backward(v).unwrap();
    let grads = g.grads_for(comp.store());
    let mut out = g.grad(f).map_or_else(|| vec![0.0; N * D], <[f64]>::to_vec);
    for id in comp.store().trainable_ids() {
        if comp.store().entry(id).name.starts_with("enc_") {
            out.extend(grads.get_or_zero(id, comp.store().get(id).numel()));
        }
    }
    out
}

#[test]
fn reversed_terms_are_negated_scaled_encoder_gradients() {
    let adversarial = [(1, LossTerm::Domain), (1, LossTerm::Class), (2, LossTerm::Domain)];
    for (kind, term) in adversarial {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let comp = build(kind, &mut rng);
            let c = case(&mut rng);
            let base = encoder_grads(comp.as_ref(), &c, term, plain());
            assert!(base.iter().any(|v| v.abs() > 1e-8));
            for lambda in [0.0, 0.5, 1.0] {
                let rev = encoder_grads(comp.as_ref(), &c, term, LossOptions::with_lambda(lambda));
                for (r, b) in rev.iter().zip(&base) {
                    assert!((r + lambda * b).abs() <= 1e-10, "{kind} {term:?} λ={lambda}: {r} vs {}", -lambda * b);
                }
            }
        }
    }
}

#[test]
fn zero_lambda_blocks_the_classifier_domain_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let comp = build(2, &mut rng);
    let c = case(&mut rng);
    let g = encoder_grads(comp.as_ref(), &c, LossTerm::Domain, LossOptions::with_lambda(0.0));
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn totals_are_weighted_sums_of_nonnegative_terms() {
    let w = weights();
    for kind in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + kind as u64);
        let comp = build(kind, &mut rng);
        let c = case(&mut rng);
        let (_, loss, _) = run(comp.as_ref(), &c, &c.features, LossOptions::with_lambda(0.3));
        let b = loss.breakdown;
        assert!(b.terms().iter().all(|v| *v >= 0.0), "{b:?}");
        let oracle = w.alpha * b.recon + w.zeta * b.mean_variance + w.gamma * b.class + w.delta * b.domain + w.eta * b.state;
        assert!((b.total - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{} vs {oracle}", b.total);
        if kind == 0 {
            assert_eq!(b.state, 0.0);
        }
    }
}

#[test]
fn classifier_class_term_ignores_target_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let comp = build(2, &mut rng);
    let c = case(&mut rng);
    let (_, a, _) = run(comp.as_ref(), &c, &c.features, plain());
    let mut relabeled = Case {
        class: c.class.clone(),
        features: c.features.clone(),
        target: c.target.clone(),
        domain: c.domain.clone(),
        state: c.state.clone(),
    };
    for i in N / 2..N {
        relabeled.class[i] = Some((relabeled.class[i].unwrap_or(0) + 1) % C);
    }
    let (_, b, _) = run(comp.as_ref(), &relabeled, &c.features, plain());
    assert_eq!(a.breakdown.class, b.breakdown.class);

    // Without any source row the class term is undefined.
    let target_only = Case {
        domain: vec![1; N],
        ..relabeled
    };
    let mut g = Graph::new();
    let f = g.leaf(target_only.features.clone(), true);
    let batch = ComponentBatch {
        features: f,
        recon_target: &target_only.target,
        domain: &target_only.domain,
        class: &target_only.class,
        state: &target_only.state,
    };
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let err = comp.loss(&mut g, &batch, plain(), &mut r, &mut BufferUpdates::default());
    assert!(matches!(err, Err(dgdata_core::CoreError::BatchComposition(_))));
}

#[test]
fn composite_labels_biject_with_class_state_pairs() {
    assert_eq!(composite_pseudo_label(0, 0, 3).unwrap(), 0);
    assert_eq!(composite_pseudo_label(2, 1, 3).unwrap(), 7);
    assert!(composite_pseudo_label(1, 3, 3).is_err());
    for k in 1..6 {
        for class in 0..10 {
            for state in 0..k {
                let y = composite_pseudo_label(class, state, k).unwrap();
                assert_eq!((y / k, y % k), (class, state));
            }
        }
    }
}
