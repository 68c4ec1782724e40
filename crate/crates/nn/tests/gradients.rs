use dgdata_nn::testing::{check_gradients, GradCheckReport};
use dgdata_nn::{Graph, Mode, NnError, RunningStats, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Reduces any tensor to a scalar with a fixed random projection so every
/// output element contributes a distinct upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, NnError> {
    let n = g.value(y).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = g.reshape(y, vec![1, n])?;
    let w = g.constant(rand_tensor(&mut rng, &[n, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let s = g.linear(flat, w, b)?;
    g.reshape(s, vec![1])
}

fn assert_report(name: &str, r: &GradCheckReport, max_skip_frac: f64) {
    assert!(r.checked > 0, "{name}: nothing checked");
    let frac = r.skipped_kinks as f64 / (r.checked + r.skipped_kinks) as f64;
    assert!(
        r.max_rel_err <= TOL,
        "{name}: rel err {} at {:?}",
        r.max_rel_err,
        r.worst
    );
    assert!(frac <= max_skip_frac, "{name}: skipped {frac}");
}

fn ten_points<F>(name: &str, max_skip: f64, mut make: F)
where
    F: FnMut(&mut ChaCha8Rng) -> GradCheckReport,
{
    let mut total = GradCheckReport::default();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        total.merge(&make(&mut rng));
    }
    assert_report(name, &total, max_skip);
}

#[test]
fn linear_gradients() {
    ten_points("linear", 0.0, |rng| {
        let inputs = vec![
            rand_tensor(rng, &[3, 4], 1.0),
            rand_tensor(rng, &[4, 2], 1.0),
            rand_tensor(rng, &[2], 1.0),
        ];
        check_gradients(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                project(g, y, 1)
            },
            &inputs,
            None,
        )
        .unwrap()
    });
}

#[test]
fn conv1d_gradients() {
    ten_points("conv1d", 0.0, |rng| {
        let stride = rng.gen_range(1..3);
        let inputs = vec![
            rand_tensor(rng, &[2, 3, 11], 1.0),
            rand_tensor(rng, &[4, 3, 3], 1.0),
            rand_tensor(rng, &[4], 1.0),
        ];
        check_gradients(
            move |g, v| {
                let y = g.conv1d(v[0], v[1], Some(v[2]), stride)?;
                project(g, y, 2)
            },
            &inputs,
            None,
        )
        .unwrap()
    });
}

#[test]
fn batchnorm_gradients_train_and_eval() {
    for mode in [Mode::Train, Mode::Eval] {
        ten_points("batchnorm", 0.0, |rng| {
            let inputs = vec![
                rand_tensor(rng, &[4, 3, 5], 2.0),
                rand_tensor(rng, &[3], 1.5),
                rand_tensor(rng, &[3], 1.0),
            ];
            check_gradients(
                move |g, v| {
                    let mut m = vec![0.1, -0.2, 0.3];
                    let mut s = vec![1.2, 0.8, 2.0];
                    let y = g.batchnorm(
                        v[0],
                        v[1],
                        v[2],
                        RunningStats {
                            mean: &mut m,
                            var: &mut s,
                            momentum: 0.1,
                        },
                        mode,
                    )?;
                    project(g, y, 3)
                },
                &inputs,
                None,
            )
            .unwrap()
        });
    }
}

#[test]
fn relu_gradients() {
    ten_points("relu", 0.05, |rng| {
        let inputs = vec![rand_tensor(rng, &[20], 1.0)];
        check_gradients(
            |g, v| {
                let y = g.relu(v[0])?;
                project(g, y, 4)
            },
            &inputs,
            None,
        )
        .unwrap()
    });
}

#[test]
fn maxpool_gradients() {
    ten_points("maxpool", 0.05, |rng| {
        let inputs = vec![rand_tensor(rng, &[2, 2, 9], 1.0)];
        check_gradients(
            |g, v| {
                let y = g.maxpool1d(v[0], 3, 2)?;
                project(g, y, 5)
            },
            &inputs,
            None,
        )
        .unwrap()
    });
}

#[test]
fn sigmoid_gradients() {
    ten_points("sigmoid", 0.0, |rng| {
        let inputs = vec![rand_tensor(rng, &[12], 6.0)];
        check_gradients(
            |g, v| {
                let y = g.sigmoid(v[0])?;
                project(g, y, 6)
            },
            &inputs,
            None,
        )
        .unwrap()
    });
}

#[test]
fn cross_entropy_gradients() {
    ten_points("softmax_cross_entropy", 0.0, |rng| {
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
        let inputs = vec![rand_tensor(rng, &[5, 4], 3.0)];
        check_gradients(
            move |g, v| g.softmax_cross_entropy(v[0], &labels),
            &inputs,
            None,
        )
        .unwrap()
    });
}

#[test]
fn mse_gradients() {
    ten_points("mse", 0.0, |rng| {
        let inputs = vec![rand_tensor(rng, &[3, 4], 1.0), rand_tensor(rng, &[3, 4], 1.0)];
        check_gradients(|g, v| g.mse(v[0], v[1]), &inputs, None).unwrap()
    });
}

#[test]
fn kl_gradients() {
    ten_points("gaussian_kl_to_var", 0.0, |rng| {
        let target = rng.gen_range(0.2..4.0);
        let inputs = vec![rand_tensor(rng, &[6], 2.0)];
        check_gradients(move |g, v| g.gaussian_kl_to_var(v[0], target), &inputs, None).unwrap()
    });
}

#[test]
fn reparam_gradients() {
    ten_points("reparam", 0.0, |rng| {
        let eps = rand_tensor(rng, &[2, 3], 2.0);
        let inputs = vec![rand_tensor(rng, &[2, 3], 1.0), rand_tensor(rng, &[2, 3], 1.0)];
        check_gradients(
            move |g, v| {
                let z = g.reparam(v[0], v[1], eps.clone())?;
                project(g, z, 7)
            },
            &inputs,
            None,
        )
        .unwrap()
    });
}

#[test]
fn select_rows_gradients() {
    ten_points("select_rows", 0.0, |rng| {
        let inputs = vec![rand_tensor(rng, &[4, 2], 1.0)];
        check_gradients(
            |g, v| {
                let s = g.select_rows(v[0], &[3, 0, 3])?;
                project(g, s, 8)
            },
            &inputs,
            None,
        )
        .unwrap()
    });
}

#[test]
fn grad_reverse_is_exact_negated_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for lambda in [0.0, 0.5, 1.0, 2.5] {
        let x0 = rand_tensor(&mut rng, &[3, 4], 1.0);
        let grads = |reverse: bool| {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), true);
            let y = if reverse { g.grad_reverse(x, lambda).unwrap() } else { x };
            assert_eq!(g.value(y), &x0);
            let s = g.sigmoid(y).unwrap();
            let l = project(&mut g, s, 9).unwrap();
            g.backward(l).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let plain = grads(false);
        let rev = grads(true);
        for (p, r) in plain.iter().zip(&rev) {
            assert_eq!(*r, -lambda * p);
        }
    }
}

#[test]
fn composite_network_gradients() {
    // conv -> bn -> relu -> pool -> flatten -> linear -> {ce, sigmoid+mse},
    // plus an encoder pair feeding reparam and KL.
    ten_points("composite", 0.05, |rng| {
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..2)).collect();
        let eps = rand_tensor(rng, &[3, 2], 1.0);
        let target = rand_tensor(rng, &[3, 8], 0.5);
        let inputs = vec![
            rand_tensor(rng, &[3, 2, 10], 1.0), // x
            rand_tensor(rng, &[2, 2, 3], 0.7),  // conv kernels
            rand_tensor(rng, &[2], 0.3),        // conv bias
            rand_tensor(rng, &[2], 1.0),        // gamma
            rand_tensor(rng, &[2], 0.2),        // beta
            rand_tensor(rng, &[8, 2], 0.5),     // mean head
            rand_tensor(rng, &[2], 0.1),
            rand_tensor(rng, &[8, 2], 0.5), // logvar head
            rand_tensor(rng, &[2], 0.1),
            rand_tensor(rng, &[2, 8], 0.5), // decoder
            rand_tensor(rng, &[8], 0.1),
            rand_tensor(rng, &[2, 2], 0.5), // class head
            rand_tensor(rng, &[2], 0.1),
        ];
        check_gradients(
            move |g, v| {
                let mut m = vec![0.0; 2];
                let mut s = vec![1.0; 2];
                let c = g.conv1d(v[0], v[1], Some(v[2]), 1)?;
                let b = g.batchnorm(
                    c,
                    v[3],
                    v[4],
                    RunningStats {
                        mean: &mut m,
                        var: &mut s,
                        momentum: 0.1,
                    },
                    Mode::Train,
                )?;
                let r = g.relu(b)?;
                let p = g.maxpool1d(r, 2, 2)?;
                let f = g.flatten(p)?;
                let mean = g.linear(f, v[5], v[6])?;
                let lv = g.linear(f, v[7], v[8])?;
                let z = g.reparam(mean, lv, eps.clone())?;
                let dec = g.linear(z, v[9], v[10])?;
                let rec = g.sigmoid(dec)?;
                let t = g.constant(target.clone());
                let l_rec = g.mse(rec, t)?;
                let l_mean = g.mse_to_zero(mean)?;
                let l_kl = g.gaussian_kl_to_var(lv, 1.5)?;
                let logits = g.linear(z, v[11], v[12])?;
                let l_ce = g.softmax_cross_entropy(logits, &labels)?;
                g.weighted_sum(&[(l_rec, 1.0), (l_mean, 10.0), (l_kl, 10.0), (l_ce, 30.0)])
            },
            &inputs,
            None,
        )
        .unwrap()
    });
}

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// ∫ p ln(p/q) for zero-mean Gaussians p (variance `var`) and q (variance `target`).
pub fn kl_quadrature(var: f64, target: f64) -> f64 {
    let half = 14.0 * var.max(target).sqrt();
    simpson(
        |x| {
            let lp = -0.5 * x * x / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
            let lq = -0.5 * x * x / target - 0.5 * (2.0 * std::f64::consts::PI * target).ln();
            lp.exp() * (lp - lq)
        },
        -half,
        half,
        40_000,
    )
}

#[test]
fn kl_matches_quadrature_on_grid() {
    let grid: Vec<f64> = (0..20).map(|i| 0.1 + 4.9 * i as f64 / 19.0).collect();
    for &var in &grid {
        for &target in &grid {
            let mut g = Graph::new();
            let lv = g.constant(Tensor::vector(&[var.ln()]));
            let kl = g.gaussian_kl_to_var(lv, target).unwrap();
            let got = g.value(kl).item().unwrap();
            let oracle = kl_quadrature(var, target);
            assert!((got - oracle).abs() < 1e-6, "{var} {target}: {got} vs {oracle}");
            if var == target {
                assert!(got.abs() < 1e-15);
            } else {
                assert!(got > 0.0);
            }
        }
    }
}

proptest! {
    #[test]
    fn uniform_logits_give_ln_c(c in 2usize..=100, n in 1usize..5, level in -5.0f64..5.0) {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[n, c], level));
        let labels: Vec<usize> = (0..n).map(|i| (i * 7) % c).collect();
        let l = g.softmax_cross_entropy(logits, &labels).unwrap();
        prop_assert!((g.value(l).item().unwrap() - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_reverse_forward_is_bit_identical(values in proptest::collection::vec(-1e6f64..1e6, 1..20), lambda in 0.0f64..3.0) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&values), true);
        let y = g.grad_reverse(x, lambda).unwrap();
        prop_assert_eq!(g.value(y).data(), values.as_slice());
    }

    #[test]
    fn kl_is_zero_only_at_matched_variance(lv in -3.0f64..3.0, target in 0.05f64..20.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[lv]));
        let kl = g.gaussian_kl_to_var(x, target).unwrap();
        let v = g.value(kl).item().unwrap();
        if (lv.exp() - target).abs() < 1e-12 {
            prop_assert!(v.abs() < 1e-12);
        } else {
            prop_assert!(v > 0.0);
        }
    }
}
