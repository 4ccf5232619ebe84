use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

fn random_net(rng: &mut ChaCha8Rng, extents: &[usize], acts: &[Activation]) -> Vec<DenseLayer> {
    extents
        .windows(2)
        .zip(acts)
        .map(|(w, &a)| {
            let mut l = DenseLayer::init(w[0], w[1], a, rng);
            for b in l.bias_mut().data_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
            l
        })
        .collect()
}

/// Triple-loop reference forward.
fn naive_forward(layers: &[DenseLayer], x: &Tensor) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = x.row_iter().map(<[f64]>::to_vec).collect();
    for l in layers {
        let (o_e, i_e) = (l.out_extent(), l.in_extent());
        rows = rows
            .iter()
            .map(|row| {
                (0..o_e)
                    .map(|o| {
                        let mut s = l.bias().data()[o];
                        for k in 0..i_e {
                            s += l.weights().data()[o * i_e + k] * row[k];
                        }
                        match l.activation() {
                            Activation::Identity => s,
                            Activation::Relu => {
                                if s > 0.0 {
                                    s
                                } else {
                                    0.0
                                }
                            }
                            Activation::Tanh => s.tanh(),
                        }
                    })
                    .collect()
            })
            .collect();
    }
    rows
}

fn weighted_output_loss(layers: &[DenseLayer], x: &Tensor, coeffs: &Tensor) -> f64 {
    let (y, _) = forward(layers, x).unwrap();
    y.data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum()
}

fn perturb(net: &[DenseLayer], li: usize, which: usize, e: usize, delta: f64) -> Vec<DenseLayer> {
    let mut out = net.to_vec();
    let t = if which == 0 {
        out[li].weights_mut()
    } else {
        out[li].bias_mut()
    };
    t.data_mut()[e] += delta;
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / m
    }
}

#[test]
fn identity_layer_passes_input_through() {
    let w = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let layer = DenseLayer::new(w, Tensor::zeros(&[3]), Activation::Identity).unwrap();
    let v = Tensor::matrix(1, 3, vec![0.5, -2.0, 7.25]);
    let (y, _) = forward(&[layer], &v).unwrap();
    assert_eq!(y.data(), v.data());
}

#[test]
fn relu_zeroes_negative_inputs() {
    let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let layer = DenseLayer::new(w, Tensor::zeros(&[2]), Activation::Relu).unwrap();
    let (y, _) = forward(&[layer], &Tensor::matrix(2, 2, vec![-1.0, -3.0, -0.1, -9.0])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let net = random_net(&mut rng, &[5, 7, 3], &[Activation::Tanh, Activation::Identity]);
        let x = random_matrix(&mut rng, 4, 5);
        let (y, _) = forward(&net, &x).unwrap();
        let expect = naive_forward(&net, &x);
        for (r, row) in expect.iter().enumerate() {
            for (a, b) in y.row(r).iter().zip(row) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn forward_rejects_wrong_input_extent() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = random_net(&mut rng, &[4, 2], &[Activation::Identity]);
    let err = forward(&net, &Tensor::zeros(&[2, 3])).unwrap_err();
    assert!(matches!(err, NumError::ShapeMismatch { .. }));
}

#[test]
fn zero_upstream_gives_zero_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = random_net(&mut rng, &[3, 4, 2], &[Activation::Relu, Activation::Identity]);
    let x = random_matrix(&mut rng, 5, 3);
    let (_, cache) = forward(&net, &x).unwrap();
    let (tape, dx) = backward(&net, &cache, &Tensor::zeros(&[5, 2])).unwrap();
    assert!(tape.is_zero());
    assert!(dx.data().iter().all(|&v| v == 0.0));
}

#[test]
fn scalar_weight_gradient_is_input() {
    let layer = DenseLayer::new(
        Tensor::matrix(1, 1, vec![0.3]),
        Tensor::zeros(&[1]),
        Activation::Identity,
    )
    .unwrap();
    let net = [layer];
    let (_, cache) = forward(&net, &Tensor::matrix(1, 1, vec![2.5])).unwrap();
    let (tape, _) = backward(&net, &cache, &Tensor::matrix(1, 1, vec![1.0])).unwrap();
    assert_eq!(tape.grads()[0].data(), &[2.5]);
}

#[test]
fn backward_rejects_stale_cache() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_net(&mut rng, &[3, 4, 2], &[Activation::Relu, Activation::Identity]);
    let b = random_net(&mut rng, &[3, 5, 2], &[Activation::Relu, Activation::Identity]);
    let (_, cache) = forward(&a, &random_matrix(&mut rng, 2, 3)).unwrap();
    let err = backward(&b, &cache, &Tensor::zeros(&[2, 2])).unwrap_err();
    assert_eq!(err, NumError::StaleCache);
}

#[test]
fn gradients_match_central_differences_for_every_activation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let step = 1e-5;
    for acts in [
        [Activation::Identity, Activation::Identity],
        [Activation::Relu, Activation::Identity],
        [Activation::Tanh, Activation::Tanh],
    ] {
        let net = random_net(&mut rng, &[4, 6, 3], &acts);
        let x = random_matrix(&mut rng, 5, 4);
        let coeffs = random_matrix(&mut rng, 5, 3);
        let (_, cache) = forward(&net, &x).unwrap();
        let (tape, dx) = backward(&net, &cache, &coeffs).unwrap();
        let analytic = tape.flatten();
        let mut idx = 0;
        for li in 0..net.len() {
            for which in 0..2 {
                let len = if which == 0 {
                    net[li].weights().len()
                } else {
                    net[li].bias().len()
                };
                for e in 0..len {
                    let plus = perturb(&net, li, which, e, step);
                    let minus = perturb(&net, li, which, e, -step);
                    let fd = (weighted_output_loss(&plus, &x, &coeffs)
                        - weighted_output_loss(&minus, &x, &coeffs))
                        / (2.0 * step);
                    assert!(rel_err(fd, analytic[idx]) <= 1e-3, "{acts:?} param {idx}");
                    idx += 1;
                }
            }
        }
        for e in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[e] += step;
            xm.data_mut()[e] -= step;
            let fd = (weighted_output_loss(&net, &xp, &coeffs)
                - weighted_output_loss(&net, &xm, &coeffs))
                / (2.0 * step);
            assert!(rel_err(fd, dx.data()[e]) <= 1e-3);
        }
    }
}

#[test]
fn intermediate_taps_add_to_backpropagated_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = random_net(&mut rng, &[3, 4, 2], &[Activation::Tanh, Activation::Identity]);
    let x = random_matrix(&mut rng, 2, 3);
    let hidden_coeffs = random_matrix(&mut rng, 2, 4);
    let out_coeffs = random_matrix(&mut rng, 2, 2);
    let (_, cache) = forward(&net, &x).unwrap();
    let (tape, _) =
        backward_with_taps(&net, &cache, &[Some(&hidden_coeffs), Some(&out_coeffs)]).unwrap();
    let loss = |n: &[DenseLayer]| {
        let (_, c) = forward(n, &x).unwrap();
        let h: f64 = c.layer_outputs()[0]
            .data()
            .iter()
            .zip(hidden_coeffs.data())
            .map(|(a, b)| a * b)
            .sum();
        let o: f64 = c.layer_outputs()[1]
            .data()
            .iter()
            .zip(out_coeffs.data())
            .map(|(a, b)| a * b)
            .sum();
        h + o
    };
    for e in 0..net[0].weights().len() {
        let mut p = net.clone();
        let mut m = net.clone();
        p[0].weights_mut().data_mut()[e] += 1e-5;
        m[0].weights_mut().data_mut()[e] -= 1e-5;
        let fd = (loss(&p) - loss(&m)) / 2e-5;
        assert!(rel_err(fd, tape.grads()[0].data()[e]) <= 1e-3);
    }
}

#[test]
fn softmax_closed_forms() {
    let u = softmax(&Tensor::matrix(1, 4, vec![2.0; 4]));
    assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let p = softmax(&Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]));
    assert!((p.data()[0] - 0.25).abs() < 1e-12 && (p.data()[1] - 0.75).abs() < 1e-12);
    let a = softmax(&Tensor::matrix(1, 3, vec![0.1, -2.0, 1.5]));
    let b = softmax(&Tensor::matrix(1, 3, vec![100.1, 98.0, 101.5]));
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn kl_closed_forms() {
    let p = [0.2, 0.3, 0.5];
    assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    assert!((v - 2f64.ln()).abs() < 1e-15);
    assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
}

#[test]
fn kl_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(2..7);
        let mut draw = || {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (draw(), draw());
        let mut oracle = 0.0;
        for i in 0..n {
            oracle += p[i] * (p[i] / q[i]).ln();
        }
        assert!((kl_divergence(&p, &q).unwrap() - oracle).abs() <= 1e-12);
    }
}

#[test]
fn kl_from_logits_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random_matrix(&mut rng, 3, 4);
    let teacher = softmax(&random_matrix(&mut rng, 3, 4));
    let (_, grad) = kl_from_logits(&logits, &teacher).unwrap();
    let total = |l: &Tensor| kl_from_logits(l, &teacher).unwrap().0.iter().sum::<f64>();
    for e in 0..logits.len() {
        let mut p = logits.clone();
        let mut m = logits.clone();
        p.data_mut()[e] += 1e-5;
        m.data_mut()[e] -= 1e-5;
        let fd = (total(&p) - total(&m)) / 2e-5;
        assert!(rel_err(fd, grad.data()[e]) <= 1e-3);
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random_matrix(&mut rng, 4, 3);
    let labels = [0, 2, 1, 2];
    let (_, grad) = cross_entropy(&logits, &labels).unwrap();
    for e in 0..logits.len() {
        let mut p = logits.clone();
        let mut m = logits.clone();
        p.data_mut()[e] += 1e-5;
        m.data_mut()[e] -= 1e-5;
        let fd = (cross_entropy(&p, &labels).unwrap().0 - cross_entropy(&m, &labels).unwrap().0)
            / 2e-5;
        assert!(rel_err(fd, grad.data()[e]) <= 1e-3);
    }
    assert!(cross_entropy(&logits, &[0, 1, 5, 0]).is_err());
}

#[test]
fn cosine_cases() {
    let v = [0.3, -1.2, 4.0];
    assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert!((cosine_similarity(&v, &neg) + 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
}

#[test]
fn cosine_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let u: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g) = cosine_similarity_grad(&u, &v);
        for e in 0..5 {
            let mut p = u.clone();
            let mut m = u.clone();
            p[e] += 1e-6;
            m[e] -= 1e-6;
            let fd = (cosine_similarity(&p, &v) - cosine_similarity(&m, &v)) / 2e-6;
            assert!(rel_err(fd, g[e]) <= 1e-3);
        }
    }
}

#[test]
fn sgd_cases() {
    let mk = |p: f64| {
        vec![DenseLayer::new(
            Tensor::matrix(1, 1, vec![p]),
            Tensor::zeros(&[1]),
            Activation::Identity,
        )
        .unwrap()]
    };
    let tape = GradientTape::new(vec![Tensor::matrix(1, 1, vec![2.0]), Tensor::vector(vec![0.0])]);
    let mut net = mk(1.0);
    sgd_step(&mut net, &tape, 0.0).unwrap();
    assert_eq!(net[0].weights().data(), &[1.0]);
    sgd_step(&mut net, &tape, 0.5).unwrap();
    assert_eq!(net[0].weights().data(), &[0.0]);

    let mut twice = mk(0.7);
    sgd_step(&mut twice, &tape, 0.1).unwrap();
    sgd_step(&mut twice, &tape, 0.1).unwrap();
    let mut summed_tape = tape.clone();
    summed_tape.add_scaled(&tape, 1.0).unwrap();
    let mut once = mk(0.7);
    sgd_step(&mut once, &summed_tape, 0.1).unwrap();
    assert!((twice[0].weights().data()[0] - once[0].weights().data()[0]).abs() < 1e-15);

    let bad = GradientTape::new(vec![Tensor::vector(vec![0.0])]);
    assert_eq!(sgd_step(&mut net, &bad, 0.1), Err(NumError::MisalignedTape));
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = random_net(&mut rng, &[6, 8, 4], &[Activation::Relu, Activation::Tanh]);
    let x = random_matrix(&mut rng, 7, 6);
    assert_eq!(forward(&net, &x).unwrap().0, forward(&net, &x).unwrap().0);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(row in prop::collection::vec(-1e4f64..1e4, 1..12)) {
        let n = row.len();
        let p = softmax(&Tensor::matrix(1, n, row));
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_diagonal(
        a in prop::collection::vec(0.001f64..1.0, 2..8),
        b in prop::collection::vec(0.001f64..1.0, 8),
    ) {
        let sa: f64 = a.iter().sum();
        let p: Vec<f64> = a.iter().map(|x| x / sa).collect();
        let b = &b[..p.len()];
        let sb: f64 = b.iter().sum();
        let q: Vec<f64> = b.iter().map(|x| x / sb).collect();
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
    }
}
