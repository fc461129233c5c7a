//! Operator-level checks for the autodiff engine: worked examples, finite
//! difference gradients and structural properties.

use proptest::prelude::*;
use segdistill::gradcheck::grad_check;
use segdistill::graph::{ElementwiseOp, Graph, Mode, Operand, Padding, RunningStats, Target};
use segdistill::{Error, RngState, Tensor};

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = RngState::new(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn relu_and_identity_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

    let x = g.leaf(t64(&[4], &[1.5, -0.0, 3.25, -7.0]));
    let y = g.add_scalar(x, 0.0).unwrap();
    assert!(g.value(x).bitwise_eq(g.value(y)));
}

#[test]
fn log_stable_clamps_at_floor() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[2], &[0.0, 1.0]));
    let y = g.log_stable(x).unwrap();
    // ln(1e-12) = -27.631021115928547
    assert!((g.value(y).data()[0] - (-27.631021115928547)).abs() < 1e-9);
    assert_eq!(g.value(y).data()[1], 0.0);
    let bad = g.leaf(t64(&[1], &[1.5]));
    assert!(g.log_stable(bad).is_err());
}

#[test]
fn elementwise_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(t64(&[2], &[1.0, 2.0]));
    let b = g.leaf(t64(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
    let nan = g.leaf(t64(&[2], &[f64::NAN, 1.0]));
    assert!(matches!(g.elementwise(ElementwiseOp::Mul, nan, Operand::Scalar(2.0)), Err(Error::NumericFault(_))));
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
    let w = g.leaf(t64(&[1, 1, 1, 1], &[2.0]));
    let b = g.leaf(t64(&[1], &[0.0]));
    let y = g.conv2d(x, w, Some(b), 1, Padding::Same).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0]);

    let x = g.leaf(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, Some(b), 1, Padding::Same).unwrap();
    assert_eq!(g.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);

    let x = g.leaf(Tensor::full(&[1, 1, 5, 5], 1.0));
    let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 1, Padding::Valid).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);

    let w2 = g.leaf(Tensor::full(&[1, 2, 3, 3], 1.0));
    assert!(matches!(g.conv2d(x, w2, None, 1, Padding::Same), Err(Error::Dimension(_))));
}

#[test]
fn maxpool_and_unpool_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[1, 1, 2, 2], &[1.0, 3.0, 2.0, 0.0]));
    let (p, idx) = g.maxpool2_indices(x).unwrap();
    assert_eq!(g.value(p).data(), &[3.0]);
    assert_eq!(idx.argmax, vec![1]);
    let u = g.unpool2(p, &idx).unwrap();
    assert_eq!(g.value(u).data(), &[0.0, 3.0, 0.0, 0.0]);

    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).data(), &[0.0, 1.0, 0.0, 0.0]);

    let eq = g.leaf(t64(&[1, 1, 2, 2], &[5.0; 4]));
    let (p, idx) = g.maxpool2_indices(eq).unwrap();
    assert_eq!(g.value(p).data(), &[5.0]);
    assert_eq!(idx.argmax, vec![0]);

    let zeros = g.leaf(Tensor::zeros(&[1, 1, 1, 1]));
    let u = g.unpool2(zeros, &idx).unwrap();
    assert!(g.value(u).data().iter().all(|&v| v == 0.0));

    let odd = g.leaf(Tensor::zeros(&[1, 1, 3, 2]));
    assert!(matches!(g.maxpool2_indices(odd), Err(Error::Dimension(_))));
    let wrong = g.leaf(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(matches!(g.unpool2(wrong, &idx), Err(Error::Dimension(_))));
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    let x = t64(&[1, 1, 2, 2], &[1.0, 3.0, 2.0, 0.0]);
    let err = grad_check(
        |g, ids| {
            let (p, _) = g.maxpool2_indices(ids[0])?;
            g.sum(p)
        },
        &[x],
    )
    .unwrap();
    assert!(err <= 1e-9);
}

#[test]
fn batchnorm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(random64(&[2, 3, 4, 4], 11).map(|v| 3.0 * v + 1.0));
    let gamma = g.leaf(Tensor::full(&[3], 1.0));
    let beta = g.leaf(Tensor::zeros(&[3]));
    let mut stats = RunningStats::new(3);
    let y = g.batchnorm2d(x, gamma, beta, Mode::Train, &mut stats).unwrap();
    let v = g.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| v[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 32.0;
        assert!(m.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-4);
    }
    // running stats moved away from their (0, 1) initial values
    assert!(stats.mean.iter().any(|&m| m != 0.0));

    let gamma2 = g.leaf(Tensor::full(&[3], 2.0));
    let beta3 = g.leaf(Tensor::full(&[3], 3.0));
    let z = g.batchnorm2d(y, gamma2, beta3, Mode::Train, &mut RunningStats::new(3)).unwrap();
    let zv = g.value(z).data();
    let m = zv.iter().sum::<f64>() / zv.len() as f64;
    let sd = (zv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / zv.len() as f64).sqrt();
    assert!((m - 3.0).abs() < 1e-4);
    assert!((sd - 2.0).abs() < 1e-3);

    // eval: (2.5 - 0.5) / sqrt(4 + 1e-5) * 1.5 + (-1) = 0.4999993750...
    let mut stats = RunningStats { mean: vec![0.5], var: vec![4.0] };
    let x = g.leaf(t64(&[1, 1, 1, 1], &[2.5]));
    let gm = g.leaf(t64(&[1], &[1.5]));
    let bt = g.leaf(t64(&[1], &[-1.0]));
    let y = g.batchnorm2d(x, gm, bt, Mode::Eval, &mut stats).unwrap();
    let expected = 2.0 / (4.0f64 + 1e-5).sqrt() * 1.5 - 1.0;
    assert!((g.value(y).item() - expected).abs() < 1e-12);
    assert_eq!(stats.mean, vec![0.5]);
}

#[test]
fn dropout_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(random64(&[1, 2, 3, 3], 3));
    let mut rng = RngState::new(9);
    assert_eq!(g.dropout(x, 0.0, &mut rng, Mode::Train).unwrap(), x);
    assert_eq!(g.dropout(x, 0.7, &mut rng, Mode::Eval).unwrap(), x);
    assert!(matches!(g.dropout(x, 1.0, &mut rng, Mode::Train), Err(Error::Parameter(_))));

    // Monte-Carlo: inverted dropout keeps the expectation.
    let base = t64(&[1, 1, 2, 2], &[1.0, -2.0, 0.5, 4.0]);
    let mut sums = [0.0f64; 4];
    let mut rng = RngState::new(1234);
    let trials = 10_000;
    for _ in 0..trials {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(base.clone());
        let y = g.dropout(x, 0.5, &mut rng, Mode::Train).unwrap();
        for (s, v) in sums.iter_mut().zip(g.value(y).data()) {
            *s += v;
        }
    }
    for (s, x) in sums.iter().zip(base.data()) {
        let mean = s / trials as f64;
        assert!((mean - x).abs() <= 0.05 * x.abs(), "mean {mean} vs {x}");
    }

    let mut a = RngState::new(5);
    let mut b = RngState::new(5);
    let mut g1 = Graph::<f64>::new();
    let x1 = g1.leaf(base.clone());
    let y1 = g1.dropout(x1, 0.5, &mut a, Mode::Train).unwrap();
    let mut g2 = Graph::<f64>::new();
    let x2 = g2.leaf(base);
    let y2 = g2.dropout(x2, 0.5, &mut b, Mode::Train).unwrap();
    assert!(g1.value(y1).bitwise_eq(g2.value(y2)));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[1, 4, 1, 1]));
    let y = g.softmax_channels(x).unwrap();
    assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-12));

    let x = g.leaf(t64(&[1, 2, 1, 1], &[1000.0, 0.0]));
    let y = g.softmax_channels(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);

    let x = g.leaf(t64(&[1, 2, 1, 1], &[1.0, 2.0]));
    let y = g.softmax_channels(x).unwrap();
    // e^1/(e^1+e^2) = 0.2689414213699951
    assert!((g.value(y).data()[0] - 0.26894).abs() < 1e-5);
    assert!((g.value(y).data()[1] - 0.73106).abs() < 1e-5);
}

#[test]
fn upsample_examples() {
    let mut g = Graph::<f64>::new();
    let c = g.leaf(Tensor::full(&[1, 2, 3, 3], 0.75));
    let y = g.bilinear_upsample(c, 4).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    let m = g.value(y).sum() / g.value(y).len() as f64;
    assert!((m - 0.75).abs() < 1e-5);

    let x = g.leaf(t64(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
    let y = g.bilinear_upsample(x, 2).unwrap();
    let row: Vec<f64> = g.value(y).data()[..4].to_vec();
    assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    assert!(row.windows(2).all(|w| w[0] <= w[1]));

    assert!(matches!(g.bilinear_upsample(x, 3), Err(Error::Parameter(_))));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(random64(&[2, 3], 1));
    let unused = g.param(random64(&[4], 2));
    let y = g.scale(x, 2.0).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).data().iter().all(|&v| v == 2.0));
    assert!(grads.get(unused).data().iter().all(|&v| v == 0.0));
    assert_eq!(grads.get(unused).shape(), &[4]);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));

    // shared tensor: d/dx sum(x*x + x) = 2x + 1
    let mut g = Graph::<f64>::new();
    let x = g.param(t64(&[3], &[1.0, -2.0, 0.5]));
    let sq = g.mul(x, x).unwrap();
    let z = g.add(sq, x).unwrap();
    let s = g.sum(z).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).data(), &[3.0, -3.0, 2.0]);
}

// Finite-difference checks for every differentiable operator.

fn check(max_err: f64, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[segdistill::NodeId]) -> segdistill::Result<segdistill::NodeId>) {
    let err = grad_check(f, inputs).unwrap();
    assert!(err <= max_err, "relative error {err} > {max_err}");
}

/// A fixed random projection so that gradients are not uniform.
fn weighted_sum(g: &mut Graph<f64>, x: segdistill::NodeId, seed: u64) -> segdistill::Result<segdistill::NodeId> {
    let shape = g.value(x).shape().to_vec();
    let w = g.leaf(random64(&shape, seed));
    let p = g.mul(x, w)?;
    g.sum(p)
}

#[test]
fn gradcheck_elementwise() {
    let a = random64(&[2, 3, 2, 2], 21);
    let b = random64(&[2, 3, 2, 2], 22);
    check(1e-4, &[a.clone(), b.clone()], |g, ids| {
        let s = g.add(ids[0], ids[1])?;
        let d = g.sub(s, ids[1])?;
        let m = g.mul(d, ids[1])?;
        let m = g.scale(m, -1.7)?;
        weighted_sum(g, m, 1)
    });
    // keep relu inputs away from the kink
    let a = a.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check(1e-4, &[a], |g, ids| {
        let r = g.relu(ids[0])?;
        weighted_sum(g, r, 2)
    });
    let p = random64(&[1, 2, 2, 2], 23).map(|v| 0.3 + 0.3 * v);
    check(1e-4, &[p], |g, ids| {
        let l = g.log_stable(ids[0])?;
        weighted_sum(g, l, 3)
    });
}

#[test]
fn gradcheck_conv2d() {
    for (stride, padding, k) in [(1, Padding::Same, 3), (2, Padding::Same, 3), (1, Padding::Valid, 3), (1, Padding::Same, 1)] {
        let x = random64(&[2, 3, 4, 4], 31);
        let w = random64(&[2, 3, k, k], 32);
        let b = random64(&[2], 33);
        check(1e-4, &[x, w, b], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, padding)?;
            weighted_sum(g, y, 4)
        });
    }
}

#[test]
fn gradcheck_pool_unpool() {
    let x = random64(&[2, 2, 4, 4], 41);
    check(1e-4, &[x.clone()], |g, ids| {
        let (p, _) = g.maxpool2_indices(ids[0])?;
        weighted_sum(g, p, 5)
    });
    let y = random64(&[2, 2, 2, 2], 42);
    check(1e-4, &[x, y], |g, ids| {
        let (_, idx) = g.maxpool2_indices(ids[0])?;
        let u = g.unpool2(ids[1], &idx)?;
        weighted_sum(g, u, 6)
    });
}

#[test]
fn gradcheck_batchnorm() {
    let x = random64(&[2, 3, 3, 3], 51);
    let gamma = random64(&[3], 52).map(|v| 1.0 + 0.5 * v);
    let beta = random64(&[3], 53);
    check(1e-3, &[x.clone(), gamma.clone(), beta.clone()], |g, ids| {
        let y = g.batchnorm2d(ids[0], ids[1], ids[2], Mode::Train, &mut RunningStats::new(3))?;
        weighted_sum(g, y, 7)
    });
    check(1e-4, &[x, gamma, beta], |g, ids| {
        let mut stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
        let y = g.batchnorm2d(ids[0], ids[1], ids[2], Mode::Eval, &mut stats)?;
        weighted_sum(g, y, 8)
    });
}

#[test]
fn gradcheck_dropout_softmax_upsample_concat() {
    let x = random64(&[1, 3, 4, 4], 61);
    check(1e-4, &[x.clone()], |g, ids| {
        let mut rng = RngState::new(77);
        let y = g.dropout(ids[0], 0.4, &mut rng, Mode::Train)?;
        weighted_sum(g, y, 9)
    });
    check(1e-4, &[x.clone()], |g, ids| {
        let y = g.softmax_channels(ids[0])?;
        weighted_sum(g, y, 10)
    });
    for factor in [2, 4, 8] {
        check(1e-4, &[random64(&[1, 2, 2, 2], 62)], |g, ids| {
            let y = g.bilinear_upsample(ids[0], factor)?;
            weighted_sum(g, y, 11)
        });
    }
    check(1e-4, &[x, random64(&[1, 2, 4, 4], 63)], |g, ids| {
        let y = g.concat_channels(&[ids[0], ids[1]])?;
        let m = g.mean(y)?;
        let s = weighted_sum(g, y, 12)?;
        g.add(m, s)
    });
}

#[test]
fn gradcheck_cross_entropy_targets() {
    let logits = random64(&[2, 3, 2, 2], 71).map(|v| 2.0 * v);
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let weights: Vec<f64> = (0..8).map(|i| 0.1 + 0.05 * i as f64).collect();
    check(1e-4, &[logits.clone()], |g, ids| {
        g.cross_entropy(ids[0], Target::Hard(labels.clone()), weights.clone())
    });
    let mut g = Graph::<f64>::new();
    let t = g.leaf(random64(&[2, 3, 2, 2], 72));
    let soft = g.softmax_channels(t).unwrap();
    let soft = g.value(soft).data().to_vec();
    check(1e-4, &[logits], |g, ids| g.cross_entropy(ids[0], Target::Soft(soft.clone()), weights.clone()));
}

#[test]
fn gradcheck_composite_conv_relu_softmax_ce() {
    let x = random64(&[2, 2, 4, 4], 81);
    let w = random64(&[3, 2, 3, 3], 82);
    let b = random64(&[3], 83);
    let labels: Vec<usize> = (0..32).map(|i| (i * 7) % 3).collect();
    check(1e-4, &[x, w, b], |g, ids| {
        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, Padding::Same)?;
        let y = g.relu(y)?;
        let p = g.softmax_channels(y)?;
        let l = g.log_stable(p)?;
        // CE against hard labels through the explicit softmax/log path
        let mut onehot = vec![0.0; 2 * 3 * 16];
        for (i, &lab) in labels.iter().enumerate() {
            let (n, pix) = (i / 16, i % 16);
            onehot[(n * 3 + lab) * 16 + pix] = -1.0 / 32.0;
        }
        let oh = g.leaf(Tensor::new(&[2, 3, 4, 4], onehot)?);
        let prod = g.mul(l, oh)?;
        g.sum(prod)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pool_unpool_pool_is_idempotent(seed in any::<u64>(), n in 1usize..3, c in 1usize..3, h in 1usize..4, w in 1usize..4) {
        let x = random64(&[n, c, 2 * h, 2 * w], seed);
        let mut g = Graph::<f64>::new();
        let xi = g.leaf(x);
        let (p, idx) = g.maxpool2_indices(xi).unwrap();
        let u = g.unpool2(p, &idx).unwrap();
        let (p2, _) = g.maxpool2_indices(u).unwrap();
        // Re-pooling can only differ where a pooled value is negative (zeros
        // win the window); shift to positive values for the exact property.
        let pos = g.value(p).map(|v| v + 10.0);
        let pi = g.leaf(pos.clone());
        let u = g.unpool2(pi, &idx).unwrap();
        let (p3, _) = g.maxpool2_indices(u).unwrap();
        prop_assert!(g.value(p3).bitwise_eq(&pos));
        prop_assert_eq!(g.value(p2).shape(), g.value(p).shape());
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = random64(&[2, 5, 3, 3], seed).map(|v| 10.0 * v);
        let mut g = Graph::<f64>::new();
        let xi = g.leaf(x.clone());
        let p = g.softmax_channels(xi).unwrap();
        let xs = g.leaf(x.map(|v| v + shift));
        let q = g.softmax_channels(xs).unwrap();
        let (pv, qv) = (g.value(p).data(), g.value(q).data());
        for b in 0..2 {
            for pix in 0..9 {
                let s: f64 = (0..5).map(|c| pv[(b * 5 + c) * 9 + pix]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
        for (a, b) in pv.iter().zip(qv) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn single_precision_path_runs() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::<f32>::full(&[1, 2, 4, 4], 0.5));
    let w = g.param(Tensor::<f32>::full(&[3, 2, 3, 3], 0.1));
    let y = g.conv2d(x, w, None, 1, Padding::Same).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(w).shape(), &[3, 2, 3, 3]);
}
