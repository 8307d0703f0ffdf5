use awd_core::diffcore::{grad_check, GradSign, LeafKind, NodeId, Tensor};
use awd_core::{Error, Graph64, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(dims: &[usize], data: &[f64]) -> Tensor64 {
    Tensor64::from_f64(dims, data).unwrap()
}

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    let n = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    t(dims, &v)
}

#[test]
fn forward_examples() {
    let mut g = Graph64::new(0);
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[3.0, 4.0]));
    let s = g.add(a, b).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random(&[3, 3], &mut rng);
    let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let mm = g.constant(m.clone());
    let prod = g.matmul(eye, mm).unwrap();

    let z = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
    let sm = g.softmax(z);
    g.forward().unwrap();
    assert_eq!(g.value(s).unwrap().to_f64_vec(), vec![4.0, 6.0]);
    assert_eq!(g.value(prod).unwrap(), &m);
    for v in g.value(sm).unwrap().to_f64_vec() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph64::new(0);
    let x = g.parameter(t(&[1], &[3.0]));
    let sq = g.mul(x, x).unwrap();
    g.forward().unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);

    let mut g = Graph64::new(0);
    let x = g.parameter(Tensor::zeros(&[4]));
    let s = g.sigmoid(x);
    let total = g.sum(s);
    g.forward().unwrap();
    g.backward(total).unwrap();
    assert_eq!(g.grad(x).unwrap().to_f64_vec(), vec![0.25; 4]);
}

#[test]
fn squared_norm_of_linear_map_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random(&[4, 3], &mut rng);
    let x = random(&[3, 1], &mut rng);
    let report = grad_check(
        |g: &mut Graph64, p: &[NodeId]| {
            let y = g.matmul(p[0], p[1])?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        },
        &[w, x],
        1e-5,
        GradSign::Standard,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn affine_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&[2, 3], &mut rng);
    let c = random(&[3, 2], &mut rng);
    let report = grad_check(
        move |g: &mut Graph64, p: &[NodeId]| {
            let k = g.constant(c);
            let y = g.matmul(p[0], k)?;
            Ok(g.sum(y))
        },
        &[w],
        1e-3,
        GradSign::Standard,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-8, "{report:?}");
}

#[test]
fn reverse_grad_contract() {
    let mut g = Graph64::new(0);
    let x = g.parameter(t(&[1], &[3.7]));
    let r = g.reverse_grad(x);
    let two = g.constant(t(&[1], &[2.0]));
    let y = g.mul(r, two).unwrap();
    g.forward().unwrap();
    assert_eq!(g.value(r).unwrap().item().to_bits(), 3.7f64.to_bits());
    g.backward(y).unwrap();
    // upstream gradient at r is 2; x receives −2
    assert_eq!(g.grad(x).unwrap().item(), -2.0);

    let mut g = Graph64::new(0);
    let x = g.parameter(t(&[1], &[2.0]));
    let r = g.reverse_grad(x);
    let sq = g.mul(r, r).unwrap();
    g.forward().unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), -4.0);
}

#[test]
fn double_reversal_is_gradient_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = random(&[3, 3], &mut rng);
    let run = |reverse_twice: bool| {
        let mut g = Graph64::new(0);
        let x = g.parameter(w.clone());
        let mut h = x;
        if reverse_twice {
            let r = g.reverse_grad(h);
            h = g.reverse_grad(r);
        }
        let th = g.tanh(h);
        let sq = g.mul(th, th).unwrap();
        let s = g.sum(sq);
        g.forward().unwrap();
        g.backward(s).unwrap();
        g.grad(x).unwrap().clone()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn reversed_function_checks_against_sign_flipped_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random(&[2, 2], &mut rng);
    let build = |g: &mut Graph64, p: &[NodeId]| {
        let r = g.reverse_grad(p[0]);
        let e = g.exp(r);
        Ok(g.sum(e))
    };
    let rev = grad_check(build, &[w.clone()], 1e-5, GradSign::Reversed).unwrap();
    assert!(rev.max_rel_error < 1e-6, "{rev:?}");
    let plain = grad_check(build, &[w], 1e-5, GradSign::Standard).unwrap();
    assert!(plain.max_rel_error > 0.5);
}

#[test]
fn straight_through_contract() {
    let mut g = Graph64::new(0);
    let hard_src = g.parameter(t(&[2], &[1.0, 0.0]));
    let soft_src = g.parameter(t(&[2], &[0.8, 0.2]));
    let hard = g.scale(hard_src, 1.0);
    let soft = g.sigmoid(soft_src);
    let st = g.straight_through(hard, soft).unwrap();
    let w = g.constant(t(&[2], &[3.0, -1.0]));
    let y = g.mul(st, w).unwrap();
    let total = g.sum(y);
    g.forward().unwrap();
    assert_eq!(g.value(st).unwrap().to_f64_vec(), vec![1.0, 0.0]);
    g.backward(total).unwrap();
    assert!(g.grad(hard_src).is_none());

    // Same graph with soft substituted for the straight-through node.
    let mut g2 = Graph64::new(0);
    let soft_src2 = g2.parameter(t(&[2], &[0.8, 0.2]));
    let soft2 = g2.sigmoid(soft_src2);
    let w2 = g2.constant(t(&[2], &[3.0, -1.0]));
    let y2 = g2.mul(soft2, w2).unwrap();
    let total2 = g2.sum(y2);
    g2.forward().unwrap();
    g2.backward(total2).unwrap();
    assert_eq!(g.grad(soft_src).unwrap(), g2.grad(soft_src2).unwrap());

    let mut g3 = Graph64::new(0);
    let a = g3.constant(t(&[2], &[1.0, 0.0]));
    let b = g3.constant(t(&[3], &[1.0, 0.0, 0.0]));
    assert!(matches!(g3.straight_through(a, b), Err(Error::DimMismatch { .. })));
}

#[test]
fn backward_is_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = random(&[3, 4], &mut rng);
    let mut g = Graph64::new(11);
    let x = g.parameter(w);
    let n = g.normal(&[3, 4], "noise");
    let y = g.mul(x, n).unwrap();
    let l = g.log_softmax(y);
    let s = g.sum(l);
    let s2 = g.mul(s, s).unwrap();
    g.forward().unwrap();
    g.backward(s2).unwrap();
    let first = g.grad(x).unwrap().clone();
    g.forward().unwrap();
    g.backward(s2).unwrap();
    assert_eq!(&first, g.grad(x).unwrap());
    assert_eq!(g.noise_stream(n).unwrap(), g.noise_stream(n).unwrap());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph64::new(0);
    let c = g.constant(t(&[2], &[1.0, 2.0]));
    let p = g.parameter(t(&[2], &[3.0, 4.0]));
    let y = g.mul(c, p).unwrap();
    let s = g.sum(y);
    g.forward().unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(p).unwrap().to_f64_vec(), vec![1.0, 2.0]);
}

#[test]
fn error_paths() {
    let mut g = Graph64::new(0);
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(g.add(a, b), Err(Error::DimMismatch { .. })));
    let m = g.constant(t(&[2, 3], &[0.0; 6]));
    assert!(matches!(g.matmul(m, m), Err(Error::DimMismatch { .. })));

    let neg = g.constant(t(&[1], &[-1.0]));
    let bad = g.log(neg);
    match g.forward() {
        Err(Error::NonFinite { node, op }) => {
            assert_eq!(node, bad.index());
            assert_eq!(op, "log");
        }
        other => panic!("expected non-finite error, got {other:?}"),
    }

    let mut g = Graph64::new(0);
    let p = g.parameter(t(&[2], &[1.0, 2.0]));
    let e = g.exp(p);
    assert!(matches!(g.backward(e), Err(Error::ForwardNotRun(_))));
    g.forward().unwrap();
    assert!(matches!(g.backward(e), Err(Error::SeedNotScalar(_))));

    let mut g = Graph64::new(0);
    let l = g.leaf(LeafKind::Parameter, &[2]);
    let _ = g.exp(l);
    assert!(matches!(g.forward(), Err(Error::UnboundLeaf(_))));
    g.bind(l, t(&[2], &[0.0, 0.0])).unwrap();
    g.forward().unwrap();
}

#[test]
fn topk_examples() {
    let keep = |s: &[f64], k: usize, el: &[bool]| {
        let mut g = Graph64::new(0);
        let n = s.len();
        let x = g.constant(t(&[1, n], s));
        let m = g.topk_keep(x, &[k], el).unwrap();
        g.forward().unwrap();
        g.value(m).unwrap().to_f64_vec()
    };
    assert_eq!(keep(&[0.5, -1.2, 0.3], 1, &[true; 3]), vec![1.0, 0.0, 1.0]);
    assert_eq!(keep(&[0.5, -1.2, 0.3], 3, &[true; 3]), vec![0.0, 0.0, 0.0]);
    assert_eq!(keep(&[0.2, 0.2, 0.9], 1, &[true; 3]), vec![0.0, 1.0, 1.0]);
    // K larger than the eligible count is clamped
    assert_eq!(keep(&[0.2, 0.1, 0.9], 3, &[true, false, true]), vec![0.0, 1.0, 0.0]);
}

fn relaxed(s: &[f64], k: usize, el: &[bool], tau: f64) -> Vec<f64> {
    let mut g = Graph64::new(0);
    let x = g.constant(t(&[1, s.len()], s));
    let r = g.relaxed_topk(x, &[k], el, tau).unwrap();
    g.forward().unwrap();
    g.value(r).unwrap().to_f64_vec()
}

#[test]
fn relaxed_topk_single_round_is_softmax() {
    let s = [0.3, -0.4, 1.1, 0.0];
    let el = [true, true, false, true];
    let soft = relaxed(&s, 1, &el, 0.7);
    let z: f64 = [0, 1, 3].iter().map(|&i| (-s[i] / 0.7).exp()).sum();
    for i in 0..4 {
        let expect = if el[i] { (-s[i] / 0.7f64).exp() / z } else { 0.0 };
        assert!((soft[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn relaxed_topk_sums_to_k_and_sharpens() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.random_range(2..12);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k = rng.random_range(0..=n);
        let soft = relaxed(&s, k, &vec![true; n], 1.0);
        assert!((soft.iter().sum::<f64>() - k as f64).abs() < 1e-5);
    }
    let s = [0.5, -1.2, 0.3, 0.9, -0.1];
    let hard_drop = [0.0, 1.0, 0.0, 0.0, 1.0];
    let soft = relaxed(&s, 2, &[true; 5], 1e-3);
    let err = soft.iter().zip(hard_drop).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3, "{soft:?}");
}

#[test]
fn relaxed_topk_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let s = random(&[2, 5], &mut rng);
        let w = random(&[2, 5], &mut rng);
        let el = [true, true, true, false, true, true, true, true, true, true];
        let report = grad_check(
            |g: &mut Graph64, p: &[NodeId]| {
                let r = g.relaxed_topk(p[0], &[2, 3], &el, 0.8)?;
                let wc = g.constant(w.clone());
                let y = g.mul(r, wc)?;
                Ok(g.sum(y))
            },
            &[s],
            1e-5,
            GradSign::Standard,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
