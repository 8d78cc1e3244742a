mod common;

use common::*;
use layertrace::model::{Batch, ModelSpec, SharingMode};
use layertrace::oracle::{self, AssemblyMethod};
use layertrace::model::ExpandedObjective;
use layertrace::autodiff::Objective;
use layertrace::Error;
use proptest::prelude::*;

#[test]
fn forward_matches_hand_written_mlp() {
    let spec = ModelSpec::parse("input = 3\nlayer = dense 4 tanh\nlayer = dense 2 identity\n").unwrap();
    let params = random_params(&spec, 5);
    let batch = classification_batch(3, 2, 4, 6);
    let xs: Vec<Vec<f64>> = (0..4).map(|r| batch.inputs().row(r).to_vec()).collect();
    let ys = match batch.targets() {
        layertrace::model::Targets::Classes(c) => c.to_vec(),
        _ => unreachable!(),
    };
    let (w1, rest) = params.split_at(12);
    let (b1, rest) = rest.split_at(4);
    let (w2, b2) = rest.split_at(8);
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(&ys) {
        let h: Vec<f64> = (0..4)
            .map(|j| ((0..3).map(|i| x[i] * w1[i * 4 + j]).sum::<f64>() + b1[j]).tanh())
            .collect();
        let z: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|i| h[i] * w2[i * 2 + j]).sum::<f64>() + b2[j])
            .collect();
        let m = z[0].max(z[1]);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    let expected = total / 4.0;
    assert!((loss(&spec, &params, &batch) - expected).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences_across_the_zoo() {
    for (name, spec) in zoo(4, 3) {
        for draw in 0..10u64 {
            let params = random_params(&spec, 100 + draw);
            let batch = classification_batch(4, 3, 8, 200 + draw);
            let g = gradient(&spec, &params, &batch);
            let fd = fd_gradient(&spec, &params, &batch);
            let err = max_rel_err(&g, &fd);
            assert!(err < 1e-5, "{name} draw {draw}: {err:e}");
        }
    }
}

#[test]
fn unrolled_gradient_equals_shared_gradient() {
    let spec = ModelSpec::mlp_tied(4, 3);
    let params = random_params(&spec, 1);
    let batch = classification_batch(4, 3, 8, 2);
    let shared = gradient(&spec, &params, &batch);
    let unrolled = gradient(&spec.clone().with_sharing(SharingMode::Unrolled), &params, &batch);
    assert!(max_rel_err(&unrolled, &shared) < 1e-12);
}

fn scalar_tied() -> ModelSpec {
    ModelSpec::parse("input = 1\nloss = mse\nlayer = tied 2 identity nobias\n").unwrap()
}

#[test]
fn tied_scalar_hvp_matches_finite_differences() {
    let spec = scalar_tied();
    let batch = Batch::regression(&[vec![1.0]], &[vec![0.0]]).unwrap();
    let mut g = spec.forward(&[1.0], &batch).unwrap();
    g.gradient(true).unwrap();
    // L = (w²x − y)², d²L/dw² = 12w²x² − 4xy
    assert!((g.hvp(&[1.0]).unwrap()[0] - 12.0).abs() < 1e-12);
    for (w, x, y) in [(0.7, 1.3, 0.4), (-1.2, 0.5, 2.0), (2.0, -1.0, 1.0)] {
        let batch = Batch::regression(&[vec![x]], &[vec![y]]).unwrap();
        let mut g = spec.forward(&[w], &batch).unwrap();
        g.gradient(true).unwrap();
        let hv = g.hvp(&[1.0]).unwrap();
        let fd = fd_hvp(&spec, &[w], &batch, &[1.0]);
        assert!(max_rel_err(&hv, &fd) < 1e-5, "{hv:?} vs {fd:?}");
        let exact = 12.0 * w * w * x * x - 4.0 * x * y;
        assert!((hv[0] - exact).abs() < 1e-10 * exact.abs().max(1.0));
    }
}

#[test]
fn shared_minus_unrolled_is_the_cross_instance_product() {
    let spec = ModelSpec::mlp_tied(3, 3);
    let params = random_params(&spec, 9);
    let batch = classification_batch(3, 3, 6, 10);
    let exp_obj = ExpandedObjective::new(&spec, &batch);
    let dense = oracle::assemble(&exp_obj, &spec.expand(&params).unwrap(), AssemblyMethod::BasisHvp, 2000).unwrap();
    let exp_part = exp_obj.partition().clone();
    // keep only blocks between different copies of the same tied layer
    let mut cross = dense.matrix().clone();
    let copy_of = |i: usize| -> Option<(String, usize)> {
        let g = exp_part.groups().iter().position(|g| g.range().contains(&i)).unwrap();
        let name = &exp_part.groups()[g].name;
        name.split_once('#').map(|(l, k)| (l.to_string(), k.parse().unwrap()))
    };
    let tags: Vec<_> = (0..cross.nrows()).map(copy_of).collect();
    for i in 0..cross.nrows() {
        for j in 0..cross.ncols() {
            let keep = matches!((&tags[i], &tags[j]), (Some((a, k)), Some((b, m))) if a == b && k != m);
            if !keep {
                cross[(i, j)] = 0.0;
            }
        }
    }
    let mut shared = spec.forward(&params, &batch).unwrap();
    shared.gradient(true).unwrap();
    let mut unrolled = spec.clone().with_sharing(SharingMode::Unrolled).forward(&params, &batch).unwrap();
    unrolled.gradient(true).unwrap();
    let mut r = rng(11);
    for _ in 0..5 {
        let v = normal_vec(&mut r, spec.param_count());
        let diff: Vec<f64> = shared
            .hvp(&v)
            .unwrap()
            .iter()
            .zip(unrolled.hvp(&v).unwrap())
            .map(|(a, b)| a - b)
            .collect();
        let ve = nalgebra::DVector::from_vec(spec.expand(&v).unwrap());
        let predicted = spec.fold((&cross * ve).as_slice()).unwrap();
        let scale = predicted.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(scale > 0.0);
        for (a, b) in diff.iter().zip(&predicted) {
            assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b}");
        }
    }
}

#[test]
fn non_finite_loss_is_reported_with_a_node() {
    let spec = ModelSpec::mlp_small(2, 2);
    let params = spec.init_params(0);
    let batch = Batch::classification(&[vec![f64::NAN, 0.0], vec![1.0, 1.0]], &[0, 1]).unwrap();
    let mut g = spec.forward(&params, &batch).unwrap();
    assert!(matches!(g.gradient(true), Err(Error::NonFiniteNode { .. })));
}

#[test]
fn second_differentiation_needs_retain() {
    let spec = ModelSpec::mlp_small(2, 2);
    let batch = classification_batch(2, 2, 3, 0);
    let mut g = spec.forward(&spec.init_params(0), &batch).unwrap();
    g.gradient(false).unwrap();
    assert!(matches!(g.hvp(&vec![0.0; spec.param_count()]), Err(Error::NotRetained)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hvp_is_symmetric_and_linear(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, tied in any::<bool>()) {
        let spec = if tied { ModelSpec::mlp_tied(3, 3) } else { ModelSpec::mlp_small(3, 3) };
        let params = random_params(&spec, seed);
        let batch = classification_batch(3, 3, 5, seed + 1);
        let mut g = spec.forward(&params, &batch).unwrap();
        g.gradient(true).unwrap();
        let mut r = rng(seed + 2);
        let u = normal_vec(&mut r, spec.param_count());
        let v = normal_vec(&mut r, spec.param_count());
        let hu = g.hvp(&u).unwrap();
        let hv = g.hvp(&v).unwrap();
        let (a, b) = (dot(&u, &hv), dot(&v, &hu));
        prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()).max(1e-12));
        let w: Vec<f64> = u.iter().zip(&v).map(|(x, y)| alpha * x + beta * y).collect();
        let hw = g.hvp(&w).unwrap();
        let comb: Vec<f64> = hu.iter().zip(&hv).map(|(x, y)| alpha * x + beta * y).collect();
        prop_assert!(max_rel_err(&hw, &comb) <= 1e-10);
    }
}
