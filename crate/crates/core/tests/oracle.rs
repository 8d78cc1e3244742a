mod common;

use common::*;
use layertrace::autodiff::Objective;
use layertrace::model::{ExpandedObjective, ModelObjective, ModelSpec, SharingMode};
use layertrace::oracle::{self, assemble_operator, AssemblyMethod, BlockStats};

#[test]
fn assembly_methods_agree_on_tanh_models() {
    for (name, spec) in zoo(3, 3) {
        let params = random_params(&spec, 21);
        let batch = classification_batch(3, 3, 6, 22);
        let obj = ModelObjective::new(&spec, &batch);
        let basis = oracle::assemble(&obj, &params, AssemblyMethod::BasisHvp, 2000).unwrap();
        let fd = oracle::assemble(&obj, &params, AssemblyMethod::FiniteDifference, 2000).unwrap();
        assert!(basis.asymmetry() < 1e-6, "{name}: {}", basis.asymmetry());
        for (a, b) in basis.matrix().iter().zip(fd.matrix().iter()) {
            assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "{name}: {a} vs {b}");
        }
        let blocks: f64 = (0..basis.partition().layers())
            .map(|l| basis.exact_block_stats(l).unwrap().trace)
            .sum();
        assert!((basis.trace() - blocks).abs() <= 1e-10 * basis.trace().abs().max(1.0));
    }
}

#[test]
fn block_trace_equals_eigenvalue_sum() {
    let spec = ModelSpec::mlp_tied(3, 3);
    let params = random_params(&spec, 3);
    let batch = classification_batch(3, 3, 6, 4);
    let h = oracle::assemble(&ModelObjective::new(&spec, &batch), &params, AssemblyMethod::BasisHvp, 2000).unwrap();
    for l in 0..h.partition().layers() {
        let s = h.exact_block_stats(l).unwrap();
        let ev: f64 = s.eigenvalues.as_ref().unwrap().iter().sum();
        assert!((ev - s.trace).abs() <= 1e-8 * s.trace.abs().max(1e-12), "layer {l}");
    }
}

#[test]
fn cross_blocks_are_transposes() {
    let spec = ModelSpec::mlp_small(3, 3);
    let params = random_params(&spec, 5);
    let batch = classification_batch(3, 3, 6, 6);
    let h = oracle::assemble(&ModelObjective::new(&spec, &batch), &params, AssemblyMethod::BasisHvp, 2000).unwrap();
    let a = h.cross_block(0, 2).unwrap();
    let b = h.cross_block(2, 0).unwrap();
    assert!((a - b.transpose()).abs().max() < 1e-8);
    assert!(h.cross_block(1, 1).is_err());
}

#[test]
fn weight_decay_shifts_each_block_by_two_lambda_p() {
    let lambda = 5e-4;
    for (name, spec) in zoo(3, 3) {
        let params = random_params(&spec, 7);
        let batch = classification_batch(3, 3, 6, 8);
        let plain = oracle::assemble(&ModelObjective::new(&spec, &batch), &params, AssemblyMethod::BasisHvp, 2000).unwrap();
        let decayed_spec = spec.clone().with_weight_decay(lambda);
        let decayed = oracle::assemble(&ModelObjective::new(&decayed_spec, &batch), &params, AssemblyMethod::BasisHvp, 2000).unwrap();
        for (l, g) in spec.partition().groups().iter().enumerate() {
            let shift = decayed.exact_block_stats(l).unwrap().trace - plain.exact_block_stats(l).unwrap().trace;
            let expected = 2.0 * lambda * g.len as f64;
            assert!((shift - expected).abs() <= 1e-8 * expected, "{name} layer {l}: {shift} vs {expected}");
        }
    }
}

#[test]
fn cross_instance_traces_explain_the_sharing_gap() {
    let spec = ModelSpec::mlp_tied(3, 3);
    let params = random_params(&spec, 12);
    let batch = classification_batch(3, 3, 6, 13);
    let shared = oracle::assemble(&ModelObjective::new(&spec, &batch), &params, AssemblyMethod::BasisHvp, 2000).unwrap();
    let mut unrolled_graph = spec.clone().with_sharing(SharingMode::Unrolled).forward(&params, &batch).unwrap();
    unrolled_graph.gradient(true).unwrap();
    let unrolled = assemble_operator(&mut unrolled_graph, 2000).unwrap();
    let exp_obj = ExpandedObjective::new(&spec, &batch);
    let expanded = oracle::assemble(&exp_obj, &spec.expand(&params).unwrap(), AssemblyMethod::BasisHvp, 2000).unwrap();
    let part = exp_obj.partition();
    let a = part.index_of("tied1#0").unwrap();
    let b = part.index_of("tied1#1").unwrap();
    let cross = expanded.cross_block(a, b).unwrap().trace() + expanded.cross_block(b, a).unwrap().trace();
    let gap = shared.exact_block_stats(1).unwrap().trace - unrolled.exact_block_stats(1).unwrap().trace;
    assert!((gap - cross).abs() <= 1e-6 * cross.abs(), "{gap} vs {cross}");
    // untied layers are unaffected
    for l in [0, 2] {
        let s = shared.exact_block_stats(l).unwrap().trace;
        let u = unrolled.exact_block_stats(l).unwrap().trace;
        assert!((s - u).abs() <= 1e-10 * s.abs().max(1.0));
    }
}

#[test]
fn block_stats_of_known_matrices() {
    let id = nalgebra::DMatrix::<f64>::identity(3, 3);
    let s = BlockStats::of(&id);
    assert_eq!((s.trace, s.frobenius_sq, s.diag_sq_sum), (3.0, 3.0, 3.0));
}

#[test]
fn binary_dump_round_trips_through_a_file() {
    let spec = ModelSpec::mlp_tied(2, 2);
    let batch = classification_batch(2, 2, 4, 1);
    let h = oracle::assemble(&ModelObjective::new(&spec, &batch), &random_params(&spec, 1), AssemblyMethod::BasisHvp, 2000).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.bin");
    h.write_binary(&path).unwrap();
    let (m, offsets) = oracle::DenseHessian::read_binary(&path).unwrap();
    assert_eq!(&m, h.matrix());
    let expected: Vec<usize> = spec.partition().groups().iter().map(|g| g.offset).chain([spec.param_count()]).collect();
    assert_eq!(offsets, expected);
}
