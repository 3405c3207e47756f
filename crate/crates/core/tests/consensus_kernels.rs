use cadc::consensus::{
    aggregate_consensus, multi_scale_pool, permute_group, same_image_mask, AttentionProjection, ConsensusFeature,
    FEATURES_PER_IMAGE,
};
use cadc::kernelgen::{
    naive_large_params, separable_large_params, Branches, DynamicKernelSet, KernelGenParams, KernelKind,
};
use cadc::rng::seeded;
use cadc::tensor::BnMode;
use cadc::{Tensor, Var};
use proptest::prelude::*;

const J: usize = FEATURES_PER_IMAGE;

fn pooled(n: usize, c: usize, seed: u64) -> Tensor<f64> {
    let x = Tensor::<f64>::uniform(&[n, c, 12, 12], -1.0, 1.0, &mut seeded(seed));
    multi_scale_pool(&Var::constant(x)).unwrap().value().clone()
}

fn consensus(f: &Tensor<f64>, proj: &AttentionProjection<f64>) -> ConsensusFeature<f64> {
    aggregate_consensus(&Var::constant(f.clone()), proj).unwrap()
}

#[test]
fn pooled_feature_has_46_rows_per_image() {
    let f = pooled(3, 6, 0);
    assert_eq!(f.shape(), &[3, J, 6]);
}

#[test]
fn attention_is_row_stochastic_and_suppresses_own_image() {
    for n in [2, 3, 5] {
        let f = pooled(n, 8, n as u64);
        let proj = AttentionProjection::new(8, &mut seeded(7)).unwrap();
        let z = consensus(&f, &proj);
        let m = n * J;
        let a = z.attention.value().data();
        let mask = same_image_mask(n);
        for r in 0..m {
            let row = &a[r * m..(r + 1) * m];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let own: f64 = row.iter().zip(&mask[r * m..(r + 1) * m]).filter(|(_, &s)| s).map(|(v, _)| v).sum();
            assert!(own < 1e-6, "n={n} row {r}: {own}");
        }
        assert!((z.common_weight.value().sum_all() - 1.0).abs() < 1e-12);
        assert_eq!(z.z.shape(), &[n, J, 8]);
    }
}

#[test]
fn zero_output_projection_leaves_features_unchanged() {
    let f = pooled(3, 8, 1);
    let mut proj = AttentionProjection::new(8, &mut seeded(2)).unwrap();
    proj.output.weight.set_value(Tensor::zeros(&[8, 4]));
    if let Some(b) = &mut proj.output.bias {
        b.set_value(Tensor::zeros(&[8]));
    }
    assert_eq!(consensus(&f, &proj).z.value(), &f);
}

fn permuted_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    permute_group(t, perm).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn consensus_is_permutation_equivariant(n in 2usize..5, seed in any::<u64>(), rot in 0usize..4) {
        let f = pooled(n, 6, seed);
        let proj = AttentionProjection::new(6, &mut seeded(seed ^ 5)).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(rot % n);
        perm.swap(0, n - 1);
        let base = consensus(&f, &proj);
        let moved = consensus(&permuted_rows(&f, &perm), &proj);
        let expect_z = permuted_rows(base.z.value(), &perm);
        prop_assert!(moved.z.value().max_abs_diff(&expect_z) < 1e-12);
        let expect_w = permuted_rows(base.common_weight.value(), &perm);
        prop_assert!(moved.common_weight.value().max_abs_diff(&expect_w) < 1e-12);
    }

    #[test]
    fn common_weight_is_a_distribution(n in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let c = 2 * c;
        let f = pooled(n, c, seed);
        let proj = AttentionProjection::new(c, &mut seeded(seed)).unwrap();
        let z = consensus(&f, &proj);
        prop_assert!(z.common_weight.value().data().iter().all(|&w| w >= 0.0));
        prop_assert!((z.common_weight.value().sum_all() - 1.0).abs() < 1e-12);
    }
}

fn kernels(kind: KernelKind, n: usize, c: usize, c1: usize, hidden: usize, seed: u64) -> DynamicKernelSet<f32> {
    let x = Tensor::<f32>::uniform(&[n, c, 8, 8], -1.0, 1.0, &mut seeded(seed));
    let proj = AttentionProjection::new(c, &mut seeded(seed + 1)).unwrap();
    let z = aggregate_consensus(&multi_scale_pool(&Var::constant(x)).unwrap(), &proj).unwrap();
    let gen = KernelGenParams::<f32>::new(c, c1, kind, Branches::BOTH, hidden, &mut seeded(seed + 2)).unwrap();
    gen.generate(&z, BnMode::Train).unwrap()
}

#[test]
fn kernel_shapes_across_group_sizes_and_widths() {
    for n in [1, 2, 5, 14] {
        for c in [8, 32] {
            for c1 in [8, 32] {
                for kind in [KernelKind::Vanilla, KernelKind::Large] {
                    let ks = kernels(kind, n, c, c1, 64, 0);
                    assert_eq!(ks.adaptive_point.as_ref().unwrap().shape(), &[n, c1, c, 1, 1]);
                    assert_eq!(ks.common_point.as_ref().unwrap().shape(), &[c1, c, 1, 1]);
                    match kind {
                        KernelKind::Large => {
                            assert_eq!(ks.adaptive_depth.as_ref().unwrap().shape(), &[n, c, 3, 3]);
                            assert_eq!(ks.common_depth.as_ref().unwrap().shape(), &[c, 3, 3]);
                            assert_eq!(ks.params_per_kernel(), separable_large_params(c, c1));
                        }
                        KernelKind::Vanilla => {
                            assert!(ks.adaptive_depth.is_none() && ks.common_depth.is_none());
                            assert_eq!(ks.params_per_kernel(), c1 * c);
                        }
                    }
                    assert!(ks.is_finite());
                }
            }
        }
    }
}

#[test]
fn separable_parameter_reduction() {
    for (c, c1) in [(8, 8), (32, 8), (64, 64), (128, 96)] {
        assert_eq!(separable_large_params(c, c1), c * 9 + c1 * c);
        assert_eq!(naive_large_params(c, c1), c1 * c * 9);
        assert!(separable_large_params(c, c1) < naive_large_params(c, c1));
    }
}

#[test]
fn kernels_follow_a_permutation_of_the_group() {
    let (n, c, c1) = (3, 8, 6);
    let x = Tensor::<f64>::uniform(&[n, c, 8, 8], -1.0, 1.0, &mut seeded(4));
    let proj = AttentionProjection::new(c, &mut seeded(5)).unwrap();
    let gen = KernelGenParams::<f64>::new(c, c1, KernelKind::Large, Branches::BOTH, 32, &mut seeded(6)).unwrap();
    let run = |t: &Tensor<f64>| {
        let z = aggregate_consensus(&multi_scale_pool(&Var::constant(t.clone())).unwrap(), &proj).unwrap();
        gen.generate(&z, BnMode::Train).unwrap()
    };
    let base = run(&x);
    let perm = [2, 0, 1];
    let moved = run(&permute_group(&x, &perm).unwrap());
    let v = |k: &Option<Var<f64>>| k.as_ref().unwrap().value().clone();
    assert!(v(&moved.common_point).max_abs_diff(&v(&base.common_point)) < 1e-10);
    assert!(v(&moved.common_depth).max_abs_diff(&v(&base.common_depth)) < 1e-10);
    assert!(v(&moved.adaptive_point).max_abs_diff(&permute_group(&v(&base.adaptive_point), &perm).unwrap()) < 1e-10);
    assert!(v(&moved.adaptive_depth).max_abs_diff(&permute_group(&v(&base.adaptive_depth), &perm).unwrap()) < 1e-10);
}
