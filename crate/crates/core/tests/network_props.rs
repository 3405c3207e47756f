use cadc::consensus::permute_group;
use cadc::kernelgen::{Branches, KernelKind};
use cadc::rng::seeded;
use cadc::searchnet::{deep_supervised_loss, forward_group, Network, NetworkConfig};
use cadc::tensor::BnMode;
use cadc::toy::toy_group;
use cadc::Tensor;

const R: usize = 192;

fn small(kind: KernelKind, branches: Branches, levels: usize) -> NetworkConfig {
    NetworkConfig {
        widths: vec![8, 8, 16, 16, 16, 16],
        resolution: R,
        attention_hidden: 16,
        kernel_kind: kind,
        branches,
        cadc_levels: levels,
        seed: 5,
        ..Default::default()
    }
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

#[test]
fn group_forward_is_permutation_equivariant_in_both_modes() {
    let net = Network::<f32>::new(&small(KernelKind::Large, Branches::BOTH, 4)).unwrap();
    let (images, _) = toy_group(3, R, 2);
    forward_group(&net, &images, BnMode::Train).unwrap();
    for mode in [BnMode::Train, BnMode::Eval] {
        let base = forward_group(&net, &images, mode).unwrap();
        let base_kernels = net.kernel_sets(&cadc::Var::constant(images.clone()), mode).unwrap();
        for perm in PERMS {
            let moved = forward_group(&net, &permute_group(&images, &perm).unwrap(), mode).unwrap();
            for (b, m) in base.side_outputs.iter().zip(&moved.side_outputs) {
                let expect = permute_group(b.value(), &perm).unwrap();
                let d = m.value().max_abs_diff(&expect);
                assert!(d < 1e-5, "{mode:?} {perm:?}: {d}");
            }
            let kernels = net.kernel_sets(&cadc::Var::constant(permute_group(&images, &perm).unwrap()), mode).unwrap();
            for (a, b) in base_kernels.iter().zip(&kernels) {
                for (x, y) in [(&a.common_point, &b.common_point), (&a.common_depth, &b.common_depth)] {
                    let d = x.as_ref().unwrap().value().max_abs_diff(y.as_ref().unwrap().value());
                    assert!(d < 1e-5, "{mode:?} {perm:?}: common kernel moved by {d}");
                }
            }
        }
    }
}

#[test]
fn side_outputs_are_probability_maps() {
    for (kind, branches, levels) in [
        (KernelKind::Vanilla, Branches::ADAPTIVE, 1),
        (KernelKind::Vanilla, Branches::COMMON, 2),
        (KernelKind::Large, Branches::BOTH, 4),
        (KernelKind::Large, Branches::BOTH, 0),
    ] {
        let net = Network::<f32>::new(&small(kind, branches, levels)).unwrap();
        let (images, masks) = toy_group(2, R, 1);
        let out = forward_group(&net, &images, BnMode::Train).unwrap();
        assert_eq!(out.side_outputs.len(), 6);
        for s in &out.side_outputs {
            assert_eq!(s.shape(), &[2, 1, R, R]);
            assert!(s.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let loss = deep_supervised_loss(&out.side_outputs, &masks).unwrap().value().item();
        assert!(loss.is_finite() && loss >= 0.0);
    }
}

#[test]
fn kernel_kind_changes_only_kernel_shapes() {
    let (images, _) = toy_group(2, R, 4);
    let x = cadc::Var::constant(images.clone());
    let mut shapes = Vec::new();
    for kind in [KernelKind::Vanilla, KernelKind::Large] {
        let net = Network::<f32>::new(&small(kind, Branches::BOTH, 4)).unwrap();
        let out = forward_group(&net, &images, BnMode::Train).unwrap();
        shapes.push(out.side_outputs.iter().map(|s| s.shape().to_vec()).collect::<Vec<_>>());
        for ks in net.kernel_sets(&x, BnMode::Train).unwrap() {
            assert_eq!(ks.kind, kind);
            assert_eq!(ks.adaptive_depth.is_some(), kind == KernelKind::Large);
        }
    }
    assert_eq!(shapes[0], shapes[1]);
}

#[test]
fn initialisation_depends_only_on_config() {
    let cfg = small(KernelKind::Large, Branches::BOTH, 1);
    let images = Tensor::<f32>::uniform(&[2, 3, R, R], 0.0, 1.0, &mut seeded(8));
    let a = forward_group(&Network::<f32>::new(&cfg).unwrap(), &images, BnMode::Train).unwrap();
    let b = forward_group(&Network::<f32>::new(&cfg).unwrap(), &images, BnMode::Train).unwrap();
    assert_eq!(a.final_maps().value(), b.final_maps().value());
}
