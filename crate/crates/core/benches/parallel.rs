use cadc::metrics::{EvalPair, ImageScores};
use cadc::par;
use cadc::rng::seeded;
use cadc::searchnet::{forward_group, Network, NetworkConfig};
use cadc::tensor::BnMode;
use cadc::toy::toy_group;
use cadc::{Tensor, Var};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn conv(c: &mut Criterion) {
    let mut rng = seeded(0);
    let x = Tensor::<f32>::uniform(&[8, 16, 64, 64], -1.0, 1.0, &mut rng);
    let w = Tensor::<f32>::uniform(&[32, 16, 3, 3], -0.1, 0.1, &mut rng);
    let mut g = c.benchmark_group("conv2d_fwd_bwd");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let (xv, wv) = (Var::leaf(x.clone()), Var::leaf(w.clone()));
                xv.conv2d(&wv, 1).unwrap().sum().backward().unwrap()
            })
        });
    }
    g.finish();
    par::set_sequential(false);
}

fn network(c: &mut Criterion) {
    let cfg = NetworkConfig {
        widths: vec![8, 8, 16, 16, 16, 16],
        resolution: 192,
        attention_hidden: 64,
        ..Default::default()
    };
    let net = Network::<f32>::new(&cfg).unwrap();
    let (images, _) = toy_group(4, 192, 1);
    let mut g = c.benchmark_group("group_forward");
    g.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| forward_group(&net, &images, BnMode::Train).unwrap())
        });
    }
    g.finish();
    par::set_sequential(false);
}

fn metrics(c: &mut Criterion) {
    let mut rng = seeded(2);
    let preds: Vec<Tensor<f32>> = (0..16).map(|_| Tensor::uniform(&[1, 128, 128], 0.0, 1.0, &mut rng)).collect();
    let gts: Vec<Tensor<f32>> = preds.iter().map(|p| p.map(|v| if v > 0.7 { 1.0 } else { 0.0 })).collect();
    let mut g = c.benchmark_group("image_scores");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::map_range(preds.len(), |i| ImageScores::new(EvalPair::new(&preds[i], &gts[i]).unwrap())))
        });
    }
    g.finish();
    par::set_sequential(false);
}

criterion_group!(benches, conv, network, metrics);
criterion_main!(benches);
