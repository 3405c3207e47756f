//! Finite-difference gradient checks for every differentiable operation, from
//! single tensor ops up to whole decoder levels and the training loss.
//!
//! Module parameters are treated as extra inputs, so their gradients are
//! checked along with the data gradients.

use std::time::Instant;

use crate::consensus::{aggregate_consensus, multi_scale_pool, AttentionProjection, ConsensusFeature};
use crate::error::Result;
use crate::grad_fn;
use crate::kernelgen::{
    large_adaptive, large_common, vanilla_adaptive, vanilla_common, Branches, DynamicKernelSet, KernelGenParams,
    KernelKind,
};
use crate::nn::{for_each_param, BatchNorm, Conv2d, ConvBnRelu, Module};
use crate::rng;
use crate::searchnet::deep_supervised_loss;
use crate::searchnet::network::{
    cadc_level, dynamic_search, spatial_attention_level, CadcBlock, Decoder, DecoderMode, Fusion,
};
use crate::tensor::gradcheck::{check, GradFn};
use crate::tensor::{BatchNormStats, BnMode, Real, Tensor, Var};

pub const F64_TOLERANCE: f64 = 1e-6;
pub const F32_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per input and check.
pub const DEFAULT_COORDS: usize = 24;

/// Worst relative errors of one case over all seeds.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub f64_error: f64,
    pub f32_error: f64,
    pub seeds: usize,
    pub seconds: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.f64_error < F64_TOLERANCE && self.f32_error < F32_TOLERANCE
    }
}

pub fn to_csv(results: &[CaseResult]) -> String {
    let mut s = String::from("op,max_rel_error_f64,max_rel_error_f32,seeds,pass\n");
    for r in results {
        s += &format!("{},{:.3e},{:.3e},{},{}\n", r.name, r.f64_error, r.f32_error, r.seeds, r.passed());
    }
    s
}

type Runner = fn(u64, usize) -> Result<(f64, f64)>;

/// Every case name, in suite order.
pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|(n, _)| *n).collect()
}

/// Runs every case whose name contains `filter` (all when `None`) for each
/// seed, at both precisions.
pub fn run_suite(seeds: &[u64], max_coords: usize, filter: Option<&str>) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (name, run) in CASES.iter().filter(|(n, _)| filter.is_none_or(|f| n.contains(f))) {
        let t = Instant::now();
        let (mut e64, mut e32) = (0.0f64, 0.0f64);
        for &s in seeds {
            let (a, b) = run(s, max_coords)?;
            e64 = e64.max(a);
            e32 = e32.max(b);
        }
        log::debug!("{name}: f64 {e64:.2e}, f32 {e32:.2e}");
        out.push(CaseResult {
            name,
            f64_error: e64,
            f32_error: e32,
            seeds: seeds.len(),
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

fn both<F: GradFn>(f: &F, inputs: &[Tensor<f64>], seed: u64, coords: usize) -> Result<(f64, f64)> {
    Ok((
        check::<f64, F>(f, inputs, seed, coords)?.max_rel_error,
        check::<f32, F>(f, inputs, seed, coords)?.max_rel_error,
    ))
}

fn rand(shape: &[usize], seed: u64, k: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng::stream(seed, &[k]))
}

macro_rules! simple {
    ($fn_name:ident, $name:ident, [$($shape:expr),*], |$x:ident| $body:expr) => {
        fn $fn_name(seed: u64, coords: usize) -> Result<(f64, f64)> {
            grad_fn!($name, |$x| $body);
            let mut k = 0;
            let inputs = vec![$({ k += 1; rand(&$shape, seed, k) }),*];
            both(&$name, &inputs, seed, coords)
        }
    };
}

simple!(case_add, Add, [[2, 3, 4], [2, 3, 4]], |x| x[0].add(&x[1]));
simple!(case_sub, Sub, [[2, 3, 4], [2, 3, 4]], |x| x[0].sub(&x[1]));
simple!(case_mul, Mul, [[2, 3, 4], [2, 3, 4]], |x| x[0].mul(&x[1]));
simple!(case_scale, Scale, [[3, 4]], |x| Ok(x[0].scale(T::lit(-1.7)).add_scalar(T::lit(0.3))));
simple!(case_sum, Sum, [[3, 4]], |x| Ok(x[0].sum()));
simple!(case_mean, Mean, [[3, 4]], |x| Ok(x[0].mean()));
simple!(case_sum_axis, SumAxis, [[2, 3, 4]], |x| x[0].sum_axis(1));
simple!(case_reshape_permute, ReshapePermute, [[2, 3, 4]], |x| x[0]
    .reshape(&[6, 4])?
    .reshape(&[2, 3, 4])?
    .permute(&[2, 0, 1]));
simple!(case_concat, Concat, [[2, 2, 3], [2, 3, 3]], |x| Var::concat(&[&x[0], &x[1]], 1));
simple!(case_select, Select, [[4, 3]], |x| x[0].select_axis0(&[2, 0, 2, 3]));
simple!(case_matmul, Matmul, [[3, 4], [4, 5]], |x| x[0].matmul(&x[1]));
simple!(case_bmm, Bmm, [[2, 3, 4], [2, 4, 2]], |x| x[0].bmm(&x[1]));
simple!(case_fc, Fc, [[3, 4], [5, 4], [5]], |x| x[0].fc(&x[1], Some(&x[2])));
simple!(case_softmax, Softmax, [[3, 5]], |x| x[0].scale(T::lit(2.0)).softmax(1));
simple!(case_relu, Relu, [[4, 5]], |x| Ok(x[0].relu()));
simple!(case_sigmoid, Sigmoid, [[4, 5]], |x| Ok(x[0].scale(T::lit(3.0)).sigmoid()));
simple!(case_prelu, Prelu, [[2, 3, 4, 4], [3]], |x| x[0].prelu(&x[1]));
simple!(case_masked_fill, MaskedFill, [[4, 4]], |x| {
    let mask: Vec<bool> = (0..16).map(|i| i % 5 == 0).collect();
    x[0].masked_fill(&mask, T::lit(-3.0))
});
simple!(case_channel_bias, ChannelBias, [[2, 3, 4, 4], [3]], |x| x[0].add_channel_bias(&x[1]));
simple!(case_channel_broadcast, ChannelBroadcast, [[2, 3, 4, 4], [2, 1, 4, 4]], |x| x[0].mul_channel_broadcast(&x[1]));
simple!(case_bce, Bce, [[2, 1, 4, 4]], |x| {
    let gt = Tensor::<f64>::from_fn(&[2, 1, 4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
    x[0].scale(T::lit(2.0)).sigmoid().bce_mean(&gt.cast())
});
simple!(case_conv2d, Conv, [[2, 3, 5, 5], [4, 3, 3, 3]], |x| x[0].conv2d(&x[1], 1));
simple!(case_conv2d_per_image, ConvPerImage, [[2, 3, 5, 5], [2, 4, 3, 1, 1]], |x| x[0].conv2d_per_image(&x[1], 0));
simple!(case_depthwise, Depthwise, [[2, 3, 5, 5], [3, 3, 3]], |x| x[0].depthwise_conv2d(&x[1], 1));
simple!(case_depthwise_per_image, DepthwisePerImage, [[2, 3, 5, 5], [2, 3, 3, 3]], |x| x[0]
    .depthwise_conv2d_per_image(&x[1], 1));
simple!(case_upsample, Upsample, [[2, 2, 3, 3]], |x| x[0].upsample_bilinear(2));
simple!(case_max_pool, MaxPool, [[2, 2, 7, 7]], |x| x[0].adaptive_max_pool2d(3, 3));
simple!(case_batch_norm_train, BnTrain, [[4, 3, 3, 3], [3], [3]], |x| {
    x[0].batch_norm(&x[1], &x[2], BnMode::Train, &mut None)
});
simple!(case_batch_norm_eval, BnEval, [[4, 3, 3, 3], [3], [3]], |x| {
    let stats =
        BatchNormStats { mean: Tensor::from_fn(&[3], |i| 0.1 * i as f64).cast(), var: Tensor::full(&[3], 0.7).cast() };
    x[0].batch_norm(&x[1], &x[2], BnMode::Eval, &mut Some(stats))
});
simple!(case_multi_scale_pool, MultiScalePool, [[2, 3, 7, 7]], |x| multi_scale_pool(&x[0]));
simple!(case_deep_supervised_loss, DeepLoss, [[2, 1, 4, 4], [2, 1, 4, 4], [2, 1, 4, 4]], |x| {
    let gt = Tensor::<f64>::from_fn(&[2, 1, 4, 4], |i| (i % 3 == 1) as u8 as f64);
    let sides: Vec<Var<T>> = x.iter().map(|v| v.sigmoid()).collect();
    deep_supervised_loss(&sides, &gt.cast())
});

/// A module whose parameters are appended to the data inputs of a check.
trait ModuleCase {
    type M<T: Real>: Module<T>;
    /// Number of leading data inputs.
    const DATA: usize;
    fn build<T: Real>() -> Result<Self::M<T>>;
    fn apply<T: Real>(m: &Self::M<T>, data: &[Var<T>]) -> Result<Var<T>>;
}

struct WithParams<C>(std::marker::PhantomData<C>);

impl<C: ModuleCase> GradFn for WithParams<C> {
    fn eval<T: Real>(&self, inputs: &[Var<T>]) -> Result<Var<T>> {
        let mut m = C::build::<T>()?;
        let mut k = C::DATA;
        for_each_param(&mut m, |_, p| {
            p.set_var(inputs[k].clone());
            k += 1;
        });
        C::apply(&m, &inputs[..C::DATA])
    }
}

fn module_case<C: ModuleCase>(data: Vec<Tensor<f64>>, seed: u64, coords: usize) -> Result<(f64, f64)> {
    let mut m = C::build::<f64>()?;
    let mut inputs = data;
    let mut r = rng::stream(seed, &[99]);
    for_each_param(&mut m, |_, p| {
        let noise = Tensor::<f64>::uniform(p.value().shape(), -0.1, 0.1, &mut r);
        inputs.push(Tensor::from_fn(p.value().shape(), |i| p.value().data()[i] + noise.data()[i]));
    });
    both(&WithParams::<C>(std::marker::PhantomData), &inputs, seed, coords)
}

const BUILD_SEED: u64 = 0x5eed;
const C: usize = 4;
const C1: usize = 3;
const HIDDEN: usize = 8;

fn flat_cat<T: Real>(parts: &[&Var<T>]) -> Result<Var<T>> {
    let flat: Vec<Var<T>> = parts.iter().map(|p| p.reshape(&[p.value().len()])).collect::<Result<_>>()?;
    let refs: Vec<&Var<T>> = flat.iter().collect();
    Var::concat(&refs, 0)
}

struct Consensus;
impl ModuleCase for Consensus {
    type M<T: Real> = AttentionProjection<T>;
    const DATA: usize = 1;
    fn build<T: Real>() -> Result<Self::M<T>> {
        AttentionProjection::new(C, &mut rng::seeded(BUILD_SEED))
    }
    fn apply<T: Real>(m: &Self::M<T>, x: &[Var<T>]) -> Result<Var<T>> {
        let z = aggregate_consensus(&x[0], m)?;
        flat_cat(&[&z.z, &z.common_weight])
    }
}

/// Consensus feature built directly from inputs `Z: N×46×C` and `W: N×46`.
fn feature<T: Real>(x: &[Var<T>]) -> ConsensusFeature<T> {
    let m = x[1].value().len();
    let dummy = Var::constant(Tensor::zeros(&[m, m]));
    ConsensusFeature { z: x[0].clone(), affinity: dummy.clone(), attention: dummy, common_weight: x[1].clone() }
}

macro_rules! generator_case {
    ($name:ident, $kind:expr, $branches:expr, |$m:ident, $z:ident| $body:expr) => {
        struct $name;
        impl ModuleCase for $name {
            type M<T: Real> = KernelGenParams<T>;
            const DATA: usize = 2;
            fn build<T: Real>() -> Result<Self::M<T>> {
                KernelGenParams::new(C, C1, $kind, $branches, HIDDEN, &mut rng::seeded(BUILD_SEED))
            }
            fn apply<T: Real>($m: &Self::M<T>, x: &[Var<T>]) -> Result<Var<T>> {
                let $z = feature(x);
                $body
            }
        }
    };
}

generator_case!(VanillaAdaptive, KernelKind::Vanilla, Branches::ADAPTIVE, |m, z| vanilla_adaptive(
    &z,
    m,
    BnMode::Train
));
generator_case!(VanillaCommon, KernelKind::Vanilla, Branches::COMMON, |m, z| vanilla_common(&z, m, BnMode::Train));
generator_case!(LargeAdaptive, KernelKind::Large, Branches::ADAPTIVE, |m, z| {
    let (d, p) = large_adaptive(&z, m, BnMode::Train)?;
    flat_cat(&[&d, &p])
});
generator_case!(LargeCommon, KernelKind::Large, Branches::COMMON, |m, z| {
    let (d, p) = large_common(&z, m, BnMode::Train)?;
    flat_cat(&[&d, &p])
});

fn generator_data(seed: u64) -> Vec<Tensor<f64>> {
    vec![rand(&[3, 46, C], seed, 1), Tensor::uniform(&[3, 46], 0.0, 0.02, &mut rng::stream(seed, &[2]))]
}

macro_rules! search_case {
    ($name:ident, $kind:expr, $branches:expr) => {
        struct $name;
        impl ModuleCase for $name {
            type M<T: Real> = Fusion<T>;
            const DATA: usize = 5;
            fn build<T: Real>() -> Result<Self::M<T>> {
                Ok(Fusion::new(C1 * $branches.count(), C1, &mut rng::seeded(BUILD_SEED)))
            }
            fn apply<T: Real>(m: &Self::M<T>, x: &[Var<T>]) -> Result<Var<T>> {
                let (b, large): (Branches, bool) = ($branches, $kind == KernelKind::Large);
                let ks = DynamicKernelSet {
                    kind: $kind,
                    c1: C1,
                    adaptive_point: b.adaptive.then(|| x[1].clone()),
                    common_point: b.common.then(|| x[2].clone()),
                    adaptive_depth: (b.adaptive && large).then(|| x[3].clone()),
                    common_depth: (b.common && large).then(|| x[4].clone()),
                };
                dynamic_search(&x[0], &ks, m, BnMode::Train)
            }
        }
    };
}

search_case!(SearchLarge, KernelKind::Large, Branches::BOTH);
search_case!(SearchVanilla, KernelKind::Vanilla, Branches::BOTH);

fn search_data(seed: u64) -> Vec<Tensor<f64>> {
    vec![
        rand(&[2, C, 5, 5], seed, 1),
        rand(&[2, C1, C, 1, 1], seed, 2),
        rand(&[C1, C, 1, 1], seed, 3),
        rand(&[2, C, 3, 3], seed, 4),
        rand(&[C, 3, 3], seed, 5),
    ]
}

const PREV_C: usize = 3;

fn decoder<T: Real>(cadc: bool) -> Result<Decoder<T>> {
    let mut r = rng::seeded(BUILD_SEED);
    let (mode, filtered) = if cadc {
        let block = CadcBlock {
            attention: AttentionProjection::new(C, &mut r)?,
            kernels: KernelGenParams::new(C, C1, KernelKind::Large, Branches::BOTH, HIDDEN, &mut r)?,
            fusion: Fusion::new(2 * C1, C1, &mut r),
        };
        (DecoderMode::Cadc(Box::new(block)), C1)
    } else {
        (DecoderMode::SpatialAttention(Conv2d::new(PREV_C, 1, 1, true, &mut r)), C)
    };
    Ok(Decoder {
        mode,
        conv1: ConvBnRelu::new(filtered + PREV_C, C, 3, &mut r),
        conv2: ConvBnRelu::new(C, C, 3, &mut r),
        side: Conv2d::new(C, 1, 1, true, &mut r),
        prev_factor: 2,
    })
}

struct CadcDecoder;
impl ModuleCase for CadcDecoder {
    type M<T: Real> = Decoder<T>;
    const DATA: usize = 2;
    fn build<T: Real>() -> Result<Self::M<T>> {
        decoder(true)
    }
    fn apply<T: Real>(m: &Self::M<T>, x: &[Var<T>]) -> Result<Var<T>> {
        let DecoderMode::Cadc(block) = &m.mode else { unreachable!() };
        let y = cadc_level(&x[0], &x[1], m, block, BnMode::Train)?;
        m.side.forward(&y)?.sigmoid().upsample_bilinear(2)
    }
}

struct AttentionDecoder;
impl ModuleCase for AttentionDecoder {
    type M<T: Real> = Decoder<T>;
    const DATA: usize = 2;
    fn build<T: Real>() -> Result<Self::M<T>> {
        decoder(false)
    }
    fn apply<T: Real>(m: &Self::M<T>, x: &[Var<T>]) -> Result<Var<T>> {
        let DecoderMode::SpatialAttention(gate) = &m.mode else { unreachable!() };
        let y = spatial_attention_level(&x[0], &x[1], m, gate, BnMode::Train)?;
        m.side.forward(&y)?.sigmoid().upsample_bilinear(2)
    }
}

fn decoder_data(seed: u64) -> Vec<Tensor<f64>> {
    vec![rand(&[2, C, 6, 6], seed, 1), rand(&[2, PREV_C, 3, 3], seed, 2)]
}

struct BnModule;
impl ModuleCase for BnModule {
    type M<T: Real> = BatchNorm<T>;
    const DATA: usize = 1;
    fn build<T: Real>() -> Result<Self::M<T>> {
        Ok(BatchNorm::new(3))
    }
    fn apply<T: Real>(m: &Self::M<T>, x: &[Var<T>]) -> Result<Var<T>> {
        m.forward(&x[0], BnMode::Train)
    }
}

const CASES: &[(&str, Runner)] = &[
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("scale", case_scale),
    ("sum", case_sum),
    ("mean", case_mean),
    ("sum_axis", case_sum_axis),
    ("reshape_permute", case_reshape_permute),
    ("concat", case_concat),
    ("select_axis0", case_select),
    ("matmul", case_matmul),
    ("bmm", case_bmm),
    ("fc", case_fc),
    ("softmax", case_softmax),
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("prelu", case_prelu),
    ("masked_fill", case_masked_fill),
    ("add_channel_bias", case_channel_bias),
    ("mul_channel_broadcast", case_channel_broadcast),
    ("bce_mean", case_bce),
    ("conv2d", case_conv2d),
    ("conv2d_per_image", case_conv2d_per_image),
    ("depthwise_conv2d", case_depthwise),
    ("depthwise_conv2d_per_image", case_depthwise_per_image),
    ("upsample_bilinear", case_upsample),
    ("adaptive_max_pool2d", case_max_pool),
    ("batch_norm_train", case_batch_norm_train),
    ("batch_norm_eval", case_batch_norm_eval),
    ("batch_norm_module", |s, c| module_case::<BnModule>(vec![rand(&[5, 3], s, 1)], s, c)),
    ("multi_scale_pool", case_multi_scale_pool),
    ("aggregate_consensus", |s, c| module_case::<Consensus>(vec![rand(&[2, 46, C], s, 1)], s, c)),
    ("vanilla_adaptive", |s, c| module_case::<VanillaAdaptive>(generator_data(s), s, c)),
    ("vanilla_common", |s, c| module_case::<VanillaCommon>(generator_data(s), s, c)),
    ("large_adaptive", |s, c| module_case::<LargeAdaptive>(generator_data(s), s, c)),
    ("large_common", |s, c| module_case::<LargeCommon>(generator_data(s), s, c)),
    ("dynamic_search_large", |s, c| module_case::<SearchLarge>(search_data(s), s, c)),
    ("dynamic_search_vanilla", |s, c| module_case::<SearchVanilla>(search_data(s), s, c)),
    ("cadc_decoder", |s, c| module_case::<CadcDecoder>(decoder_data(s), s, c)),
    ("spatial_attention_decoder", |s, c| module_case::<AttentionDecoder>(decoder_data(s), s, c)),
    ("deep_supervised_loss", case_deep_supervised_loss),
];
