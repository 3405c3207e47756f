use rand::Rng;

use super::config::{encoder_stage, NetworkConfig, LEVELS};
use crate::consensus::{aggregate_consensus, multi_scale_pool, AttentionProjection};
use crate::error::{dim_err, Error, Result};
use crate::kernelgen::{DynamicKernelSet, KernelGenParams, KernelKind};
use crate::nn::{join, BatchNorm, Conv2d, ConvBnRelu, Module, Slot};
use crate::rng;
use crate::tensor::{BnMode, Real, Tensor, Var};

/// 1×1 convolution + BN + ReLU that merges the adaptive and common responses.
#[derive(Debug)]
pub struct Fusion<T: Real> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Real> Fusion<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c1: usize, rng: &mut R) -> Self {
        Fusion { conv: Conv2d::new(c_in, c1, 1, false, rng), bn: BatchNorm::new(c1) }
    }
}

impl<T: Real> Module<T> for Fusion<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// Convolves every image with its adaptive kernel and with the common
/// kernel, concatenates whichever responses exist and fuses them to `C1`
/// channels.
pub fn dynamic_search<T: Real>(
    x: &Var<T>,
    kernels: &DynamicKernelSet<T>,
    fusion: &Fusion<T>,
    mode: BnMode,
) -> Result<Var<T>> {
    let mut responses = Vec::with_capacity(2);
    if let Some(point) = &kernels.adaptive_point {
        let y = match (kernels.kind, &kernels.adaptive_depth) {
            (KernelKind::Vanilla, _) => x.conv2d_per_image(point, 0)?,
            (KernelKind::Large, Some(depth)) => x.depthwise_conv2d_per_image(depth, 1)?.conv2d_per_image(point, 0)?,
            (KernelKind::Large, None) => {
                return Err(Error::State("large adaptive kernel without depthwise part".into()))
            }
        };
        responses.push(y);
    }
    if let Some(point) = &kernels.common_point {
        let y = match (kernels.kind, &kernels.common_depth) {
            (KernelKind::Vanilla, _) => x.conv2d(point, 0)?,
            (KernelKind::Large, Some(depth)) => x.depthwise_conv2d(depth, 1)?.conv2d(point, 0)?,
            (KernelKind::Large, None) => return Err(Error::State("large common kernel without depthwise part".into())),
        };
        responses.push(y);
    }
    if responses.is_empty() {
        return Err(Error::State("kernel set has no branches".into()));
    }
    let refs: Vec<&Var<T>> = responses.iter().collect();
    let cat = Var::concat(&refs, 1)?;
    Ok(fusion.bn.forward(&fusion.conv.forward(&cat)?, mode)?.relu())
}

/// Summarise, generate kernels, search.
#[derive(Debug)]
pub struct CadcBlock<T: Real> {
    pub attention: AttentionProjection<T>,
    pub kernels: KernelGenParams<T>,
    pub fusion: Fusion<T>,
}

impl<T: Real> CadcBlock<T> {
    pub fn forward(&self, x: &Var<T>, mode: BnMode) -> Result<Var<T>> {
        Ok(self.forward_with_kernels(x, mode)?.0)
    }

    pub fn forward_with_kernels(&self, x: &Var<T>, mode: BnMode) -> Result<(Var<T>, DynamicKernelSet<T>)> {
        let pooled = multi_scale_pool(x)?;
        let z = aggregate_consensus(&pooled, &self.attention)?;
        let ks = self.kernels.generate(&z, mode)?;
        Ok((dynamic_search(x, &ks, &self.fusion, mode)?, ks))
    }
}

impl<T: Real> Module<T> for CadcBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.kernels.visit(&join(prefix, "kernels"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
    }
}

#[derive(Debug)]
pub enum DecoderMode<T: Real> {
    Cadc(Box<CadcBlock<T>>),
    /// Single-channel sigmoid gate computed from the upsampled previous
    /// decoder output.
    SpatialAttention(Conv2d<T>),
}

/// One decoder: filter the encoder feature (dynamic search or spatial
/// attention), concatenate with the previous decoder output and apply two
/// 3×3 conv+BN+ReLU.
#[derive(Debug)]
pub struct Decoder<T: Real> {
    pub mode: DecoderMode<T>,
    pub conv1: ConvBnRelu<T>,
    pub conv2: ConvBnRelu<T>,
    pub side: Conv2d<T>,
    /// Upsampling applied to the previous decoder output (1 for the first).
    pub prev_factor: usize,
}

impl<T: Real> Decoder<T> {
    fn prepare_prev(&self, prev: &Var<T>) -> Result<Var<T>> {
        prev.upsample_bilinear(self.prev_factor)
    }

    fn fuse(&self, filtered: &Var<T>, prev_up: &Var<T>, mode: BnMode) -> Result<Var<T>> {
        if filtered.shape()[2..] != prev_up.shape()[2..] {
            return Err(dim_err!(
                "decoder: encoder feature {:?} and previous output {:?} differ spatially",
                filtered.shape(),
                prev_up.shape()
            ));
        }
        let cat = Var::concat(&[filtered, prev_up], 1)?;
        self.conv2.forward(&self.conv1.forward(&cat, mode)?, mode)
    }

    pub fn forward(&self, x_enc: &Var<T>, prev: &Var<T>, mode: BnMode) -> Result<Var<T>> {
        match &self.mode {
            DecoderMode::Cadc(block) => cadc_level(x_enc, prev, self, block, mode),
            DecoderMode::SpatialAttention(gate) => spatial_attention_level(x_enc, prev, self, gate, mode),
        }
    }

    pub fn is_cadc(&self) -> bool {
        matches!(self.mode, DecoderMode::Cadc(_))
    }
}

/// Dynamic search on `x_enc`, concatenated with the upsampled `prev`.
pub fn cadc_level<T: Real>(
    x_enc: &Var<T>,
    prev: &Var<T>,
    dec: &Decoder<T>,
    block: &CadcBlock<T>,
    mode: BnMode,
) -> Result<Var<T>> {
    let searched = block.forward(x_enc, mode)?;
    dec.fuse(&searched, &dec.prepare_prev(prev)?, mode)
}

/// `x_enc ⊙ sigmoid(gate(up(prev)))`, concatenated with `up(prev)`.
pub fn spatial_attention_level<T: Real>(
    x_enc: &Var<T>,
    prev: &Var<T>,
    dec: &Decoder<T>,
    gate: &Conv2d<T>,
    mode: BnMode,
) -> Result<Var<T>> {
    let up = dec.prepare_prev(prev)?;
    let attn = gate.forward(&up)?.sigmoid();
    let filtered = x_enc.mul_channel_broadcast(&attn)?;
    dec.fuse(&filtered, &up, mode)
}

impl<T: Real> Module<T> for Decoder<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        match &mut self.mode {
            DecoderMode::Cadc(b) => b.visit(&join(prefix, "cadc"), f),
            DecoderMode::SpatialAttention(g) => g.visit(&join(prefix, "gate"), f),
        }
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.side.visit(&join(prefix, "side"), f);
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct GroupOutput<T: Real> {
    /// Six `N×1×R×R` probability maps, deepest decoder first.
    pub side_outputs: Vec<Var<T>>,
}

impl<T: Real> GroupOutput<T> {
    /// Output of the shallowest decoder.
    pub fn final_maps(&self) -> &Var<T> {
        self.side_outputs.last().expect("six side outputs")
    }
}

/// Encoder (six 3×3 conv+BN+ReLU stages, 2× max-pool between them) and six
/// decoders, deepest first.
#[derive(Debug)]
pub struct Network<T: Real> {
    pub config: NetworkConfig,
    pub encoder: Vec<ConvBnRelu<T>>,
    pub decoders: Vec<Decoder<T>>,
}

impl<T: Real> Network<T> {
    /// Builds a freshly initialised network; initialisation depends only on
    /// the config (including its seed).
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut rng = rng::stream(cfg.seed, &[0]);
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut c_in = 3;
        for &w in &cfg.widths {
            encoder.push(ConvBnRelu::new(c_in, w, 3, &mut rng));
            c_in = w;
        }
        let mut decoders = Vec::with_capacity(LEVELS);
        for d in 0..LEVELS {
            let mut rng = rng::stream(cfg.seed, &[1, d as u64]);
            let w = cfg.decoder_width(d);
            let prev_c = if d == 0 { cfg.widths[LEVELS - 1] } else { cfg.decoder_width(d - 1) };
            let (mode, filtered_c) = if cfg.is_cadc(d) {
                let c1 = cfg.c1_for(d);
                let block = CadcBlock {
                    attention: AttentionProjection::new(w, &mut rng)?,
                    kernels: KernelGenParams::new(
                        w,
                        c1,
                        cfg.kernel_kind,
                        cfg.branches,
                        cfg.attention_hidden,
                        &mut rng,
                    )?,
                    fusion: Fusion::new(c1 * cfg.branches.count(), c1, &mut rng),
                };
                (DecoderMode::Cadc(Box::new(block)), c1)
            } else {
                (DecoderMode::SpatialAttention(Conv2d::new(prev_c, 1, 1, true, &mut rng)), w)
            };
            decoders.push(Decoder {
                mode,
                conv1: ConvBnRelu::new(filtered_c + prev_c, w, 3, &mut rng),
                conv2: ConvBnRelu::new(w, w, 3, &mut rng),
                side: Conv2d::new(w, 1, 1, true, &mut rng),
                prev_factor: if d == 0 { 1 } else { 2 },
            });
        }
        Ok(Network { config: cfg, encoder, decoders })
    }

    /// Encoder features of all six stages.
    pub fn encode(&self, x: &Var<T>, mode: BnMode) -> Result<Vec<Var<T>>> {
        let mut feats = Vec::with_capacity(LEVELS);
        let mut h = x.clone();
        for (s, stage) in self.encoder.iter().enumerate() {
            if s > 0 {
                let (hh, ww) = (h.shape()[2], h.shape()[3]);
                h = h.adaptive_max_pool2d(hh / 2, ww / 2)?;
            }
            h = stage.forward(&h, mode)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }

    /// Full forward pass of `images: N×3×R×R`.
    pub fn forward(&self, images: &Var<T>, mode: BnMode) -> Result<GroupOutput<T>> {
        let r = self.config.resolution;
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(dim_err!("network expects N×3×{r}×{r} images, got {s:?}"));
        }
        let feats = self.encode(images, mode)?;
        let mut prev = feats[LEVELS - 1].clone();
        let mut side_outputs = Vec::with_capacity(LEVELS);
        for (d, dec) in self.decoders.iter().enumerate() {
            let x_enc = &feats[encoder_stage(d)];
            prev = dec.forward(x_enc, &prev, mode)?;
            let factor = r / prev.shape()[2];
            side_outputs.push(dec.side.forward(&prev)?.sigmoid().upsample_bilinear(factor)?);
        }
        Ok(GroupOutput { side_outputs })
    }

    /// Kernels generated at every CADC decoder for `images` (inspection only).
    pub fn kernel_sets(&self, images: &Var<T>, mode: BnMode) -> Result<Vec<DynamicKernelSet<T>>> {
        let feats = self.encode(images, mode)?;
        let mut out = Vec::new();
        for (d, dec) in self.decoders.iter().enumerate() {
            if let DecoderMode::Cadc(block) = &dec.mode {
                out.push(block.forward_with_kernels(&feats[encoder_stage(d)], mode)?.1);
            }
        }
        Ok(out)
    }
}

impl<T: Real> Module<T> for Network<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (i, e) in self.encoder.iter_mut().enumerate() {
            e.visit(&join(prefix, &format!("encoder{}", i + 1)), f);
        }
        for (i, d) in self.decoders.iter_mut().enumerate() {
            d.visit(&join(prefix, &format!("decoder{}", i + 1)), f);
        }
    }
}

/// Runs the network on `images: N×3×R×R` (already at the configured
/// resolution).
pub fn forward_group<T: Real>(net: &Network<T>, images: &Tensor<T>, mode: BnMode) -> Result<GroupOutput<T>> {
    net.forward(&Var::constant(images.clone()), mode)
}

/// Sum over side outputs of the clamped mean BCE against `gt: N×1×R×R`.
pub fn deep_supervised_loss<T: Real>(side_outputs: &[Var<T>], gt: &Tensor<T>) -> Result<Var<T>> {
    if let Some(v) = gt.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::Data(format!("ground truth value {v} outside [0,1]")));
    }
    let mut total: Option<Var<T>> = None;
    for s in side_outputs {
        let l = s.bce_mean(gt)?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Usage("no side outputs".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernelgen::Branches;
    use crate::nn::param_count;
    use crate::tensor::BatchNormStats;

    fn toy_cfg() -> NetworkConfig {
        NetworkConfig {
            widths: vec![4, 4, 4, 4, 4, 4],
            resolution: 192,
            attention_hidden: 8,
            cadc_levels: 2,
            ..Default::default()
        }
    }

    fn ident_stats(c: usize) -> Option<BatchNormStats<f64>> {
        Some(BatchNormStats { mean: Tensor::zeros(&[c]), var: Tensor::full(&[c], 1.0 - 1e-5) })
    }

    #[test]
    fn vanilla_identity_search_returns_input() {
        let (n, c) = (2, 3);
        let x = Var::constant(Tensor::<f64>::uniform(&[n, c, 5, 5], 0.0, 1.0, &mut rng::seeded(1)));
        let eye = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let eye_n = Tensor::from_fn(&[n, c, c, 1, 1], |i| eye.data()[i % (c * c)]);
        let ks = DynamicKernelSet {
            kind: KernelKind::Vanilla,
            c1: c,
            adaptive_point: Some(Var::constant(eye_n)),
            common_point: Some(Var::constant(eye)),
            adaptive_depth: None,
            common_depth: None,
        };
        let mut fusion = Fusion::<f64>::new(2 * c, c, &mut rng::seeded(2));
        fusion.conv.weight.set_value(Tensor::from_fn(&[c, 2 * c, 1, 1], |i| {
            let (o, k) = (i / (2 * c), i % (2 * c));
            if k % c == o {
                0.5
            } else {
                0.0
            }
        }));
        fusion.bn.set_stats(ident_stats(c));
        let y = dynamic_search(&x, &ks, &fusion, BnMode::Eval).unwrap();
        assert!(y.value().max_abs_diff(x.value()) < 1e-12);
    }

    #[test]
    fn forward_shapes_and_range() {
        let net = Network::<f32>::new(&toy_cfg()).unwrap();
        let x = Tensor::uniform(&[2, 3, 192, 192], 0.0, 1.0, &mut rng::seeded(3));
        let out = forward_group(&net, &x, BnMode::Train).unwrap();
        assert_eq!(out.side_outputs.len(), 6);
        for s in &out.side_outputs {
            assert_eq!(s.shape(), &[2, 1, 192, 192]);
            assert!(s.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn spatial_gate_saturation() {
        let cfg = NetworkConfig { cadc_levels: 0, ..toy_cfg() };
        let mut net = Network::<f64>::new(&cfg).unwrap();
        let dec = &mut net.decoders[1];
        let DecoderMode::SpatialAttention(gate) = &mut dec.mode else { panic!("expected gate") };
        gate.weight.set_value(Tensor::zeros(&[1, 4, 1, 1]));
        let x = Var::constant(Tensor::<f64>::uniform(&[1, 4, 12, 12], -1.0, 1.0, &mut rng::seeded(4)));
        let prev = Var::constant(Tensor::<f64>::uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut rng::seeded(5)));
        for (bias, expect_pass) in [(1e4, true), (-1e4, false)] {
            gate.bias.as_mut().unwrap().set_value(Tensor::full(&[1], bias));
            let attn = gate.forward(&prev.upsample_bilinear(2).unwrap()).unwrap().sigmoid();
            let filtered = x.mul_channel_broadcast(&attn).unwrap();
            let target = if expect_pass { x.value().clone() } else { Tensor::zeros(x.shape()) };
            assert!(filtered.value().max_abs_diff(&target) < 1e-4);
        }
    }

    #[test]
    fn decoder_output_matches_encoder_level() {
        let net = Network::<f32>::new(&toy_cfg()).unwrap();
        let x = Var::constant(Tensor::uniform(&[2, 3, 192, 192], 0.0, 1.0, &mut rng::seeded(6)));
        let feats = net.encode(&x, BnMode::Train).unwrap();
        assert_eq!(feats[5].shape(), &[2, 4, 6, 6]);
        let d1 = net.decoders[0].forward(&feats[5], &feats[5], BnMode::Train).unwrap();
        assert_eq!(d1.shape(), feats[5].shape());
        let d2 = net.decoders[1].forward(&feats[4], &d1, BnMode::Train).unwrap();
        assert_eq!(d2.shape(), feats[4].shape());
    }

    #[test]
    fn vanilla_levels_build_no_depthwise_kernels() {
        let cfg = NetworkConfig { kernel_kind: KernelKind::Vanilla, ..toy_cfg() };
        let net = Network::<f32>::new(&cfg).unwrap();
        let x = Var::constant(Tensor::uniform(&[2, 3, 192, 192], 0.0, 1.0, &mut rng::seeded(7)));
        let sets = net.kernel_sets(&x, BnMode::Train).unwrap();
        assert_eq!(sets.len(), 2);
        assert!(sets.iter().all(|k| k.adaptive_depth.is_none() && k.common_depth.is_none()));
    }

    #[test]
    fn branch_count_changes_parameters_only() {
        let mut a = Network::<f32>::new(&toy_cfg()).unwrap();
        let mut b = Network::<f32>::new(&NetworkConfig { branches: Branches::ADAPTIVE, ..toy_cfg() }).unwrap();
        assert!(param_count(&mut a) > param_count(&mut b));
    }

    #[test]
    fn loss_closed_forms() {
        let gt = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let half: Vec<Var<f64>> = (0..6).map(|_| Var::constant(Tensor::full(&[1, 1, 4, 4], 0.5))).collect();
        let l = deep_supervised_loss(&half, &gt).unwrap().value().item();
        assert!((l - 6.0 * std::f64::consts::LN_2).abs() < 1e-6);
        let perfect: Vec<Var<f64>> = (0..6).map(|_| Var::constant(gt.clone())).collect();
        let l = deep_supervised_loss(&perfect, &gt).unwrap().value().item();
        assert!((0.0..6.0 * 1.2e-6).contains(&l));
        let bad = Tensor::full(&[1, 1, 4, 4], 1.5);
        assert!(matches!(deep_supervised_loss(&half, &bad), Err(Error::Data(_))));
    }
}
