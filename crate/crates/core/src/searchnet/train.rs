use rand::seq::index::sample;
use rand::Rng;

use super::network::{deep_supervised_loss, Network};
use crate::error::{dim_err, Error, Result};
use crate::nn::{for_each_param, set_requires_grad};
use crate::rng;
use crate::tensor::{BnMode, Real, Tensor, Var};

/// Largest minibatch drawn from one group.
pub const MAX_GROUP_BATCH: usize = 14;

/// One training group at network resolution.
#[derive(Clone, Debug)]
pub struct TrainGroup<T: Real> {
    /// `N×3×R×R`.
    pub images: Tensor<T>,
    /// `N×1×R×R`, values in `{0, 1}`.
    pub masks: Tensor<T>,
}

impl<T: Real> TrainGroup<T> {
    pub fn new(images: Tensor<T>, masks: Tensor<T>) -> Result<Self> {
        let (si, sm) = (images.shape(), masks.shape());
        if si.len() != 4 || sm.len() != 4 || si[1] != 3 || sm[1] != 1 || si[0] != sm[0] || si[2..] != sm[2..] {
            return Err(dim_err!("training group: images {si:?} and masks {sm:?} do not pair up"));
        }
        Ok(TrainGroup { images, masks })
    }

    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Fractions of `steps` after which the learning rate is divided by 10.
    pub lr_drops: Vec<f64>,
    pub max_group_batch: usize,
    /// Horizontal flip of each image with probability 0.5.
    pub flip: bool,
    /// Stop once the last decoder's BCE falls below this value.
    pub stop_below: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            steps: 2000,
            lr_drops: vec![0.5, 0.75],
            max_group_batch: MAX_GROUP_BATCH,
            flip: true,
            stop_below: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&f| step as f64 >= f * self.steps as f64).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Deep-supervised loss per step.
    pub losses: Vec<f64>,
    /// BCE of the last decoder per step.
    pub final_bce: Vec<f64>,
    /// Exponential moving average of `losses`, made non-increasing.
    pub smoothed: Vec<f64>,
}

impl TrainReport {
    pub fn steps_run(&self) -> usize {
        self.losses.len()
    }

    /// CSV with columns `step,loss,final_bce,smoothed`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,final_bce,smoothed\n");
        for i in 0..self.losses.len() {
            s += &format!("{},{:.6},{:.6},{:.6}\n", i + 1, self.losses[i], self.final_bce[i], self.smoothed[i]);
        }
        s
    }
}

/// EMA with factor 0.9 followed by a running minimum.
pub fn smooth_curve(losses: &[f64]) -> Vec<f64> {
    let mut ema: Option<f64> = None;
    let mut best = f64::INFINITY;
    losses
        .iter()
        .map(|&l| {
            let e = ema.map_or(l, |e| 0.9 * e + 0.1 * l);
            ema = Some(e);
            best = best.min(e);
            best
        })
        .collect()
}

/// Mirrors every image of `t: N×C×H×W` whose flag is set.
pub fn flip_horizontal<T: Real>(t: &Tensor<T>, flags: &[bool]) -> Tensor<T> {
    let s = t.shape();
    let (plane, w) = (s[1] * s[2] * s[3], s[3]);
    let mut out = t.clone();
    for (n, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        for row in out.data_mut()[n * plane..(n + 1) * plane].chunks_mut(w) {
            row.reverse();
        }
    }
    out
}

fn minibatch<T: Real, R: Rng>(g: &TrainGroup<T>, cfg: &TrainConfig, rng: &mut R) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = g.len();
    let (mut images, mut masks) = if n > cfg.max_group_batch {
        let mut idx = sample(rng, n, cfg.max_group_batch).into_vec();
        idx.sort_unstable();
        (g.images.select_axis0(&idx)?, g.masks.select_axis0(&idx)?)
    } else {
        (g.images.clone(), g.masks.clone())
    };
    if cfg.flip {
        let flags: Vec<bool> = (0..images.dim(0)).map(|_| rng.gen_bool(0.5)).collect();
        images = flip_horizontal(&images, &flags);
        masks = flip_horizontal(&masks, &flags);
    }
    Ok((images, masks))
}

/// SGD with momentum and weight decay over the groups in round-robin order.
/// Trains `net` in place and returns the loss curve.
pub fn train_toy<T: Real>(net: &mut Network<T>, data: &[TrainGroup<T>], cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Usage("training needs at least one group".into()));
    }
    if cfg.max_group_batch == 0 {
        return Err(Error::Usage("max_group_batch must be positive".into()));
    }
    let mut rng = rng::stream(cfg.seed, &[2]);
    set_requires_grad(net, true);
    let mut velocity: Vec<Tensor<T>> = Vec::new();
    for_each_param(net, |_, p| velocity.push(Tensor::zeros(p.value().shape())));
    let (mom, wd) = (T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    let mut report = TrainReport::default();

    let result = (|| -> Result<()> {
        for step in 0..cfg.steps {
            let group = &data[step % data.len()];
            let (images, masks) = minibatch(group, cfg, &mut rng)?;
            let out = net.forward(&Var::constant(images), BnMode::Train)?;
            let loss = deep_supervised_loss(&out.side_outputs, &masks)?;
            let final_bce = out.final_maps().bce_mean(&masks)?.value().item();
            let grads = loss.backward()?;
            let lr = T::lit(cfg.lr_at(step));
            let mut i = 0;
            for_each_param(net, |_, p| {
                let v = &mut velocity[i];
                i += 1;
                let g = grads.get(p.var());
                let w = p.value();
                let mut next = w.clone();
                for ((nv, vel), (&wv, k)) in next.data_mut().iter_mut().zip(v.data_mut()).zip(w.data().iter().zip(0..))
                {
                    let gv = g.map_or(T::zero(), |g| g.data()[k]);
                    *vel = mom * *vel + gv + wd * wv;
                    *nv = wv - lr * *vel;
                }
                p.set_value(next);
            });
            let l = loss.value().item().to_f64().unwrap();
            let fb = final_bce.to_f64().unwrap();
            if !l.is_finite() {
                return Err(Error::Solver { iterations: step + 1, residual: l });
            }
            report.losses.push(l);
            report.final_bce.push(fb);
            log::debug!("step {} loss {l:.5} final {fb:.5}", step + 1);
            if cfg.stop_below.is_some_and(|t| fb < t) {
                break;
            }
        }
        Ok(())
    })();
    set_requires_grad(net, false);
    result?;
    report.smoothed = smooth_curve(&report.losses);
    Ok(report)
}
