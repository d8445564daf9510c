//! Synthetic data, augmentation, the optimizer and the training loop.

mod augment;
mod degrade;
mod textures;

pub use augment::{augment, AugmentConfig, Dihedral};
pub use degrade::{synth_lowlight, DegradeConfig, Degradation, GammaPreset};
pub use textures::{bundled_textures, texture, TextureKind};

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::ImageRgb;
use crate::error::{Error, Result};
use crate::fpenv::FlushDenormals;
use crate::graph::Graph;
use crate::model::Model;
use crate::params::{ParamKind, ParamStore, SCALE_FLOOR};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_iters: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// side of the square training crops
    pub patch: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    /// Desk-scale recipe.
    fn default() -> Self {
        Self {
            lr_max: 2e-4,
            lr_min: 1e-6,
            total_iters: 2000,
            batch: 4,
            adam: AdamConfig::default(),
            seed: 0,
            patch: 64,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-length recipe: 150k iterations at batch 8.
    pub fn full_scale() -> Self {
        Self {
            total_iters: 150_000,
            batch: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min.is_finite() && self.lr_max.is_finite() && 0.0 <= self.lr_min && self.lr_min < self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.total_iters == 0 || self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("total_iters, batch and patch must be at least 1".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {:?}", self.adam)));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = T`; later
/// steps stay at `lr_min`.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_iters;
    if t == 0 {
        cfg.lr_max
    } else if t >= total {
        cfg.lr_min
    } else {
        let phase = PI * t as f64 / total as f64;
        cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos())
    }
}

/// First and second moment buffers, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// number of updates applied so far
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.values().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update; `Scale` parameters are floored afterwards.
/// Rejects non-finite gradients before touching any parameter.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::dim("adam_step", &[store.len()], &[grads.len()]));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::dim(
                format!("gradient of {}", store.name(id)),
                store.get(id).shape(),
                g.shape(),
            ));
        }
        if let Some(index) = g.first_non_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", store.name(id)),
                index,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
    let floor = T::lit(SCALE_FLOOR);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let scale = store.kind(id) == ParamKind::Scale;
        let w = store.get_mut(id).data_mut();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((w, m), v), &g) in w.iter_mut().zip(m).zip(v).zip(grads[k].data()) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *w -= step;
            if scale && *w < floor {
                *w = floor;
            }
        }
    }
    Ok(())
}

/// Low-light / clean training pairs of equal extent.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pairs: Vec<(ImageRgb<T>, ImageRgb<T>)>,
}

/// RNG for the `index`-th sample of a run, independent of evaluation order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

impl<T: Scalar> Dataset<T> {
    pub fn new(pairs: Vec<(ImageRgb<T>, ImageRgb<T>)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        for (i, (low, clean)) in pairs.iter().enumerate() {
            if low.tensor().shape() != clean.tensor().shape() {
                return Err(Error::dim(
                    format!("dataset pair {i}"),
                    low.tensor().shape(),
                    clean.tensor().shape(),
                ));
            }
        }
        Ok(Self { pairs })
    }

    /// Degrades every clean image once, with a stream derived from `(seed, index)`.
    pub fn from_clean(images: Vec<ImageRgb<T>>, degrade: &DegradeConfig, seed: u64) -> Result<Self> {
        let pairs = images
            .into_iter()
            .enumerate()
            .map(|(i, clean)| synth_lowlight(&clean, degrade, &mut sample_rng(seed, i as u64)))
            .collect::<Result<_>>()?;
        Self::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(ImageRgb<T>, ImageRgb<T>)] {
        &self.pairs
    }

    /// Random pair, random crop and random augmentation, all drawn from `rng`.
    pub fn draw(&self, patch: usize, aug: AugmentConfig, rng: &mut impl Rng) -> Result<(ImageRgb<T>, ImageRgb<T>)> {
        let (low, clean) = &self.pairs[rng.gen_range(0..self.pairs.len())];
        let (h, w) = (low.height(), low.width());
        if h < patch || w < patch {
            return Err(Error::Config(format!("{h}x{w} image is smaller than the {patch}px patch")));
        }
        let y = rng.gen_range(0..=h - patch);
        let x = rng.gen_range(0..=w - patch);
        let (low, clean) = (low.crop(y, x, patch, patch)?, clean.crop(y, x, patch, patch)?);
        augment((&low, &clean), aug, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// 1-based iteration
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Per-iteration loss trace rendered as `iter,lr,loss` CSV.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iter,lr,loss\n");
    for r in trace {
        let _ = writeln!(out, "{},{:e},{:e}", r.iter, r.lr, r.loss);
    }
    out
}

/// State handed to the observer after every update.
pub struct Progress<'a, T> {
    pub row: TraceRow,
    pub model: &'a Model<T>,
    pub optimizer: &'a AdamState<T>,
}

/// Mean batch loss and batch-averaged parameter gradients for one iteration.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    first_sample: u64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut total = 0.0;
    let mut acc: Vec<Tensor<T>> = model.params.values().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for b in 0..cfg.batch as u64 {
        let mut rng = sample_rng(cfg.seed, first_sample + b);
        let (low, clean) = data.draw(cfg.patch, cfg.augment, &mut rng)?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.constant(low.into_tensor());
        let gt = g.constant(clean.into_tensor());
        let loss = model.loss(&mut g, &p, x, gt)?;
        total += g.value(loss).item()?.to_f64_lossy();
        let grads = g.backward(loss)?;
        for (a, gr) in acc.iter_mut().zip(model.params.collect_grads(&p, &grads)) {
            for (x, &y) in a.data_mut().iter_mut().zip(gr.data()) {
                *x += y;
            }
        }
    }
    let inv = T::one() / T::lit(cfg.batch as f64);
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x = *x * inv);
    }
    Ok((total / cfg.batch as f64, acc))
}

/// Runs `cfg.total_iters` Adam updates on `model` and returns the loss trace.
///
/// The observer runs after every update. A non-finite loss stops training
/// before the update, so the model and any checkpoint the observer wrote stay
/// at the last good iteration.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&Progress<'_, T>) -> Result<()>,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    model.check_input(cfg.patch, cfg.patch)?;
    let _flush = FlushDenormals::enable();
    let mut opt = AdamState::new(&model.params);
    let mut trace = Vec::with_capacity(cfg.total_iters);
    for t in 0..cfg.total_iters {
        let iter = t + 1;
        let lr = cosine_lr(t, cfg);
        let (loss, grads) = batch_gradients(model, data, cfg, (t * cfg.batch) as u64)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iter, loss });
        }
        adam_step(&mut model.params, &grads, &mut opt, lr, &cfg.adam)?;
        let row = TraceRow { iter, lr, loss };
        trace.push(row);
        observer(&Progress {
            row,
            model,
            optimizer: &opt,
        })?;
    }
    Ok(trace)
}
