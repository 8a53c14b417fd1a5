//! AdamW training on random aligned patches with an SSIM objective.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::blocks::EmTrace;
use crate::error::{Error, Result};
use crate::io::save_checkpoint;
use crate::metrics::{mean_std, psnr_on, ssim_loss, ssim_on, Plane, SsimParams};
use crate::model::{Model, ModelConfig, SPATIAL_DIVISOR};
use crate::params::ParamSet;
use crate::rain::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fraction of manifest pairs, taken from the end, held out for validation.
pub const VAL_FRACTION: f64 = 0.1;

/// Element type used for training arithmetic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from the initial rate to zero over all steps.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the training
    /// pairs (`ceil(pairs / batch_size)`).
    pub steps_per_epoch: Option<usize>,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub seed: u64,
    pub schedule: Schedule,
    /// Random horizontal flips, applied identically to both pair members.
    pub flip: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            patch: 128,
            epochs: 500,
            steps_per_epoch: None,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            seed: 0,
            schedule: Schedule::Constant,
            flip: true,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    /// 50 epochs of 4 steps on 32×32 patches.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            patch: 32,
            epochs: 50,
            steps_per_epoch: Some(4),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(SPATIAL_DIVISOR) {
            return Err(Error::Indivisible {
                what: "train.patch".into(),
                extent: self.patch,
                divisor: SPATIAL_DIVISOR,
            });
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("train.steps_per_epoch must be >= 1".into()));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config(
                "train.weight_decay must be >= 0 and train.eps > 0".into(),
            ));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("train.betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// AdamW moments.
#[derive(Clone, Debug)]
pub struct OptState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let mut m = ParamSet::new();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape())).expect("names are unique");
        }
        OptState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    state: &mut OptState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for name in params.names() {
        if grads.get(name).is_none() {
            return Err(Error::MissingGradient(name.to_string()));
        }
    }
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let (inv_c1, inv_c2) = (T::lit(1.0 / c1), T::lit(1.0 / c2));
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let m = state.m.get_mut(name)?;
        let v = state.v.get_mut(name)?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1t * *mv + one_b1 * gv;
            *vv = b2t * *vv + one_b2 * gv * gv;
            let mhat = *mv * inv_c1;
            let vhat = *vv * inv_c2;
            *pv = *pv * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Moves every traced basis toward its batch-final value:
/// `μ ← m·μ + (1 − m)·mean_final`. `momentum == 0` leaves bases to the
/// optimizer alone.
pub fn apply_basis_momentum<T: Scalar>(params: &mut ParamSet<T>, trace: &[EmTrace<T>], momentum: f64) -> Result<()> {
    if momentum == 0.0 {
        return Ok(());
    }
    let (keep, take) = (T::lit(momentum), T::lit(1.0 - momentum));
    for t in trace {
        let p = params.get_mut(&t.basis)?;
        if p.shape() != t.mean_final.shape() {
            return Err(Error::shape("basis momentum", p.shape(), t.mean_final.shape()));
        }
        for (a, &b) in p.data_mut().iter_mut().zip(t.mean_final.data()) {
            *a = keep * *a + take * b;
        }
    }
    Ok(())
}

/// Crops `batch` aligned `patch × patch` windows from random pairs.
/// Returns `(rainy, clean)` batches of shape `batch×3×patch×patch`.
pub fn sample_patches<T: Scalar>(
    pairs: &[(Tensor<T>, Tensor<T>)],
    patch: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
    flip: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    for (r, c) in pairs {
        if r.shape() != c.shape() || r.rank() != 3 {
            return Err(Error::shape("sample_patches", r.shape(), c.shape()));
        }
        if r.shape()[1] < patch || r.shape()[2] < patch {
            return Err(Error::InvalidShape {
                shape: r.shape().to_vec(),
                reason: format!("image smaller than the {patch}×{patch} patch"),
            });
        }
    }
    let per = 3 * patch * patch;
    let mut rainy = Vec::with_capacity(batch * per);
    let mut clean = Vec::with_capacity(batch * per);
    for _ in 0..batch {
        let (r, c) = &pairs[rng.random_range(0..pairs.len())];
        let (h, w) = (r.shape()[1], r.shape()[2]);
        let y0 = rng.random_range(0..=h - patch);
        let x0 = rng.random_range(0..=w - patch);
        let mirror = flip && rng.random_bool(0.5);
        for (src, dst) in [(r, &mut rainy), (c, &mut clean)] {
            let d = src.data();
            for ch in 0..3 {
                for y in 0..patch {
                    let row = (ch * h + y0 + y) * w + x0;
                    for x in 0..patch {
                        let xx = if mirror { patch - 1 - x } else { x };
                        dst.push(d[row + xx]);
                    }
                }
            }
        }
    }
    let shape = vec![batch, 3, patch, patch];
    Ok((Tensor::new(shape.clone(), rainy)?, Tensor::new(shape, clean)?))
}

/// Per-epoch log row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_psnr_y: f64,
    pub val_ssim_y: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// `1 − SSIM` over all full training images before the first step.
    pub initial_loss: f64,
    /// Same quantity after the last step.
    pub final_loss: f64,
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    /// Validation PSNR (Y) of the rainy inputs themselves.
    pub val_baseline_psnr_y: f64,
    pub best_val_psnr_y: f64,
    pub best_epoch: Option<usize>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    /// Dead bases summed over all training forward passes.
    pub dead_bases: usize,
}

impl TrainReport {
    pub fn final_val_psnr_y(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.val_psnr_y)
    }

    /// Header plus one row per epoch.
    pub fn csv(&self) -> String {
        let mut s = String::from("epoch,ssim_loss,val_psnr_y,val_ssim_y\n");
        for e in &self.epochs {
            writeln!(s, "{},{},{},{}", e.epoch, e.mean_loss, e.val_psnr_y, e.val_ssim_y).unwrap();
        }
        s
    }
}

/// Result of [`train`]; models are widened to `f64` regardless of the
/// training precision.
pub struct Trained {
    pub final_model: Model<f64>,
    pub best_model: Model<f64>,
    pub report: TrainReport,
}

/// Splits pairs into training and held-out validation (the last 10%).
pub fn split_pairs<P>(pairs: &[P]) -> (&[P], &[P]) {
    let n = pairs.len();
    let val = if n >= 2 {
        ((n as f64 * VAL_FRACTION).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    pairs.split_at(n - val)
}

fn stack<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for t in images {
        if t.shape() != shape {
            return Err(Error::shape("stack", &shape, t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

const EVAL_CHUNK: usize = 4;

/// Mean `1 − SSIM` of unclamped model outputs over whole images.
pub fn dataset_loss<T: Scalar>(model: &Model<T>, pairs: &[(Tensor<T>, Tensor<T>)], p: &SsimParams) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let rainy: Vec<_> = chunk.iter().map(|(r, _)| r).collect();
        let clean: Vec<_> = chunk.iter().map(|(_, c)| c).collect();
        let tape = Tape::inference();
        let x = tape.constant(stack(&rainy)?);
        let out = model.forward(&tape, &x, false)?.output;
        let loss = ssim_loss(&out, &tape.constant(stack(&clean)?), p)?;
        total += loss.value().data()[0].as_f64() * chunk.len() as f64;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Mean Y-channel PSNR and SSIM of clamped outputs against clean images.
pub fn validate<T: Scalar>(model: &Model<T>, pairs: &[(Tensor<T>, Tensor<T>)], p: &SsimParams) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut psnrs = Vec::with_capacity(pairs.len());
    let mut ssims = Vec::with_capacity(pairs.len());
    for (r, c) in pairs {
        let shape = r.shape();
        let out = model.infer(&r.reshape(&[1, shape[0], shape[1], shape[2]])?)?;
        let out = out.reshape(shape)?.cast::<f64>();
        let c = c.cast::<f64>();
        psnrs.push(psnr_on(&out, &c, p.data_range, Plane::Y)?);
        ssims.push(ssim_on(&out, &c, p, Plane::Y)?);
    }
    Ok((mean_std(&psnrs).0, mean_std(&ssims).0))
}

/// Trains from seed `cfg.seed` on `pairs` (`3×H×W` images in `[0, 1]`).
/// With `out_dir`, writes `log.csv`, `best.emrf` and `final.emrf` there.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pairs: &[(Tensor<f64>, Tensor<f64>)],
    metrics: &SsimParams,
    out_dir: Option<&Path>,
) -> Result<Trained> {
    match cfg.precision {
        Precision::F64 => train_as::<f64>(model_cfg, cfg, pairs, metrics, out_dir),
        Precision::F32 => train_as::<f32>(model_cfg, cfg, pairs, metrics, out_dir),
    }
}

fn train_as<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pairs: &[(Tensor<f64>, Tensor<f64>)],
    metrics: &SsimParams,
    out_dir: Option<&Path>,
) -> Result<Trained> {
    cfg.validate()?;
    metrics.validate()?;
    let pairs: Vec<(Tensor<T>, Tensor<T>)> = pairs.iter().map(|(r, c)| (r.cast(), c.cast())).collect();
    let (train_set, val_set) = split_pairs(&pairs);
    if train_set.is_empty() {
        return Err(Error::Config("dataset has no training pairs".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut model = Model::<T>::build(model_cfg.clone(), cfg.seed)?;
    let mut opt = OptState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| train_set.len().div_ceil(cfg.batch_size));
    let total = steps * cfg.epochs;

    let val_baseline = if val_set.is_empty() {
        f64::NAN
    } else {
        let v: Vec<f64> = val_set
            .iter()
            .map(|(r, c)| psnr_on(&r.cast::<f64>(), &c.cast::<f64>(), metrics.data_range, Plane::Y))
            .collect::<Result<_>>()?;
        mean_std(&v).0
    };
    let initial_loss = dataset_loss(&model, train_set, metrics)?;
    let mut best = model.clone();
    let mut best_psnr = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut step_losses = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut dead_bases = 0;

    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for batch in 0..steps {
            let (x, y) = sample_patches(train_set, cfg.patch, cfg.batch_size, &mut rng, cfg.flip)?;
            let tape = Tape::new();
            let fp = model.forward(&tape, &tape.constant(x), true)?;
            let loss = ssim_loss(&fp.output, &tape.constant(y), metrics)?;
            let lv = loss.value().data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch,
                    param_norms: model.params.norms(),
                });
            }
            let grads = loss.backward()?;
            let lr = cfg.lr_at(step_losses.len(), total);
            adamw_step(&mut model.params, &grads, &mut opt, lr, cfg)?;
            dead_bases += fp.em_trace.iter().map(|t| t.dead_bases).sum::<usize>();
            apply_basis_momentum(&mut model.params, &fp.em_trace, model_cfg.em.momentum)?;
            step_losses.push(lv);
            sum += lv;
        }
        let (val_psnr_y, val_ssim_y) = validate(&model, val_set, metrics)?;
        if val_psnr_y > best_psnr {
            best_psnr = val_psnr_y;
            best_epoch = Some(epoch);
            best = model.clone();
        }
        epochs.push(EpochLog {
            epoch,
            mean_loss: sum / steps as f64,
            val_psnr_y,
            val_ssim_y,
        });
    }
    if best_epoch.is_none() {
        best = model.clone();
    }
    let final_loss = dataset_loss(&model, train_set, metrics)?;
    let report = TrainReport {
        initial_loss,
        final_loss,
        step_losses,
        epochs,
        val_baseline_psnr_y: val_baseline,
        best_val_psnr_y: if best_epoch.is_some() { best_psnr } else { f64::NAN },
        best_epoch,
        train_pairs: train_set.len(),
        val_pairs: val_set.len(),
        dead_bases,
    };
    if let Some(dir) = out_dir {
        let log = dir.join("log.csv");
        std::fs::write(&log, report.csv()).map_err(|e| Error::io(&log, e))?;
        save_checkpoint(&dir.join("best.emrf"), &best.config, &best.params)?;
        save_checkpoint(&dir.join("final.emrf"), &model.config, &model.params)?;
    }
    let widen = |m: Model<T>| Model {
        config: m.config,
        params: m.params.cast::<f64>(),
    };
    Ok(Trained {
        final_model: widen(model),
        best_model: widen(best),
        report,
    })
}
