//! Image quality metrics and the SSIM training loss.
//!
//! Images are `C×H×W` or `N×C×H×W` tensors with values on a dynamic range
//! `L` (1 for normalized floats).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{conv2d, ConvKernel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    /// Side of the Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L`.
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Config("metrics.window must be odd".into()));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.data_range > 0.0) {
            return Err(Error::Config(
                "metrics.sigma, k1, k2 and data_range must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(δ1, δ2) = ((k1·L)², (k2·L)²)`.
    pub fn stabilizers(&self) -> (f64, f64) {
        ((self.k1 * self.data_range).powi(2), (self.k2 * self.data_range).powi(2))
    }

    /// Normalized separable Gaussian window, row-major `window × window`.
    pub fn gaussian_window(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        let mut w = Vec::with_capacity(self.window * self.window);
        for a in &g {
            for b in &g {
                w.push(a * b / (s * s));
            }
        }
        w
    }
}

fn as_batch<'t, T: Scalar>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    match *x.shape() {
        [c, h, w] => x.reshape(&[1, c, h, w]),
        [_, _, _, _] => Ok(x.clone()),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "image must be C×H×W or N×C×H×W".into(),
        }),
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

/// Luma plane of 3-channel images; the channel axis is kept with extent 1.
pub fn rgb_to_y_var<'t, T: Scalar>(img: &Var<'t, T>) -> Result<Var<'t, T>> {
    let x = as_batch(img)?;
    if x.shape()[1] != 3 {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: "luma conversion needs 3 channels".into(),
        });
    }
    let mut y = x.narrow(1, 0, 1)?.scale(LUMA[0]);
    for (c, &wt) in LUMA.iter().enumerate().skip(1) {
        y = y.add(&x.narrow(1, c, 1)?.scale(wt))?;
    }
    if img.shape().len() == 3 {
        let s = y.shape().to_vec();
        y = y.reshape(&s[1..])?;
    }
    Ok(y)
}

pub fn rgb_to_y<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(rgb_to_y_var(&tape.constant(img.clone()))?.value().clone())
}

/// Mean of the SSIM map over all windows, channels and images.
pub fn ssim_var<'t, T: Scalar>(a: &Var<'t, T>, b: &Var<'t, T>, p: &SsimParams) -> Result<Var<'t, T>> {
    p.validate()?;
    same_shape("ssim", a.shape(), b.shape())?;
    let (x, y) = (as_batch(a)?, as_batch(b)?);
    let [_, c, h, w] = *x.shape() else { unreachable!() };
    if h < p.window || w < p.window {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: format!("image smaller than the {}×{} SSIM window", p.window, p.window),
        });
    }
    let tape = a.tape();
    let win = p.gaussian_window();
    let kernel = Tensor::from_fn(&[c, 1, p.window, p.window], |i| T::lit(win[i % win.len()]));
    let k = ConvKernel::new(tape.constant(kernel), None, 1, 0, c)?;
    let filt = |v: &Var<'t, T>| conv2d(v, &k);
    let (mx, my) = (filt(&x)?, filt(&y)?);
    let (mx2, my2, mxy) = (mx.square(), my.square(), mx.mul(&my)?);
    let sx = filt(&x.square())?.sub(&mx2)?;
    let sy = filt(&y.square())?.sub(&my2)?;
    let sxy = filt(&x.mul(&y)?)?.sub(&mxy)?;
    let (d1, d2) = p.stabilizers();
    let num = mxy.scale(2.0).add_scalar(d1).mul(&sxy.scale(2.0).add_scalar(d2))?;
    let den = mx2.add(&my2)?.add_scalar(d1).mul(&sx.add(&sy)?.add_scalar(d2))?;
    Ok(num.div(&den)?.mean_all())
}

pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, p: &SsimParams) -> Result<f64> {
    let tape = Tape::inference();
    let s = ssim_var(&tape.constant(a.clone()), &tape.constant(b.clone()), p)?;
    Ok(s.value().data()[0].as_f64())
}

/// `1 − SSIM(out, gt)`, differentiable.
pub fn ssim_loss<'t, T: Scalar>(out: &Var<'t, T>, gt: &Var<'t, T>, p: &SsimParams) -> Result<Var<'t, T>> {
    Ok(ssim_var(out, gt, p)?.scale(-1.0).add_scalar(1.0))
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mse", a.shape(), b.shape())?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10·log10(L²/MSE)`; `+∞` for identical images.
pub fn psnr<T: Scalar>(out: &Tensor<T>, gt: &Tensor<T>, data_range: f64) -> Result<f64> {
    let m = mse(out, gt)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

pub fn mae<T: Scalar>(out: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape("mae", out.shape(), gt.shape())?;
    let s: f64 = out
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(s / out.numel() as f64)
}

/// Plane on which PSNR and SSIM are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    Rgb,
    Y,
}

pub fn psnr_on<T: Scalar>(out: &Tensor<T>, gt: &Tensor<T>, data_range: f64, plane: Plane) -> Result<f64> {
    match plane {
        Plane::Rgb => psnr(out, gt, data_range),
        Plane::Y => psnr(&rgb_to_y(out)?, &rgb_to_y(gt)?, data_range),
    }
}

pub fn ssim_on<T: Scalar>(out: &Tensor<T>, gt: &Tensor<T>, p: &SsimParams, plane: Plane) -> Result<f64> {
    match plane {
        Plane::Rgb => ssim(out, gt, p),
        Plane::Y => ssim(&rgb_to_y(out)?, &rgb_to_y(gt)?, p),
    }
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub mae: f64,
    pub psnr_rgb: f64,
    pub ssim_rgb: f64,
}

impl PairMetrics {
    pub fn compute<T: Scalar>(out: &Tensor<T>, gt: &Tensor<T>, p: &SsimParams) -> Result<Self> {
        Ok(PairMetrics {
            psnr_y: psnr_on(out, gt, p.data_range, Plane::Y)?,
            ssim_y: ssim_on(out, gt, p, Plane::Y)?,
            mae: mae(out, gt)?,
            psnr_rgb: psnr_on(out, gt, p.data_range, Plane::Rgb)?,
            ssim_rgb: ssim_on(out, gt, p, Plane::Rgb)?,
        })
    }
}

/// Mean and population standard deviation. Identical entries, infinite
/// ones included, have zero spread; otherwise infinite entries propagate.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    /// Direct per-window evaluation, one channel at a time.
    fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>, p: &SsimParams) -> f64 {
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let win = p.gaussian_window();
        let n = p.window;
        let (d1, d2) = p.stabilizers();
        let mut total = 0.0;
        let mut count = 0.0;
        for ch in 0..c {
            let at = |img: &Tensor<f64>, y: usize, x: usize| img.data()[(ch * h + y) * w + x];
            for y0 in 0..=h - n {
                for x0 in 0..=w - n {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..n {
                        for dx in 0..n {
                            let g = win[dy * n + dx];
                            let (u, v) = (at(a, y0 + dy, x0 + dx), at(b, y0 + dy, x0 + dx));
                            ma += g * u;
                            mb += g * v;
                            saa += g * u * u;
                            sbb += g * v * v;
                            sab += g * u * v;
                        }
                    }
                    let (va, vb, cab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    total += (2.0 * ma * mb + d1) * (2.0 * cab + d2) / ((ma * ma + mb * mb + d1) * (va + vb + d2));
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn luma_of_primaries() {
        let px = |r, g, b| Tensor::<f64>::from_f64(&[3, 1, 1], &[r, g, b]).unwrap();
        assert!((rgb_to_y(&px(1.0, 1.0, 1.0)).unwrap().data()[0] - 1.0).abs() < 1e-15);
        assert!((rgb_to_y(&px(0.0, 1.0, 0.0)).unwrap().data()[0] - 0.587).abs() < 1e-15);
        assert!((rgb_to_y(&px(0.3, 0.3, 0.3)).unwrap().data()[0] - 0.3).abs() < 1e-15);
        assert!(rgb_to_y(&Tensor::<f64>::zeros(&[2, 1, 1])).is_err());
    }

    #[test]
    fn psnr_offset_sixteen() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 100.0);
        let b = Tensor::<f64>::full(&[3, 4, 4], 116.0);
        let expected = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((psnr(&a, &b, 255.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 24.0483).abs() < 1e-3);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn doubled_noise_costs_six_db() {
        let clean = Tensor::<f64>::full(&[3, 16, 16], 0.5);
        let noise = img(3, &[3, 16, 16]).map(|v| (v - 0.5) * 0.1);
        let a = clean.zip_map(&noise, |c, n| c + n).unwrap();
        let b = clean.zip_map(&noise, |c, n| c + 2.0 * n).unwrap();
        let drop = psnr(&a, &clean, 1.0).unwrap() - psnr(&b, &clean, 1.0).unwrap();
        assert!((drop - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let p = SsimParams::default();
        let a = img(1, &[3, 16, 16]);
        let b = img(2, &[3, 16, 16]).zip_map(&a, |n, v| 0.7 * v + 0.3 * n).unwrap();
        assert!((ssim(&a, &b, &p).unwrap() - ssim_oracle(&a, &b, &p)).abs() < 1e-8);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let p = SsimParams::default();
        let (a, b) = (img(4, &[3, 12, 13]), img(5, &[3, 12, 13]));
        assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = img(0, &[3, 10, 16]);
        assert!(ssim(&a, &a, &SsimParams::default()).is_err());
    }

    #[test]
    fn mae_cases() {
        let a = img(6, &[3, 5, 5]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.25);
        assert!((mae(&a, &b).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gray_images_agree_across_planes() {
        let p = SsimParams::default();
        let gray = |seed| {
            let g = img(seed, &[1, 12, 12]);
            Tensor::from_fn(&[3, 12, 12], |i| g.data()[i % 144])
        };
        let (a, b) = (gray(7), gray(8));
        let dp = psnr_on(&a, &b, 1.0, Plane::Y).unwrap() - psnr_on(&a, &b, 1.0, Plane::Rgb).unwrap();
        let ds = ssim_on(&a, &b, &p, Plane::Y).unwrap() - ssim_on(&a, &b, &p, Plane::Rgb).unwrap();
        assert!(dp.abs() < 1e-9 && ds.abs() < 1e-9);
    }

    #[test]
    fn loss_is_zero_for_equal_batches() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(img(9, &[2, 3, 12, 12]));
        let l = ssim_loss(&a, &a, &SsimParams::default()).unwrap();
        assert!(l.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[f64::INFINITY]).0, f64::INFINITY);
        assert_eq!(mean_std(&[f64::INFINITY, f64::INFINITY]), (f64::INFINITY, 0.0));
        assert!(mean_std(&[f64::INFINITY, 1.0]).1.is_nan());
    }
}
