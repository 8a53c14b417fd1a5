//! Expectation-maximization over a compact basis set.
//!
//! Points `X` (`n × d`) are softly assigned to `K` bases by the E-step
//! `Z = softmax(β · X · basesᵀ)` (row-wise over bases); the M-step replaces
//! every basis by the responsibility-weighted mean of the points. After `t`
//! alternations, `Z · bases` is a rank-`K` reconstruction of `X`.
//!
//! All functions accept either unbatched `[n, d]` / `[K, d]` operands or
//! batched `[B, n, d]` / `[B, K, d]` ones and are differentiable through every
//! iteration.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{l2_normalize, softmax};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Column sums below this mark a basis as dead for one M-step.
pub const DEAD_BASIS_MASS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    /// Number of bases `K`.
    pub num_bases: usize,
    /// E/M alternations `t`.
    pub iterations: usize,
    /// E-step inverse temperature; `None` means `1/sqrt(d)`.
    pub beta: Option<f64>,
    /// L2-normalize bases after every M-step.
    pub normalize_bases: bool,
    /// Weight kept by the stored bases in the cross-batch moving average;
    /// `0` disables the moving-average update.
    pub momentum: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            num_bases: 4,
            iterations: 3,
            beta: None,
            normalize_bases: false,
            momentum: 0.9,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bases == 0 {
            return Err(Error::Config("em.num_bases must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("em.iterations must be >= 1".into()));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("em.beta must be positive, got {b}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "em.momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Inverse temperature for points of dimension `d`.
    pub fn beta_for(&self, d: usize) -> f64 {
        self.beta.unwrap_or(1.0 / (d as f64).sqrt())
    }
}

fn batched<'t, T: Scalar>(v: &Var<'t, T>, what: &str) -> Result<(Var<'t, T>, bool)> {
    match v.shape().len() {
        2 => {
            let s = v.shape();
            Ok((v.reshape(&[1, s[0], s[1]])?, true))
        }
        3 => Ok((v.clone(), false)),
        _ => Err(Error::InvalidShape {
            shape: v.shape().to_vec(),
            reason: format!("{what} must be [n, d] or [batch, n, d]"),
        }),
    }
}

fn unbatch<'t, T: Scalar>(v: Var<'t, T>, squeeze: bool) -> Result<Var<'t, T>> {
    if squeeze {
        let s = v.shape().to_vec();
        v.reshape(&s[1..])
    } else {
        Ok(v)
    }
}

fn check_finite<T: Scalar>(v: &Var<'_, T>, what: &str) -> Result<()> {
    match v.value().first_non_finite() {
        Some(index) => Err(Error::NonFinite {
            what: what.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// Responsibilities `softmax(β · X · basesᵀ)` over the basis axis.
pub fn e_step<'t, T: Scalar>(x: &Var<'t, T>, bases: &Var<'t, T>, beta: f64) -> Result<Var<'t, T>> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    check_finite(x, "e_step points")?;
    check_finite(bases, "e_step bases")?;
    let (xb, squeeze) = batched(x, "points")?;
    let (mb, _) = batched(bases, "bases")?;
    if xb.shape()[0] != mb.shape()[0] || xb.shape()[2] != mb.shape()[2] {
        return Err(Error::shape("e_step", x.shape(), bases.shape()));
    }
    let logits = xb.matmul(&mb.transpose()?)?.scale(beta);
    unbatch(softmax(&logits, 2)?, squeeze)
}

/// Result of one M-step.
pub struct MStep<'t, T: Scalar> {
    pub bases: Var<'t, T>,
    /// Bases whose responsibility mass fell below [`DEAD_BASIS_MASS`]; they
    /// keep their previous value.
    pub dead_bases: usize,
}

/// Responsibility-weighted means `μ_q = Σ_n z_nq x_n / Σ_m z_mq`, optionally
/// L2-normalized. `prev` supplies the value kept by dead bases.
pub fn m_step<'t, T: Scalar>(
    x: &Var<'t, T>,
    z: &Var<'t, T>,
    prev: &Var<'t, T>,
    normalize: bool,
) -> Result<MStep<'t, T>> {
    let (xb, squeeze) = batched(x, "points")?;
    let (zb, _) = batched(z, "responsibilities")?;
    let (pb, _) = batched(prev, "bases")?;
    let (b, n, d) = (xb.shape()[0], xb.shape()[1], xb.shape()[2]);
    let k = zb.shape()[2];
    if zb.shape()[..2] != [b, n] || pb.shape() != [b, k, d] {
        return Err(Error::shape("m_step", x.shape(), z.shape()));
    }
    let xd = xb.value().data();
    let zd = zb.value().data();
    let pd = pb.value().data();
    let dead_mass = T::lit(DEAD_BASIS_MASS);
    let mut mass = vec![T::zero(); b * k];
    let mut out = vec![T::zero(); b * k * d];
    let mut dead_bases = 0;
    for bi in 0..b {
        for ni in 0..n {
            for q in 0..k {
                mass[bi * k + q] += zd[(bi * n + ni) * k + q];
            }
        }
        for ni in 0..n {
            let xrow = &xd[(bi * n + ni) * d..(bi * n + ni + 1) * d];
            for q in 0..k {
                let w = zd[(bi * n + ni) * k + q];
                let orow = &mut out[(bi * k + q) * d..(bi * k + q + 1) * d];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += w * xv;
                }
            }
        }
        for q in 0..k {
            let s = mass[bi * k + q];
            let orow = &mut out[(bi * k + q) * d..(bi * k + q + 1) * d];
            if s < dead_mass {
                dead_bases += 1;
                orow.copy_from_slice(&pd[(bi * k + q) * d..(bi * k + q + 1) * d]);
            } else {
                orow.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
    let means = Tensor::from_parts(vec![b, k, d], out);
    let (xv, zv) = (xb.value_rc(), zb.value_rc());
    let mv = std::rc::Rc::new(means.clone());
    let flops = 4 * (b * n * k * d) as u64;
    let tape = x.tape();
    let bases = tape.record(means, &[&xb, &zb, &pb], flops, move |g, needs| {
        let (gd, xd, zd, md) = (g.data(), xv.data(), zv.data(), mv.data());
        let mut dx = vec![T::zero(); b * n * d];
        let mut dz = vec![T::zero(); b * n * k];
        let mut dp = vec![T::zero(); b * k * d];
        for bi in 0..b {
            for q in 0..k {
                let s = mass[bi * k + q];
                let grow = &gd[(bi * k + q) * d..(bi * k + q + 1) * d];
                if s < dead_mass {
                    dp[(bi * k + q) * d..(bi * k + q + 1) * d].copy_from_slice(grow);
                    continue;
                }
                let mrow = &md[(bi * k + q) * d..(bi * k + q + 1) * d];
                let mg: T = mrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                for ni in 0..n {
                    let xrow = &xd[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                    let w = zd[(bi * n + ni) * k + q] / s;
                    let xg: T = xrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    dz[(bi * n + ni) * k + q] = (xg - mg) / s;
                    for (dxv, &gv) in dx[(bi * n + ni) * d..(bi * n + ni + 1) * d].iter_mut().zip(grow) {
                        *dxv += w * gv;
                    }
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts(vec![b, n, d], dx)),
            needs[1].then(|| Tensor::from_parts(vec![b, n, k], dz)),
            needs[2].then(|| Tensor::from_parts(vec![b, k, d], dp)),
        ]
    });
    let bases = if normalize { l2_normalize(&bases)? } else { bases };
    Ok(MStep {
        bases: unbatch(bases, squeeze)?,
        dead_bases,
    })
}

/// Final state of [`em_iterate`].
pub struct EmOutput<'t, T: Scalar> {
    pub bases: Var<'t, T>,
    pub responsibilities: Var<'t, T>,
    pub dead_bases: usize,
}

impl<'t, T: Scalar> EmOutput<'t, T> {
    /// Low-rank reconstruction `Z · bases`.
    pub fn reconstruct(&self) -> Result<Var<'t, T>> {
        reconstruct(&self.responsibilities, &self.bases)
    }
}

/// `cfg.iterations` alternations of [`e_step`] and [`m_step`].
pub fn em_iterate<'t, T: Scalar>(x: &Var<'t, T>, init_bases: &Var<'t, T>, cfg: &EmConfig) -> Result<EmOutput<'t, T>> {
    cfg.validate()?;
    let d = *x.shape().last().unwrap_or(&1);
    let beta = cfg.beta_for(d);
    let mut bases = init_bases.clone();
    let mut z = None;
    let mut dead_bases = 0;
    for _ in 0..cfg.iterations {
        let zt = e_step(x, &bases, beta)?;
        let m = m_step(x, &zt, &bases, cfg.normalize_bases)?;
        dead_bases += m.dead_bases;
        bases = m.bases;
        z = Some(zt);
    }
    Ok(EmOutput {
        bases,
        responsibilities: z.expect("iterations >= 1"),
        dead_bases,
    })
}

/// `Z · bases`: each point replaced by its responsibility-weighted basis mix.
pub fn reconstruct<'t, T: Scalar>(z: &Var<'t, T>, bases: &Var<'t, T>) -> Result<Var<'t, T>> {
    z.matmul(bases)
}

/// Repeats shared `[K, d]` bases across a batch: `[batch, K, d]`.
pub fn expand_bases<'t, T: Scalar>(bases: &Var<'t, T>, batch: usize) -> Result<Var<'t, T>> {
    let s = bases.shape();
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "shared bases must be [K, d]".into(),
        });
    }
    let (k, d) = (s[0], s[1]);
    bases.reshape(&[1, k, d])?.broadcast_to(&[batch, k, d])
}

/// Plain-tensor EM result.
#[derive(Clone, Debug, PartialEq)]
pub struct EmState<T> {
    pub bases: Tensor<T>,
    pub responsibilities: Tensor<T>,
    pub dead_bases: usize,
}

impl<T: Scalar> EmState<T> {
    /// Runs [`em_iterate`] without recording gradients.
    pub fn run(x: &Tensor<T>, init_bases: &Tensor<T>, cfg: &EmConfig) -> Result<Self> {
        let tape = Tape::inference();
        let out = em_iterate(&tape.constant(x.clone()), &tape.constant(init_bases.clone()), cfg)?;
        Ok(EmState {
            bases: out.bases.value().clone(),
            responsibilities: out.responsibilities.value().clone(),
            dead_bases: out.dead_bases,
        })
    }

    pub fn reconstruct(&self) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let r = reconstruct(
            &tape.constant(self.responsibilities.clone()),
            &tape.constant(self.bases.clone()),
        )?;
        Ok(r.value().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Row-wise softmax of β·x·μᵀ written out directly.
    fn e_step_oracle(x: &Tensor<f64>, mu: &Tensor<f64>, beta: f64) -> Vec<f64> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let k = mu.shape()[0];
        let mut z = vec![0.0; n * k];
        for i in 0..n {
            let logits: Vec<f64> = (0..k)
                .map(|q| beta * (0..d).map(|j| x.data()[i * d + j] * mu.data()[q * d + j]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for q in 0..k {
                z[i * k + q] = (logits[q] - m).exp() / s;
            }
        }
        z
    }

    #[test]
    fn identical_bases_give_uniform_responsibilities() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(randn(&mut rng, &[5, 3]));
        let row = randn(&mut rng, &[1, 3]);
        let mu = tape.constant(Tensor::from_fn(&[4, 3], |i| row.data()[i % 3]));
        let z = e_step(&x, &mu, 1.0).unwrap();
        assert!(z.value().data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn large_beta_approaches_hard_assignment() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[3, 2], &[1.0, 0.1, 0.0, 1.0, -1.0, 0.2]).unwrap());
        let mu = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let z = e_step(&x, &mu, 100.0).unwrap();
        let zd = z.value().data();
        // nearest by inner product: 0, 1, 1
        assert!(zd[0] > 0.99 && zd[3] > 0.99 && zd[5] > 0.99);
    }

    #[test]
    fn e_step_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = randn(&mut rng, &[4, 3]);
        let mu = randn(&mut rng, &[2, 3]);
        let tape = Tape::<f64>::new();
        let z = e_step(&tape.constant(x.clone()), &tape.constant(mu.clone()), 1.0).unwrap();
        let oracle = e_step_oracle(&x, &mu, 1.0);
        for (a, b) in z.value().data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn e_step_rejects_non_finite() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, f64::NAN, 0.0, 0.0]).unwrap());
        let mu = tape.constant(Tensor::ones(&[2, 2]));
        assert!(matches!(e_step(&x, &mu, 1.0), Err(Error::NonFinite { index: 1, .. })));
    }

    #[test]
    fn m_step_reductions() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_f64(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let xv = tape.constant(x.clone());
        let prev = tape.constant(Tensor::zeros(&[2, 2]));
        // one-hot: points 0,2 -> basis 0; 1,3 -> basis 1
        let onehot = tape.constant(Tensor::from_f64(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = m_step(&xv, &onehot, &prev, false).unwrap();
        assert_eq!(m.bases.value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let uniform = tape.constant(Tensor::full(&[4, 2], 0.5));
        let m = m_step(&xv, &uniform, &prev, false).unwrap();
        assert_eq!(m.bases.value().data(), &[4.0, 5.0, 4.0, 5.0]);
    }

    #[test]
    fn m_step_matches_weighted_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[6, 3]);
        let raw: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..1.0)).collect();
        let mut z = vec![0.0; 12];
        for i in 0..6 {
            let s = raw[2 * i] + raw[2 * i + 1];
            z[2 * i] = raw[2 * i] / s;
            z[2 * i + 1] = raw[2 * i + 1] / s;
        }
        let tape = Tape::<f64>::new();
        let m = m_step(
            &tape.constant(x.clone()),
            &tape.constant(Tensor::from_f64(&[6, 2], &z).unwrap()),
            &tape.constant(Tensor::zeros(&[2, 3])),
            false,
        )
        .unwrap();
        for q in 0..2 {
            let mass: f64 = (0..6).map(|i| z[2 * i + q]).sum();
            for j in 0..3 {
                let num: f64 = (0..6).map(|i| z[2 * i + q] * x.data()[i * 3 + j]).sum();
                assert!((m.bases.value().data()[q * 3 + j] - num / mass).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dead_basis_keeps_previous_value() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap());
        let prev = tape.constant(Tensor::from_f64(&[2, 2], &[9.0, 9.0, 0.6, 0.8]).unwrap());
        let m = m_step(&x, &z, &prev, false).unwrap();
        assert_eq!(m.dead_bases, 1);
        assert_eq!(m.bases.value().data(), &[2.0, 3.0, 0.6, 0.8]);
    }

    #[test]
    fn normalized_bases_have_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[10, 4]);
        let init = randn(&mut rng, &[3, 4]);
        let cfg = EmConfig {
            num_bases: 3,
            iterations: 2,
            normalize_bases: true,
            beta: Some(1.0),
            ..EmConfig::default()
        };
        let s = EmState::run(&x, &init, &cfg).unwrap();
        for row in s.bases.data().chunks(4) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        for row in s.responsibilities.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn one_iteration_is_one_e_and_m_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[6, 3]);
        let init = randn(&mut rng, &[2, 3]);
        let cfg = EmConfig {
            num_bases: 2,
            iterations: 1,
            beta: Some(0.7),
            ..EmConfig::default()
        };
        let s = EmState::run(&x, &init, &cfg).unwrap();
        let tape = Tape::<f64>::new();
        let (xv, mv) = (tape.constant(x), tape.constant(init));
        let z = e_step(&xv, &mv, 0.7).unwrap();
        let m = m_step(&xv, &z, &mv, false).unwrap();
        assert_eq!(&s.responsibilities, z.value());
        assert_eq!(&s.bases, m.bases.value());
    }

    #[test]
    fn distinct_points_are_a_fixed_point() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = EmConfig {
            num_bases: 2,
            iterations: 3,
            beta: Some(100.0),
            ..EmConfig::default()
        };
        let s = EmState::run(&x, &x, &cfg).unwrap();
        assert!(s.bases.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn one_hot_reconstruction_selects_rows() {
        let s = EmState {
            bases: Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
            responsibilities: Tensor::from_f64(&[3, 2], &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap(),
            dead_bases: 0,
        };
        assert_eq!(s.reconstruct().unwrap().data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            EmConfig {
                iterations: 0,
                ..EmConfig::default()
            },
            EmConfig {
                num_bases: 0,
                ..EmConfig::default()
            },
            EmConfig {
                beta: Some(0.0),
                ..EmConfig::default()
            },
            EmConfig {
                momentum: 1.0,
                ..EmConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
