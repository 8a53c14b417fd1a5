//! The full gradient-check suite: every differentiable primitive, the EM
//! steps, each block and the whole network, all in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, grad_check_params, GradCheckReport};
use crate::autodiff::Var;
use crate::blocks::{
    emb_forward, emb_params, ioab_forward, ioab_params, iofn_forward, iofn_params, lmb_forward, lmb_params,
    lmrb_forward, lmrb_params, BlockCtx, LmbMode, LmrbConfig,
};
use crate::em::{e_step, em_iterate, m_step, reconstruct, EmConfig};
use crate::error::Result;
use crate::metrics::{rgb_to_y_var, ssim_loss, ssim_var, SsimParams};
use crate::model::{forward, Model, ModelConfig};
use crate::nn::{
    conv2d, depth_to_space, directional_avg_pool, l2_normalize, layer_norm, softmax, space_to_depth, ConvKernel,
    Direction,
};
use crate::ops::concat;
use crate::params::{Bound, ParamBuilder, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub step: f64,
    pub tol: f64,
    /// Sampled elements per parameter tensor in block and model checks.
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            step: 1e-5,
            tol: 1e-4,
            per_tensor: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Location of the largest error, e.g. `x[17]` or `enc1.0.ioab.qkv.w[3]`.
    pub worst: Option<String>,
}

/// Weighted sum with fixed, sign-varying weights, so that invariants such
/// as softmax rows summing to one do not hide gradient errors.
fn probe<'t>(y: &Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = Tensor::from_fn(y.shape(), |i| {
        ((i as f64 + 1.0) * 0.618_033_988_749_895).fract() * 2.0 - 1.0
    });
    Ok(y.mul(&y.tape().constant(w))?.sum_all())
}

struct Suite {
    rng: ChaCha8Rng,
    opts: SuiteOptions,
    cases: Vec<SuiteCase>,
}

impl Suite {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn push(&mut self, name: String, reports: &[(String, GradCheckReport)]) {
        let checked = reports.iter().map(|(_, r)| r.indices.len()).sum();
        let worst = reports
            .iter()
            .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
            .and_then(|(label, r)| r.worst_index().map(|i| format!("{label}[{i}]")));
        self.cases.push(SuiteCase {
            name,
            checked,
            max_rel_error: reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max),
            passed: reports.iter().all(|(_, r)| r.passed),
            worst,
        });
    }

    /// Checks `f` with respect to each input in turn, the others held fixed.
    fn check<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        for (i, x) in inputs.iter().enumerate() {
            let report = grad_check(
                |v| {
                    let vars: Vec<Var<'_, f64>> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            if j == i {
                                v.clone()
                            } else {
                                v.tape().constant(t.clone())
                            }
                        })
                        .collect();
                    probe(&f(&vars)?)
                },
                x,
                self.opts.step,
                self.opts.tol,
            )?;
            let label = if inputs.len() == 1 {
                name.to_string()
            } else {
                format!("{name}/arg{i}")
            };
            self.push(label, &[("x".into(), report)]);
        }
        Ok(())
    }

    /// Checks a block against its input (all elements) and its parameters
    /// (sampled).
    fn block<F>(
        &mut self,
        name: &str,
        params: &ParamSet<f64>,
        x: &Tensor<f64>,
        em: &EmConfig,
        lmrb: &LmrbConfig,
        f: F,
    ) -> Result<()>
    where
        F: for<'a, 't> Fn(&Var<'t, f64>, &BlockCtx<'a, 't, f64>) -> Result<Var<'t, f64>>,
    {
        let report = grad_check(
            |v| {
                let bound = Bound::bind(v.tape(), params, false)?;
                probe(&f(v, &BlockCtx::new(&bound, em, lmrb))?)
            },
            x,
            self.opts.step,
            self.opts.tol,
        )?;
        self.push(format!("{name}/input"), &[("x".into(), report)]);
        let reports = grad_check_params(
            params,
            |b| {
                let v = b.tape().constant(x.clone());
                probe(&f(&v, &BlockCtx::new(b, em, lmrb))?)
            },
            self.opts.per_tensor,
            self.rng.random(),
            self.opts.step,
            self.opts.tol,
        )?;
        self.push(format!("{name}/params"), &reports);
        Ok(())
    }

    /// Moves every parameter off its initial value, so unit gains and zero
    /// biases do not mask errors.
    fn jitter(&mut self, params: &mut ParamSet<f64>, amount: f64) {
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += self.rng.random_range(-amount..amount);
            }
        }
    }
}

fn primitives(s: &mut Suite) -> Result<()> {
    let a = s.uniform(&[2, 3, 4], -1.0, 1.0);
    let b = s.uniform(&[2, 3, 4], -1.0, 1.0);
    let pos = s.uniform(&[2, 3, 4], 0.5, 1.5);
    s.check("add", &[a.clone(), b.clone()], |v| v[0].add(&v[1]))?;
    s.check("sub", &[a.clone(), b.clone()], |v| v[0].sub(&v[1]))?;
    s.check("mul", &[a.clone(), b.clone()], |v| v[0].mul(&v[1]))?;
    s.check("div", &[a.clone(), pos], |v| v[0].div(&v[1]))?;
    s.check("add_scalar", std::slice::from_ref(&a), |v| Ok(v[0].add_scalar(0.3)))?;
    s.check("scale", std::slice::from_ref(&a), |v| Ok(v[0].scale(-1.7)))?;
    s.check("clamp", std::slice::from_ref(&a), |v| Ok(v[0].clamp(-0.5, 0.5)))?;
    s.check("square", std::slice::from_ref(&a), |v| Ok(v[0].square()))?;

    let m = s.uniform(&[3, 4], -1.0, 1.0);
    let n = s.uniform(&[4, 2], -1.0, 1.0);
    s.check("matmul", &[m, n], |v| v[0].matmul(&v[1]))?;
    let c = s.uniform(&[2, 4, 5], -1.0, 1.0);
    s.check("matmul_batched", &[a.clone(), c], |v| v[0].matmul(&v[1]))?;
    s.check("transpose", std::slice::from_ref(&a), |v| v[0].transpose())?;
    s.check("reshape", std::slice::from_ref(&a), |v| v[0].reshape(&[6, 4]))?;
    let row = s.uniform(&[2, 1, 4], -1.0, 1.0);
    s.check("broadcast_to", &[row], |v| v[0].broadcast_to(&[2, 3, 4]))?;
    s.check("sum", std::slice::from_ref(&a), |v| v[0].sum(&[0, 2], false))?;
    s.check("mean", std::slice::from_ref(&a), |v| v[0].mean(&[1], true))?;
    s.check("max", std::slice::from_ref(&a), |v| v[0].max(&[2], false))?;
    s.check("sum_all", std::slice::from_ref(&a), |v| Ok(v[0].sum_all().scale(0.5)))?;
    s.check("mean_all", std::slice::from_ref(&a), |v| Ok(v[0].mean_all().square()))?;
    s.check("narrow", std::slice::from_ref(&a), |v| v[0].narrow(2, 1, 2))?;
    s.check("concat", &[a.clone(), b], |v| concat(&[&v[0], &v[1], &v[0]], 1))?;
    Ok(())
}

fn layers(s: &mut Suite) -> Result<()> {
    let x = s.uniform(&[2, 4, 5, 6], -1.0, 1.0);
    let w3 = s.uniform(&[3, 4, 3, 3], -0.5, 0.5);
    let bias = s.uniform(&[3], -0.5, 0.5);
    s.check("conv3x3", &[x.clone(), w3, bias.clone()], |v| {
        conv2d(&v[0], &ConvKernel::same(v[1].clone(), Some(v[2].clone()), 1)?)
    })?;
    let wg = s.uniform(&[4, 2, 3, 3], -0.5, 0.5);
    s.check("conv_strided_grouped", &[x.clone(), wg], |v| {
        conv2d(&v[0], &ConvKernel::new(v[1].clone(), None, 2, 1, 2)?)
    })?;
    let wd = s.uniform(&[4, 1, 3, 3], -0.5, 0.5);
    s.check("conv_depthwise", &[x.clone(), wd], |v| {
        conv2d(&v[0], &ConvKernel::same(v[1].clone(), None, 4)?)
    })?;
    let w1 = s.uniform(&[3, 4, 1, 1], -0.5, 0.5);
    s.check("conv1x1", &[x.clone(), w1, bias], |v| {
        conv2d(&v[0], &ConvKernel::same(v[1].clone(), Some(v[2].clone()), 1)?)
    })?;
    let g = s.uniform(&[4], 0.5, 1.5);
    let off = s.uniform(&[4], -0.5, 0.5);
    s.check("layer_norm", &[x.clone(), g, off], |v| {
        layer_norm(&v[0], &v[1], &v[2], 1e-5)
    })?;
    s.check("softmax_last", std::slice::from_ref(&x), |v| softmax(&v[0], 3))?;
    s.check("softmax_channel", std::slice::from_ref(&x), |v| softmax(&v[0], 1))?;
    s.check("relu", std::slice::from_ref(&x), |v| Ok(v[0].relu()))?;
    s.check("sigmoid", std::slice::from_ref(&x), |v| Ok(v[0].sigmoid()))?;
    s.check("gelu", std::slice::from_ref(&x), |v| Ok(v[0].gelu()))?;
    s.check("avg_pool_vertical", std::slice::from_ref(&x), |v| {
        directional_avg_pool(&v[0], Direction::Vertical)
    })?;
    s.check("avg_pool_horizontal", std::slice::from_ref(&x), |v| {
        directional_avg_pool(&v[0], Direction::Horizontal)
    })?;
    let even = s.uniform(&[1, 2, 4, 6], -1.0, 1.0);
    s.check("space_to_depth", &[even], |v| space_to_depth(&v[0]))?;
    let deep = s.uniform(&[1, 8, 2, 3], -1.0, 1.0);
    s.check("depth_to_space", &[deep], |v| depth_to_space(&v[0]))?;
    let rows = s.uniform(&[3, 5], -1.0, 1.0);
    s.check("l2_normalize", &[rows], |v| l2_normalize(&v[0]))?;
    Ok(())
}

fn expectation_maximization(s: &mut Suite) -> Result<()> {
    let x = s.uniform(&[2, 6, 3], -1.0, 1.0);
    let mu = s.uniform(&[2, 4, 3], -1.0, 1.0);
    let z = s.uniform(&[2, 6, 4], 0.1, 1.0);
    s.check("e_step", &[x.clone(), mu.clone()], |v| e_step(&v[0], &v[1], 0.8))?;
    for normalize in [false, true] {
        let tag = if normalize { "normalized" } else { "plain" };
        s.check(
            &format!("m_step_{tag}"),
            &[x.clone(), z.clone(), mu.clone()],
            move |v| Ok(m_step(&v[0], &v[1], &v[2], normalize)?.bases),
        )?;
        for iterations in 1..=3 {
            let cfg = EmConfig {
                iterations,
                normalize_bases: normalize,
                ..EmConfig::default()
            };
            s.check(&format!("em_t{iterations}_{tag}"), &[x.clone(), mu.clone()], move |v| {
                em_iterate(&v[0], &v[1], &cfg)?.reconstruct()
            })?;
        }
    }
    s.check("reconstruct", &[z, mu], |v| reconstruct(&v[0], &v[1]))?;
    Ok(())
}

fn metrics(s: &mut Suite) -> Result<()> {
    let a = s.uniform(&[1, 3, 13, 14], 0.0, 1.0);
    let b = s.uniform(&[1, 3, 13, 14], 0.0, 1.0);
    let p = SsimParams::default();
    s.check("rgb_to_y", std::slice::from_ref(&a), |v| rgb_to_y_var(&v[0]))?;
    s.check("ssim", &[a.clone(), b.clone()], |v| ssim_var(&v[0], &v[1], &p))?;
    s.check("ssim_loss_y", &[a, b], |v| {
        ssim_loss(&rgb_to_y_var(&v[0])?, &rgb_to_y_var(&v[1])?, &p)
    })?;
    Ok(())
}

fn blocks(s: &mut Suite) -> Result<()> {
    let (c, heads, hidden) = (4, 2, 6);
    let em = EmConfig {
        iterations: 2,
        ..EmConfig::default()
    };
    let x = s.uniform(&[2, c, 4, 4], -1.0, 1.0);

    let mut b = ParamBuilder::new(s.rng.random());
    ioab_params(&mut b, "a", c, heads, em.num_bases)?;
    let mut p = b.finish();
    s.jitter(&mut p, 0.1);
    s.block("ioab", &p, &x, &em, &LmrbConfig::default(), |x, ctx| {
        ioab_forward(x, ctx, "a", heads)
    })?;

    let mut b = ParamBuilder::new(s.rng.random());
    iofn_params(&mut b, "f", c, hidden, em.num_bases)?;
    let mut p = b.finish();
    s.jitter(&mut p, 0.1);
    s.block("iofn", &p, &x, &em, &LmrbConfig::default(), |x, ctx| {
        iofn_forward(x, ctx, "f")
    })?;

    let mut b = ParamBuilder::new(s.rng.random());
    emb_params(&mut b, "e", c, heads, &em, 1.5)?;
    let mut p = b.finish();
    s.jitter(&mut p, 0.1);
    s.block("emb", &p, &x, &em, &LmrbConfig::default(), |x, ctx| {
        emb_forward(x, ctx, "e", heads)
    })?;

    for mode in [LmbMode::TwoStream, LmbMode::SingleStream] {
        let cfg = LmrbConfig {
            mode,
            reduction: 2,
            ..LmrbConfig::default()
        };
        let mut b = ParamBuilder::new(s.rng.random());
        lmb_params(&mut b, "l", c, &cfg)?;
        let mut p = b.finish();
        s.jitter(&mut p, 0.1);
        let name = match mode {
            LmbMode::TwoStream => "lmb_two_stream",
            LmbMode::SingleStream => "lmb_single_stream",
        };
        s.block(name, &p, &x, &em, &cfg, |x, ctx| lmb_forward(x, ctx, "l"))?;
    }

    let cfg = LmrbConfig {
        reduction: 2,
        ..LmrbConfig::default()
    };
    let mut b = ParamBuilder::new(s.rng.random());
    lmrb_params(&mut b, "r", c, &cfg)?;
    let mut p = b.finish();
    s.jitter(&mut p, 0.1);
    s.block("lmrb", &p, &x, &em, &cfg, |x, ctx| lmrb_forward(x, ctx, "r"))?;
    Ok(())
}

/// The desk network with two EM iterations on a `1×3×8×8` input. The zero
/// output conv is replaced by random weights so upstream gradients are not
/// trivially zero.
fn network(s: &mut Suite) -> Result<()> {
    let mut cfg = ModelConfig::desk();
    cfg.em.iterations = 2;
    let mut model = Model::<f64>::build(cfg.clone(), s.rng.random())?;
    s.jitter(&mut model.params, 0.05);
    for name in ["final.w", "final.b"] {
        let shape = model.params.get(name)?.shape().to_vec();
        *model.params.get_mut(name)? = s.uniform(&shape, -0.2, 0.2);
    }
    let x = s.uniform(&[1, 3, 8, 8], 0.0, 1.0);
    let (em, lmrb) = (cfg.em.clone(), cfg.lmrb.clone());
    s.block("model", &model.params, &x, &em, &lmrb, |x, ctx| forward(&cfg, ctx, x))?;
    Ok(())
}

/// Runs every case; a failing case is reported, not returned as an error.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<SuiteCase>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        opts: opts.clone(),
        cases: Vec::new(),
    };
    primitives(&mut s)?;
    layers(&mut s)?;
    expectation_maximization(&mut s)?;
    metrics(&mut s)?;
    blocks(&mut s)?;
    network(&mut s)?;
    Ok(s.cases)
}
