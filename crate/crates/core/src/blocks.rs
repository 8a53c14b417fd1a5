//! The network's composite blocks.
//!
//! * IOAB: channel attention whose per-head `d × d` score matrix is replaced
//!   by its EM reconstruction before weighting the values.
//! * IOFN: gated depthwise feedforward whose gate map is EM-reconstructed
//!   over spatial positions.
//! * EMB: IOAB followed by IOFN, each with its own residual.
//! * LMB: directional pooled attention; LMRB cascades it behind 1×1 convs.
//!
//! Parameters are looked up by hierarchical name under a block prefix, so a
//! block is fully described by `(prefix, ParamSet)`.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::em::{em_iterate, expand_bases, EmConfig};
use crate::error::{Error, Result};
use crate::nn::{conv2d, directional_avg_pool, l2_normalize, layer_norm, ConvKernel, Direction};
use crate::params::{join, Bound, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Pooling layout of the local model block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmbMode {
    /// Separate vertical and horizontal pooled streams.
    #[default]
    TwoStream,
    /// One globally pooled stream.
    SingleStream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmrbConfig {
    /// Number of `conv → relu → LMB` repetitions.
    pub cascades: usize,
    /// Bottleneck reduction ratio inside the LMB.
    pub reduction: usize,
    pub mode: LmbMode,
}

impl Default for LmrbConfig {
    fn default() -> Self {
        LmrbConfig {
            cascades: 2,
            reduction: 4,
            mode: LmbMode::TwoStream,
        }
    }
}

impl LmrbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cascades == 0 {
            return Err(Error::Config("lmrb.cascades must be >= 1".into()));
        }
        if self.reduction == 0 {
            return Err(Error::Config("lmrb.reduction must be >= 1".into()));
        }
        Ok(())
    }

    /// Bottleneck width for `channels` input channels.
    pub fn mid_channels(&self, channels: usize) -> usize {
        (channels / self.reduction).max(1)
    }
}

/// Final bases of one EM run, averaged over the batch (and heads).
#[derive(Clone, Debug)]
pub struct EmTrace<T> {
    /// Name of the stored basis parameter.
    pub basis: String,
    pub mean_final: Tensor<T>,
    pub dead_bases: usize,
}

/// Everything a block needs besides its input.
pub struct BlockCtx<'a, 't, T: Scalar> {
    pub params: &'a Bound<'t, T>,
    pub em: &'a EmConfig,
    pub lmrb: &'a LmrbConfig,
    trace: RefCell<Vec<EmTrace<T>>>,
}

impl<'a, 't, T: Scalar> BlockCtx<'a, 't, T> {
    pub fn new(params: &'a Bound<'t, T>, em: &'a EmConfig, lmrb: &'a LmrbConfig) -> Self {
        BlockCtx {
            params,
            em,
            lmrb,
            trace: RefCell::new(Vec::new()),
        }
    }

    pub fn p(&self, prefix: &str, name: &str) -> Result<&'a Var<'t, T>> {
        self.params.get(&join(prefix, name))
    }

    /// Stride-1 same-padded conv `prefix.w` (+ `prefix.b` when present).
    pub fn conv(&self, prefix: &str, x: &Var<'t, T>, groups: usize) -> Result<Var<'t, T>> {
        let w = self.p(prefix, "w")?.clone();
        let b = self.params.get(&join(prefix, "b")).ok().cloned();
        conv2d(x, &ConvKernel::same(w, b, groups)?)
    }

    pub fn layer_norm(&self, prefix: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        layer_norm(x, self.p(prefix, "g")?, self.p(prefix, "b")?, LN_EPS)
    }

    /// EM runs recorded so far, in execution order.
    pub fn take_trace(&self) -> Vec<EmTrace<T>> {
        std::mem::take(&mut self.trace.borrow_mut())
    }

    fn record(&self, basis: String, final_bases: &Var<'t, T>, dead_bases: usize) -> Result<()> {
        let s = final_bases.shape();
        let (k, d) = (s[s.len() - 2], s[s.len() - 1]);
        let mean = final_bases.value().reshape(&[s[0], k * d])?;
        let b = s[0];
        let mut acc = vec![T::zero(); k * d];
        for row in mean.data().chunks(k * d) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let inv = T::lit(1.0 / b as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        self.trace.borrow_mut().push(EmTrace {
            basis,
            mean_final: Tensor::new(vec![k, d], acc)?,
            dead_bases,
        });
        Ok(())
    }
}

fn nchw(x: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match *x {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape {
            shape: x.to_vec(),
            reason: format!("{op} needs NCHW"),
        }),
    }
}

/// Hidden width of the feedforward block.
pub fn ffn_hidden(channels: usize, expansion: f64) -> usize {
    ((channels as f64 * expansion).round() as usize).max(1)
}

pub fn ioab_params<T: Scalar>(
    b: &mut ParamBuilder<T>,
    prefix: &str,
    c: usize,
    heads: usize,
    num_bases: usize,
) -> Result<()> {
    check_heads(c, heads)?;
    b.layer_norm(&join(prefix, "ln"), c)?;
    b.conv(&join(prefix, "qkv"), 3 * c, c, 1, false)?;
    b.conv(&join(prefix, "qkv_dw"), 3 * c, 1, 3, false)?;
    b.bases(&join(prefix, "mu"), num_bases, c / heads)?;
    b.conv(&join(prefix, "proj"), c, c, 1, false)
}

pub fn iofn_params<T: Scalar>(
    b: &mut ParamBuilder<T>,
    prefix: &str,
    c: usize,
    hidden: usize,
    num_bases: usize,
) -> Result<()> {
    b.layer_norm(&join(prefix, "ln"), c)?;
    b.conv(&join(prefix, "gate_pw"), hidden, c, 1, false)?;
    b.conv(&join(prefix, "gate_dw"), hidden, 1, 3, false)?;
    b.bases(&join(prefix, "gamma"), num_bases, hidden)?;
    b.conv(&join(prefix, "value_pw"), hidden, c, 1, false)?;
    b.conv(&join(prefix, "value_dw"), hidden, 1, 3, false)?;
    b.conv(&join(prefix, "proj"), c, hidden, 1, false)
}

pub fn emb_params<T: Scalar>(
    b: &mut ParamBuilder<T>,
    prefix: &str,
    c: usize,
    heads: usize,
    em: &EmConfig,
    expansion: f64,
) -> Result<()> {
    ioab_params(b, &join(prefix, "ioab"), c, heads, em.num_bases)?;
    iofn_params(b, &join(prefix, "iofn"), c, ffn_hidden(c, expansion), em.num_bases)
}

pub fn lmb_params<T: Scalar>(b: &mut ParamBuilder<T>, prefix: &str, c: usize, cfg: &LmrbConfig) -> Result<()> {
    let mid = cfg.mid_channels(c);
    b.conv(&join(prefix, "reduce"), mid, c, 1, true)?;
    b.layer_norm(&join(prefix, "ln"), mid)?;
    b.conv(&join(prefix, "expand"), c, mid, 1, true)
}

pub fn lmrb_params<T: Scalar>(b: &mut ParamBuilder<T>, prefix: &str, c: usize, cfg: &LmrbConfig) -> Result<()> {
    cfg.validate()?;
    for i in 0..cfg.cascades {
        let p = join(prefix, &i.to_string());
        b.conv(&join(&p, "conv"), c, c, 1, false)?;
        lmb_params(b, &join(&p, "lmb"), c, cfg)?;
    }
    Ok(())
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Indivisible {
            what: "attention channels per head".into(),
            extent: c,
            divisor: heads,
        });
    }
    Ok(())
}

/// Intermediate tensors of one IOAB pass.
pub struct AttentionMaps<'t, T: Scalar> {
    /// Per-head channel attention `Q·Kᵀ`: `[N·heads, d, d]`.
    pub attention: Var<'t, T>,
    /// Its EM reconstruction `Z·μ`, same shape.
    pub reconstructed: Var<'t, T>,
    /// Block output (residual included).
    pub output: Var<'t, T>,
}

/// IOAB forward returning the attention matrices alongside the output.
pub fn ioab_attention<'t, T: Scalar>(
    x: &Var<'t, T>,
    ctx: &BlockCtx<'_, 't, T>,
    prefix: &str,
    heads: usize,
) -> Result<AttentionMaps<'t, T>> {
    let (n, c, h, w) = nchw(x.shape(), "ioab")?;
    check_heads(c, heads)?;
    let d = c / heads;
    let f = ctx.layer_norm(&join(prefix, "ln"), x)?;
    let qkv = ctx.conv(&join(prefix, "qkv"), &f, 1)?;
    let qkv = ctx.conv(&join(prefix, "qkv_dw"), &qkv, 3 * c)?;
    let split = |i: usize| qkv.narrow(1, i * c, c)?.reshape(&[n * heads, d, h * w]);
    let q = l2_normalize(&split(0)?)?;
    let k = l2_normalize(&split(1)?)?;
    let v = split(2)?;
    let attention = q.matmul(&k.transpose()?)?;
    let basis = join(prefix, "mu");
    let mu = expand_bases(ctx.params.get(&basis)?, n * heads)?;
    let em = em_iterate(&attention, &mu, ctx.em)?;
    ctx.record(basis, &em.bases, em.dead_bases)?;
    let reconstructed = em.reconstruct()?;
    let out = reconstructed
        .scale(1.0 / (d as f64).sqrt())
        .matmul(&v)?
        .reshape(&[n, c, h, w])?;
    let output = ctx.conv(&join(prefix, "proj"), &out, 1)?.add(x)?;
    Ok(AttentionMaps {
        attention,
        reconstructed,
        output,
    })
}

/// Iterative optimal attention block with its residual: `x + IOAB(LN(x))`.
pub fn ioab_forward<'t, T: Scalar>(
    x: &Var<'t, T>,
    ctx: &BlockCtx<'_, 't, T>,
    prefix: &str,
    heads: usize,
) -> Result<Var<'t, T>> {
    Ok(ioab_attention(x, ctx, prefix, heads)?.output)
}

/// Iterative optimal feedforward block with its residual.
pub fn iofn_forward<'t, T: Scalar>(x: &Var<'t, T>, ctx: &BlockCtx<'_, 't, T>, prefix: &str) -> Result<Var<'t, T>> {
    let (n, _, h, w) = nchw(x.shape(), "iofn")?;
    let f = ctx.layer_norm(&join(prefix, "ln"), x)?;
    let gate = ctx.conv(&join(prefix, "gate_pw"), &f, 1)?;
    let hidden = gate.shape()[1];
    let gate = ctx.conv(&join(prefix, "gate_dw"), &gate, hidden)?;
    let points = gate.reshape(&[n, hidden, h * w])?.transpose()?;
    let basis = join(prefix, "gamma");
    let gamma = expand_bases(ctx.params.get(&basis)?, n)?;
    let em = em_iterate(&points, &gamma, ctx.em)?;
    ctx.record(basis, &em.bases, em.dead_bases)?;
    let gate = em.reconstruct()?.transpose()?.reshape(&[n, hidden, h, w])?;
    let value = ctx.conv(&join(prefix, "value_pw"), &f, 1)?;
    let value = ctx.conv(&join(prefix, "value_dw"), &value, hidden)?;
    ctx.conv(&join(prefix, "proj"), &gate.mul(&value)?, 1)?.add(x)
}

/// Expectation-maximization block: IOAB then IOFN.
pub fn emb_forward<'t, T: Scalar>(
    x: &Var<'t, T>,
    ctx: &BlockCtx<'_, 't, T>,
    prefix: &str,
    heads: usize,
) -> Result<Var<'t, T>> {
    let mid = ioab_forward(x, ctx, &join(prefix, "ioab"), heads)?;
    iofn_forward(&mid, ctx, &join(prefix, "iofn"))
}

fn lmb_gate<'t, T: Scalar>(s: &Var<'t, T>, ctx: &BlockCtx<'_, 't, T>, prefix: &str) -> Result<Var<'t, T>> {
    let r = ctx.conv(&join(prefix, "reduce"), s, 1)?;
    let r = ctx.layer_norm(&join(prefix, "ln"), &r)?.relu();
    Ok(ctx.conv(&join(prefix, "expand"), &r, 1)?.sigmoid())
}

/// Local model block: `x + x ⊙ a_h ⊙ a_w` with directional gates.
pub fn lmb_forward<'t, T: Scalar>(x: &Var<'t, T>, ctx: &BlockCtx<'_, 't, T>, prefix: &str) -> Result<Var<'t, T>> {
    let shape = x.shape().to_vec();
    nchw(&shape, "lmb")?;
    let gated = match ctx.lmrb.mode {
        LmbMode::TwoStream => {
            let ah = lmb_gate(&directional_avg_pool(x, Direction::Vertical)?, ctx, prefix)?;
            let aw = lmb_gate(&directional_avg_pool(x, Direction::Horizontal)?, ctx, prefix)?;
            x.mul(&ah.broadcast_to(&shape)?)?.mul(&aw.broadcast_to(&shape)?)?
        }
        LmbMode::SingleStream => {
            let a = lmb_gate(&x.mean(&[2, 3], true)?, ctx, prefix)?;
            x.mul(&a.broadcast_to(&shape)?)?
        }
    };
    x.add(&gated)
}

/// `cascades` repetitions of `x ← x + LMB(relu(conv1×1(x)))`.
pub fn lmrb_forward<'t, T: Scalar>(x: &Var<'t, T>, ctx: &BlockCtx<'_, 't, T>, prefix: &str) -> Result<Var<'t, T>> {
    ctx.lmrb.validate()?;
    let mut cur = x.clone();
    for i in 0..ctx.lmrb.cascades {
        let p = join(prefix, &i.to_string());
        let inner = ctx.conv(&join(&p, "conv"), &cur, 1)?.relu();
        cur = cur.add(&lmb_forward(&inner, ctx, &join(&p, "lmb"))?)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn em2() -> EmConfig {
        EmConfig {
            num_bases: 2,
            iterations: 2,
            ..EmConfig::default()
        }
    }

    fn emb_set(c: usize, heads: usize, em: &EmConfig) -> ParamSet<f64> {
        let mut b = ParamBuilder::new(3);
        emb_params(&mut b, "e", c, heads, em, 2.66).unwrap();
        b.finish()
    }

    fn run(
        params: &ParamSet<f64>,
        x: &Tensor<f64>,
        em: &EmConfig,
        lmrb: &LmrbConfig,
        f: impl for<'t> Fn(&Var<'t, f64>, &BlockCtx<'_, 't, f64>) -> Result<Var<'t, f64>>,
    ) -> Tensor<f64> {
        let tape = Tape::inference();
        let bound = Bound::bind(&tape, params, false).unwrap();
        let ctx = BlockCtx::new(&bound, em, lmrb);
        f(&tape.constant(x.clone()), &ctx).unwrap().value().clone()
    }

    #[test]
    fn emb_preserves_shape() {
        let em = em2();
        let p = emb_set(4, 2, &em);
        let x = input(1, &[2, 4, 4, 6]);
        let y = run(&p, &x, &em, &LmrbConfig::default(), |x, c| emb_forward(x, c, "e", 2));
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn head_divisibility_checked() {
        let mut b = ParamBuilder::<f64>::new(0);
        assert!(matches!(
            ioab_params(&mut b, "a", 6, 4, 2),
            Err(Error::Indivisible { .. })
        ));
    }

    #[test]
    fn zero_projection_makes_ioab_identity() {
        let em = em2();
        let mut p = emb_set(4, 2, &em);
        *p.get_mut("e.ioab.proj.w").unwrap() = Tensor::zeros(&[4, 4, 1, 1]);
        let x = input(2, &[1, 4, 4, 4]);
        let y = run(&p, &x, &em, &LmrbConfig::default(), |x, c| {
            ioab_forward(x, c, "e.ioab", 2)
        });
        assert_eq!(y, x);
    }

    #[test]
    fn zero_value_path_makes_iofn_identity() {
        let em = em2();
        let mut p = emb_set(4, 2, &em);
        let hid = ffn_hidden(4, 2.66);
        *p.get_mut("e.iofn.value_pw.w").unwrap() = Tensor::zeros(&[hid, 4, 1, 1]);
        let x = input(3, &[1, 4, 4, 4]);
        let y = run(&p, &x, &em, &LmrbConfig::default(), |x, c| iofn_forward(x, c, "e.iofn"));
        assert_eq!(y, x);
    }

    #[test]
    fn all_zero_emb_is_identity() {
        let em = em2();
        let mut p = emb_set(4, 2, &em);
        for (_, t) in p.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let x = input(4, &[1, 4, 4, 4]);
        let y = run(&p, &x, &em, &LmrbConfig::default(), |x, c| emb_forward(x, c, "e", 2));
        assert_eq!(y, x);
    }

    #[test]
    fn emb_is_ioab_then_iofn() {
        let em = em2();
        let p = emb_set(4, 2, &em);
        let x = input(5, &[1, 4, 4, 4]);
        let lm = LmrbConfig::default();
        let whole = run(&p, &x, &em, &lm, |x, c| emb_forward(x, c, "e", 2));
        let mid = run(&p, &x, &em, &lm, |x, c| ioab_forward(x, c, "e.ioab", 2));
        let chained = run(&p, &mid, &em, &lm, |x, c| iofn_forward(x, c, "e.iofn"));
        assert_eq!(whole, chained);
    }

    #[test]
    fn trace_records_each_em_run() {
        let em = em2();
        let p = emb_set(4, 2, &em);
        let tape = Tape::inference();
        let bound = Bound::bind(&tape, &p, false).unwrap();
        let lm = LmrbConfig::default();
        let ctx = BlockCtx::new(&bound, &em, &lm);
        emb_forward(&tape.constant(input(6, &[3, 4, 4, 4])), &ctx, "e", 2).unwrap();
        let trace = ctx.take_trace();
        let names: Vec<_> = trace.iter().map(|t| t.basis.as_str()).collect();
        assert_eq!(names, ["e.ioab.mu", "e.iofn.gamma"]);
        assert_eq!(trace[0].mean_final.shape(), &[2, 2]);
        assert_eq!(trace[1].mean_final.shape(), &[2, ffn_hidden(4, 2.66)]);
    }

    fn lmrb_set(c: usize, cfg: &LmrbConfig) -> ParamSet<f64> {
        let mut b = ParamBuilder::new(9);
        lmrb_params(&mut b, "l", c, cfg).unwrap();
        b.finish()
    }

    #[test]
    fn zero_gate_kernels_scale_by_five_quarters() {
        let cfg = LmrbConfig::default();
        let mut p = lmrb_set(4, &cfg);
        let mid = cfg.mid_channels(4);
        *p.get_mut("l.0.lmb.expand.w").unwrap() = Tensor::zeros(&[4, mid, 1, 1]);
        let x = input(7, &[1, 4, 3, 5]);
        let y = run(&p, &x, &EmConfig::default(), &cfg, |x, c| lmb_forward(x, c, "l.0.lmb"));
        assert!(y.max_abs_diff(&x.map(|v| 1.25 * v)) < 1e-15);
    }

    #[test]
    fn lmb_keeps_constant_input_constant() {
        let cfg = LmrbConfig::default();
        let p = lmrb_set(2, &cfg);
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 3], |i| if i < 9 { 0.3 } else { -0.7 });
        let y = run(&p, &x, &EmConfig::default(), &cfg, |x, c| lmb_forward(x, c, "l.0.lmb"));
        for ch in y.data().chunks(9) {
            assert!(ch.iter().all(|v| (v - ch[0]).abs() < 1e-15));
        }
    }

    #[test]
    fn lmb_modes_preserve_shape() {
        for mode in [LmbMode::TwoStream, LmbMode::SingleStream] {
            let cfg = LmrbConfig {
                mode,
                ..LmrbConfig::default()
            };
            let p = lmrb_set(4, &cfg);
            let x = input(8, &[2, 4, 3, 5]);
            let y = run(&p, &x, &EmConfig::default(), &cfg, |x, c| lmrb_forward(x, c, "l"));
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn zero_convs_make_lmrb_identity() {
        let cfg = LmrbConfig::default();
        let mut p = lmrb_set(4, &cfg);
        for i in 0..2 {
            *p.get_mut(&format!("l.{i}.conv.w")).unwrap() = Tensor::zeros(&[4, 4, 1, 1]);
        }
        let x = input(10, &[1, 4, 4, 4]);
        let y = run(&p, &x, &EmConfig::default(), &cfg, |x, c| lmrb_forward(x, c, "l"));
        assert_eq!(y, x);
    }

    #[test]
    fn lmrb_is_the_literal_two_stage_chain() {
        let cfg = LmrbConfig::default();
        let p = lmrb_set(4, &cfg);
        let x = input(11, &[1, 4, 4, 4]);
        let em = EmConfig::default();
        let y = run(&p, &x, &em, &cfg, |x, c| lmrb_forward(x, c, "l"));
        let chain = run(&p, &x, &em, &cfg, |f_l, c| {
            let a = lmb_forward(&c.conv("l.0.conv", f_l, 1)?.relu(), c, "l.0.lmb")?;
            let f_l1 = f_l.add(&a)?;
            let b = lmb_forward(&c.conv("l.1.conv", &f_l1, 1)?.relu(), c, "l.1.lmb")?;
            f_l1.add(&b)
        });
        assert_eq!(y, chain);
    }

    #[test]
    fn lmrb_flops_linear_in_cascades() {
        let flops = |k: usize| {
            let cfg = LmrbConfig {
                cascades: k,
                ..LmrbConfig::default()
            };
            let p = lmrb_set(4, &cfg);
            let tape = Tape::inference();
            let bound = Bound::bind(&tape, &p, false).unwrap();
            let em = EmConfig::default();
            let ctx = BlockCtx::new(&bound, &em, &cfg);
            let x = tape.constant(input(12, &[1, 4, 4, 4]));
            let before = tape.flops();
            lmrb_forward(&x, &ctx, "l").unwrap();
            tape.flops() - before
        };
        let f1 = flops(1);
        assert!(f1 > 0);
        for k in 2..=4 {
            assert_eq!(flops(k), k as u64 * f1);
        }
    }
}
