//! Neural-network primitives on NCHW tensors.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::ops::{bmm_raw, dot, transpose_raw};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.7978845608;
const GELU_A: f64 = 0.044715;

/// Convolution weights with their geometry.
#[derive(Clone, Debug)]
pub struct ConvKernel<'t, T: Scalar> {
    pub weight: Var<'t, T>,
    pub bias: Option<Var<'t, T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<'t, T: Scalar> ConvKernel<'t, T> {
    /// Stride-1 kernel with same-padding for odd kernel sizes.
    pub fn same(weight: Var<'t, T>, bias: Option<Var<'t, T>>, groups: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 {
            return Err(Error::InvalidShape {
                shape: ws.to_vec(),
                reason: "conv weight must be [out, in/groups, kh, kw]".into(),
            });
        }
        if ws[2].is_multiple_of(2) || ws[3] != ws[2] {
            return Err(Error::InvalidShape {
                shape: ws.to_vec(),
                reason: "same-padding needs a square odd kernel".into(),
            });
        }
        let padding = ws[2] / 2;
        Self::new(weight, bias, 1, padding, groups)
    }

    pub fn new(
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let ws = weight.shape().to_vec();
        if ws.len() != 4 || groups == 0 || stride == 0 {
            return Err(Error::InvalidShape {
                shape: ws,
                reason: "conv weight must be [out, in/groups, kh, kw] with groups, stride >= 1".into(),
            });
        }
        if !ws[0].is_multiple_of(groups) {
            return Err(Error::Indivisible {
                what: "conv output channels".into(),
                extent: ws[0],
                divisor: groups,
            });
        }
        if let Some(b) = &bias {
            if b.shape() != [ws[0]] {
                return Err(Error::shape("conv bias", b.shape(), &[ws[0]]));
            }
        }
        Ok(ConvKernel {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn apply(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        conv2d(x, self)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    /// Output columns `[lo, hi)` whose input column for tap `kx` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kx = kx as isize;
        let lo = ((p - kx) + s - 1).div_euclid(s).max(0);
        let hi = ((self.w as isize - 1 + p - kx).div_euclid(s) + 1).min(self.ow as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    /// Visits every (in-plane, out-plane, weight index) triple together with
    /// the overlapping row segments.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
        let cout_g = self.cout / self.groups;
        for n in 0..self.n {
            for o in 0..self.cout {
                let grp = o / cout_g;
                for ci in 0..self.cin_g {
                    let c = grp * self.cin_g + ci;
                    let in_plane = (n * self.cin + c) * self.h * self.w;
                    let out_plane = (n * self.cout + o) * self.oh * self.ow;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let widx = ((o * self.cin_g + ci) * self.kh + ky) * self.kw + kx;
                            f(in_plane, out_plane, widx, ky, kx, n, o);
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    /// Ungrouped 1×1 convolution without stride or padding: a per-sample
    /// `[cout, cin] · [cin, HW]` product.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0 && self.groups == 1
    }
}

fn conv_forward<T: Scalar>(x: &[T], wt: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut out = if g.pointwise() {
        let per = g.cin * plane;
        let mut out = Vec::with_capacity(g.n * g.cout * plane);
        for n in 0..g.n {
            out.extend(bmm_raw(wt, &x[n * per..(n + 1) * per], 1, g.cout, g.cin, plane));
        }
        out
    } else {
        vec![T::zero(); g.n * g.cout * plane]
    };
    if let Some(b) = bias {
        for (i, p) in out.chunks_mut(plane).enumerate() {
            let bv = b[i % g.cout];
            p.iter_mut().for_each(|v| *v += bv);
        }
    }
    if g.pointwise() {
        return out;
    }
    g.for_each_tap(|ip, op, widx, ky, kx, _, _| {
        let wv = wt[widx];
        if wv == T::zero() {
            return;
        }
        let (lo, hi) = g.col_range(kx);
        if lo >= hi {
            return;
        }
        for oy in 0..g.oh {
            let Some(iy) = g.in_row(oy, ky) else { continue };
            let orow = &mut out[op + oy * g.ow..op + (oy + 1) * g.ow];
            let irow = &x[ip + iy * g.w..ip + (iy + 1) * g.w];
            if g.stride == 1 {
                let off = lo + kx - g.pad;
                for (o, &i) in orow[lo..hi].iter_mut().zip(&irow[off..off + (hi - lo)]) {
                    *o += wv * i;
                }
            } else {
                for ox in lo..hi {
                    orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                }
            }
        }
    });
    out
}

fn conv_backward_input<T: Scalar>(gout: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    if g.pointwise() {
        let (plane, per) = (g.h * g.w, g.cout * g.h * g.w);
        let w_t = transpose_raw(wt, 1, g.cout, g.cin);
        let mut dx = Vec::with_capacity(g.n * g.cin * plane);
        for n in 0..g.n {
            dx.extend(bmm_raw(&w_t, &gout[n * per..(n + 1) * per], 1, g.cin, g.cout, plane));
        }
        return dx;
    }
    let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
    g.for_each_tap(|ip, op, widx, ky, kx, _, _| {
        let wv = wt[widx];
        if wv == T::zero() {
            return;
        }
        let (lo, hi) = g.col_range(kx);
        if lo >= hi {
            return;
        }
        for oy in 0..g.oh {
            let Some(iy) = g.in_row(oy, ky) else { continue };
            let grow = &gout[op + oy * g.ow..op + (oy + 1) * g.ow];
            let drow = &mut dx[ip + iy * g.w..ip + (iy + 1) * g.w];
            if g.stride == 1 {
                let off = lo + kx - g.pad;
                for (d, &gv) in drow[off..off + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                    *d += wv * gv;
                }
            } else {
                for ox in lo..hi {
                    drow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                }
            }
        }
    });
    dx
}

fn conv_backward_weight<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom, wlen: usize) -> Vec<T> {
    let mut dw = vec![T::zero(); wlen];
    if g.pointwise() {
        // dW[o, c] = Σ_p G[o, p]·X[c, p]: row dot products, no transpose needed
        let plane = g.h * g.w;
        for n in 0..g.n {
            let gs = &gout[n * g.cout * plane..(n + 1) * g.cout * plane];
            let xs = &x[n * g.cin * plane..(n + 1) * g.cin * plane];
            for (o, grow) in gs.chunks_exact(plane).enumerate() {
                for (c, xrow) in xs.chunks_exact(plane).enumerate() {
                    dw[o * g.cin + c] += dot(grow, xrow);
                }
            }
        }
        return dw;
    }
    g.for_each_tap(|ip, op, widx, ky, kx, _, _| {
        let (lo, hi) = g.col_range(kx);
        if lo >= hi {
            return;
        }
        let mut acc = T::zero();
        for oy in 0..g.oh {
            let Some(iy) = g.in_row(oy, ky) else { continue };
            let grow = &gout[op + oy * g.ow..op + (oy + 1) * g.ow];
            let irow = &x[ip + iy * g.w..ip + (iy + 1) * g.w];
            if g.stride == 1 {
                let off = lo + kx - g.pad;
                for (&gv, &iv) in grow[lo..hi].iter().zip(&irow[off..off + (hi - lo)]) {
                    acc += gv * iv;
                }
            } else {
                for ox in lo..hi {
                    acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
                }
            }
        }
        dw[widx] += acc;
    });
    dw
}

/// 2-D cross-correlation with zero padding, optional bias and channel groups.
pub fn conv2d<'t, T: Scalar>(x: &Var<'t, T>, k: &ConvKernel<'t, T>) -> Result<Var<'t, T>> {
    let xs = x.shape();
    let ws = k.weight.shape();
    if xs.len() != 4 {
        return Err(Error::InvalidShape {
            shape: xs.to_vec(),
            reason: "conv2d input must be NCHW".into(),
        });
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if cin_g * k.groups != cin {
        return Err(Error::shape("conv2d channels", xs, ws));
    }
    if h + 2 * k.padding < kh || w + 2 * k.padding < kw {
        return Err(Error::shape("conv2d spatial extent", xs, ws));
    }
    let g = ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        cin_g,
        kh,
        kw,
        oh: (h + 2 * k.padding - kh) / k.stride + 1,
        ow: (w + 2 * k.padding - kw) / k.stride + 1,
        stride: k.stride,
        pad: k.padding,
        groups: k.groups,
    };
    let xv = x.value_rc();
    let wv = k.weight.value_rc();
    let data = conv_forward(xv.data(), wv.data(), k.bias.as_ref().map(|b| b.value().data()), &g);
    let out = Tensor::from_parts(vec![n, cout, g.oh, g.ow], data);
    let flops = 2 * (n * cout * cin_g * kh * kw * g.oh * g.ow) as u64;
    let mut inputs = vec![x, &k.weight];
    if let Some(b) = &k.bias {
        inputs.push(b);
    }
    let has_bias = k.bias.is_some();
    Ok(x.tape().record(out, &inputs, flops, move |gout, needs| {
        let gd = gout.data();
        let mut res = vec![
            needs[0].then(|| Tensor::from_parts(xv.shape().to_vec(), conv_backward_input(gd, wv.data(), &g))),
            needs[1]
                .then(|| Tensor::from_parts(wv.shape().to_vec(), conv_backward_weight(gd, xv.data(), &g, wv.numel()))),
        ];
        if has_bias {
            res.push(needs[2].then(|| {
                let mut db = vec![T::zero(); g.cout];
                for (i, plane) in gd.chunks(g.oh * g.ow).enumerate() {
                    db[i % g.cout] += plane.iter().copied().sum();
                }
                Tensor::from_parts(vec![g.cout], db)
            }));
        }
        res
    }))
}

/// Normalizes across the channel axis (axis 1) at every batch/spatial
/// position, then applies a per-channel gain and offset.
#[allow(clippy::needless_range_loop)]
pub fn layer_norm<'t, T: Scalar>(
    x: &Var<'t, T>,
    gain: &Var<'t, T>,
    offset: &Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let xs = x.shape().to_vec();
    if xs.len() < 2 {
        return Err(Error::InvalidShape {
            shape: xs,
            reason: "layer_norm needs a channel axis".into(),
        });
    }
    let (n, c) = (xs[0], xs[1]);
    let sp: usize = xs[2..].iter().product();
    if gain.shape() != [c] || offset.shape() != [c] {
        return Err(Error::shape("layer_norm affine", gain.shape(), &[c]));
    }
    let xd = x.value().data();
    let gd = gain.value().data();
    let od = offset.value().data();
    let eps = T::lit(eps);
    let cf = T::lit(c as f64);
    let mut xhat = vec![T::zero(); xd.len()];
    let mut rstd = vec![T::zero(); n * sp];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for s in 0..sp {
            let idx = |ch: usize| (b * c + ch) * sp + s;
            let mean = (0..c).map(|ch| xd[idx(ch)]).sum::<T>() / cf;
            let var = (0..c)
                .map(|ch| {
                    let d = xd[idx(ch)] - mean;
                    d * d
                })
                .sum::<T>()
                / cf;
            let r = T::one() / (var + eps).sqrt();
            rstd[b * sp + s] = r;
            for ch in 0..c {
                let i = idx(ch);
                xhat[i] = (xd[i] - mean) * r;
                out[i] = gd[ch] * xhat[i] + od[ch];
            }
        }
    }
    let out = Tensor::from_parts(xs.clone(), out);
    let gain_v = gain.value_rc();
    let flops = 8 * xd.len() as u64;
    Ok(x.tape().record(out, &[x, gain, offset], flops, move |g, needs| {
        let gdat = g.data();
        let gn = gain_v.data();
        let mut dx = needs[0].then(|| vec![T::zero(); gdat.len()]);
        let mut dgain = vec![T::zero(); c];
        let mut doff = vec![T::zero(); c];
        for b in 0..n {
            for s in 0..sp {
                let idx = |ch: usize| (b * c + ch) * sp + s;
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for ch in 0..c {
                    let i = idx(ch);
                    dgain[ch] += gdat[i] * xhat[i];
                    doff[ch] += gdat[i];
                    let d = gdat[i] * gn[ch];
                    sum_d += d;
                    sum_dx += d * xhat[i];
                }
                if let Some(dx) = dx.as_mut() {
                    let r = rstd[b * sp + s];
                    for ch in 0..c {
                        let i = idx(ch);
                        let d = gdat[i] * gn[ch];
                        dx[i] = r * (d - sum_d / cf - xhat[i] * sum_dx / cf);
                    }
                }
            }
        }
        vec![
            dx.map(|d| Tensor::from_parts(xs.clone(), d)),
            needs[1].then(|| Tensor::from_parts(vec![c], dgain)),
            needs[2].then(|| Tensor::from_parts(vec![c], doff)),
        ]
    }))
}

/// Softmax along `axis` with max subtraction.
pub fn softmax<'t, T: Scalar>(x: &Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
    let xs = x.shape().to_vec();
    if axis >= xs.len() {
        return Err(Error::InvalidAxis {
            op: "softmax",
            axis,
            rank: xs.len(),
        });
    }
    let outer: usize = xs[..axis].iter().product();
    let len = xs[axis];
    let inner: usize = xs[axis + 1..].iter().product();
    let xd = x.value().data();
    let mut y = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..len {
                let e = (xd[at(k)] - m).exp();
                y[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                y[at(k)] /= z;
            }
        }
    }
    let out = Tensor::from_parts(xs.clone(), y);
    let yv = std::rc::Rc::new(out.clone());
    let flops = 4 * xd.len() as u64;
    Ok(x.tape().record(out, &[x], flops, move |g, _| {
        let (gd, yd) = (g.data(), yv.data());
        let mut dx = vec![T::zero(); gd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let dot: T = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                for k in 0..len {
                    dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts(xs.clone(), dx))]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

pub fn activate<'t, T: Scalar>(kind: Activation, x: &Var<'t, T>) -> Var<'t, T> {
    match kind {
        Activation::Relu => x.relu(),
        Activation::Gelu => x.gelu(),
        Activation::Sigmoid => x.sigmoid(),
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Rectifier; subgradient 0 at 0.
    pub fn relu(&self) -> Var<'t, T> {
        self.unary(
            1,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(4, |x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        self.unary(
            10,
            move |x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
            },
        )
    }
}

/// Axis of a one-dimensional average pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Average each row over the width: `N×C×H×1`.
    Vertical,
    /// Average each column over the height: `N×C×1×W`.
    Horizontal,
}

pub fn directional_avg_pool<'t, T: Scalar>(x: &Var<'t, T>, dir: Direction) -> Result<Var<'t, T>> {
    if x.shape().len() != 4 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "directional pooling needs NCHW".into(),
        });
    }
    match dir {
        Direction::Vertical => x.mean(&[3], true),
        Direction::Horizontal => x.mean(&[2], true),
    }
}

/// Gather through a fixed index permutation: `out[i] = x[perm[i]]`.
fn permute_gather<'t, T: Scalar>(x: &Var<'t, T>, out_shape: Vec<usize>, perm: Vec<usize>) -> Var<'t, T> {
    let xd = x.value().data();
    let data = perm.iter().map(|&p| xd[p]).collect();
    let in_shape = x.shape().to_vec();
    x.tape()
        .record(Tensor::from_parts(out_shape, data), &[x], 0, move |g, _| {
            let mut dx = vec![T::zero(); perm.len()];
            for (&p, &gv) in perm.iter().zip(g.data()) {
                dx[p] = gv;
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        })
}

fn nchw<T: Scalar>(x: &Var<'_, T>, op: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("{op} needs NCHW"),
        }),
    }
}

/// `N×C×H×W → N×4C×H/2×W/2`; channel `4c + 2dy + dx` holds pixel
/// `(2y + dy, 2x + dx)` of input channel `c`.
pub fn space_to_depth<'t, T: Scalar>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (n, c, h, w) = nchw(x, "space_to_depth")?;
    for (what, e) in [("height", h), ("width", w)] {
        if e % 2 != 0 {
            return Err(Error::Indivisible {
                what: format!("space_to_depth {what}"),
                extent: e,
                divisor: 2,
            });
        }
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut perm = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    for y in 0..oh {
                        for xx in 0..ow {
                            perm.push(((b * c + ch) * h + 2 * y + dy) * w + 2 * xx + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(permute_gather(x, vec![n, 4 * c, oh, ow], perm))
}

/// Inverse of [`space_to_depth`]: `N×4C×H×W → N×C×2H×2W`.
pub fn depth_to_space<'t, T: Scalar>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (n, c4, h, w) = nchw(x, "depth_to_space")?;
    if c4 % 4 != 0 {
        return Err(Error::Indivisible {
            what: "depth_to_space channels".into(),
            extent: c4,
            divisor: 4,
        });
    }
    let c = c4 / 4;
    let mut perm = Vec::with_capacity(n * c4 * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src_c = ch * 4 + (y % 2) * 2 + xx % 2;
                    perm.push(((b * c4 + src_c) * h + y / 2) * w + xx / 2);
                }
            }
        }
    }
    Ok(permute_gather(x, vec![n, c, 2 * h, 2 * w], perm))
}

/// Scales every vector along the last axis to unit L2 norm (norms below
/// `1e-12` are clamped to it).
pub fn l2_normalize<'t, T: Scalar>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let xs = x.shape().to_vec();
    let d = *xs.last().ok_or_else(|| Error::InvalidShape {
        shape: xs.clone(),
        reason: "l2_normalize needs rank >= 1".into(),
    })?;
    let eps = T::lit(1e-12);
    let xd = x.value().data();
    let mut y = vec![T::zero(); xd.len()];
    let mut norms = Vec::with_capacity(xd.len() / d);
    for (row, out) in xd.chunks(d).zip(y.chunks_mut(d)) {
        let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        norms.push(nrm);
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v / nrm;
        }
    }
    let out = Tensor::from_parts(xs.clone(), y);
    let yv = std::rc::Rc::new(out.clone());
    let flops = 3 * xd.len() as u64;
    Ok(x.tape().record(out, &[x], flops, move |g, _| {
        let mut dx = vec![T::zero(); g.numel()];
        for (((grow, yrow), drow), &nrm) in g
            .data()
            .chunks(d)
            .zip(yv.data().chunks(d))
            .zip(dx.chunks_mut(d))
            .zip(&norms)
        {
            if nrm > eps {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *o = (gv - yv * dot) / nrm;
                }
            } else {
                for (o, &gv) in drow.iter_mut().zip(grow) {
                    *o = gv / nrm;
                }
            }
        }
        vec![Some(Tensor::from_parts(xs.clone(), dx))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct six-nested-loop cross-correlation.
    #[allow(clippy::needless_range_loop)]
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: usize, groups: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let cout_g = cout / groups;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for bi in 0..n {
            for o in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[o];
                        for ci in 0..cin_g {
                            let c = (o / cout_g) * cin_g + ci;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * cin_g + ci) * kh + ky) * kw + kx]
                                        * x.data()[((bi * cin + c) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        let _ = cin;
        out
    }

    #[test]
    fn conv_identity_1x1() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 4, 4], |i| i as f64 * 0.1));
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let k = ConvKernel::same(tape.constant(w), Some(tape.constant(Tensor::zeros(&[3]))), 1).unwrap();
        assert_eq!(k.apply(&x).unwrap().value(), x.value());
    }

    #[test]
    fn depthwise_ones_on_constant() {
        let tape = Tape::<f64>::new();
        let c = 0.3;
        let x = tape.constant(Tensor::full(&[1, 2, 5, 5], c));
        let k = ConvKernel::same(tape.constant(Tensor::ones(&[2, 1, 3, 3])), None, 2).unwrap();
        let y = k.apply(&x).unwrap();
        for ch in 0..2 {
            for yy in 1..4 {
                for xx in 1..4 {
                    let v = y.value().data()[(ch * 5 + yy) * 5 + xx];
                    assert!((v - 9.0 * c).abs() < 1e-12);
                }
            }
        }
        assert!((y.value().data()[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::<f64>::new();
            let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
            let w = rand_tensor(&mut rng, &[2, 2, 3, 3]);
            let b = rand_tensor(&mut rng, &[2]);
            let expected = naive_conv(&x, &w, b.data(), 1, 1);
            let k = ConvKernel::same(tape.constant(w), Some(tape.constant(b)), 1).unwrap();
            let y = k.apply(&tape.constant(x)).unwrap();
            assert!(y.value().max_abs_diff(&expected) <= 1e-12);
        }
        // grouped, unpadded
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::<f64>::new();
        let x = rand_tensor(&mut rng, &[1, 4, 6, 6]);
        let w = rand_tensor(&mut rng, &[6, 2, 3, 3]);
        let expected = naive_conv(&x, &w, &[0.0; 6], 0, 2);
        let k = ConvKernel::new(tape.constant(w), None, 1, 0, 2).unwrap();
        assert!(k.apply(&tape.constant(x)).unwrap().value().max_abs_diff(&expected) <= 1e-12);
    }

    #[test]
    fn conv_channel_mismatch() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let k = ConvKernel::same(tape.constant(Tensor::zeros(&[2, 2, 3, 3])), None, 1).unwrap();
        assert!(matches!(k.apply(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let o = tape.constant(Tensor::zeros(&[2]));
        let c = tape.constant(Tensor::full(&[1, 2, 2, 2], 3.0));
        let y = layer_norm(&c, &g, &o, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));

        let x = tape.constant(Tensor::from_f64(&[1, 2, 1, 1], &[1.0, 3.0]).unwrap());
        let y = layer_norm(&x, &g, &o, 1e-15).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-12);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::<f64>::new();
        let x = tape.constant(rand_tensor(&mut rng, &[1, 4, 2, 2]));
        let g = tape.constant(Tensor::ones(&[4]));
        let o = tape.constant(Tensor::zeros(&[4]));
        let y = layer_norm(&x, &g, &o, 1e-12).unwrap();
        let d = y.value().data();
        for s in 0..4 {
            let vals: Vec<f64> = (0..4).map(|c| d[c * 4 + s]).collect();
            let mean = vals.iter().sum::<f64>() / 4.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let u = softmax(&tape.constant(Tensor::zeros(&[3])), 0).unwrap();
        assert!(u.value().data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let l = tape.constant(Tensor::from_f64(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap());
        let s = softmax(&l, 0).unwrap();
        for (v, e) in s.value().data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
        let shifted = softmax(&l.add_scalar(1000.0), 0).unwrap();
        assert!(shifted.value().max_abs_diff(s.value()) < 1e-12);
        assert!(softmax(&l, 1).is_err());
    }

    #[test]
    fn activation_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap());
        assert_eq!(activate(Activation::Relu, &x).value().data(), &[0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(activate(Activation::Sigmoid, &z).item(), Some(0.5));
        let v = tape.constant(Tensor::from_f64(&[4], &[-3.0, -0.2, 0.7, 5.0]).unwrap());
        let s1 = v.sigmoid();
        let s2 = v.scale(-1.0).sigmoid();
        for (a, b) in s1.value().data().iter().zip(s2.value().data()) {
            assert!((a + b - 1.0).abs() < 1e-15);
        }
        assert!(activate(Activation::Gelu, &z).item().unwrap().abs() < 1e-15);
    }

    #[test]
    fn pooling_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = directional_avg_pool(&x, Direction::Vertical).unwrap();
        assert_eq!(v.shape(), &[1, 1, 2, 1]);
        assert_eq!(v.value().data(), &[1.5, 3.5]);
        let h = directional_avg_pool(&x, Direction::Horizontal).unwrap();
        assert_eq!(h.shape(), &[1, 1, 1, 2]);
        assert_eq!(h.value().data(), &[2.0, 3.0]);
        let c = tape.constant(Tensor::full(&[1, 2, 3, 5], 0.25));
        let p = directional_avg_pool(&c, Direction::Vertical).unwrap();
        assert!(p.value().data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pixel_shuffles() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = space_to_depth(&x).unwrap();
        assert_eq!(s.shape(), &[1, 4, 1, 1]);
        assert_eq!(s.value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let big = tape.constant(Tensor::from_fn(&[2, 3, 8, 6], |i| i as f64));
        let down = space_to_depth(&big).unwrap();
        assert_eq!(down.shape(), &[2, 12, 4, 3]);
        assert_eq!(depth_to_space(&down).unwrap().value(), big.value());

        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(space_to_depth(&odd), Err(Error::Indivisible { .. })));
    }

    #[test]
    fn l2_normalize_unit_rows() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[3.0, 4.0, 0.0, 0.0]).unwrap());
        let y = l2_normalize(&x).unwrap();
        assert_eq!(y.value().data(), &[0.6, 0.8, 0.0, 0.0]);
    }
}
