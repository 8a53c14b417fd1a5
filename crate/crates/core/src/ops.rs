//! Differentiable tensor algebra on [`Var`].

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel_of, Tensor};

/// Elementwise operation kinds accepted by [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    /// Multiply by a scalar operand.
    Scale,
    /// Saturate into `[lo, hi]`.
    Clamp,
}

/// Right-hand operand of [`elementwise`].
pub enum Operand<'a, 't, T: Scalar> {
    Tensor(&'a Var<'t, T>),
    Scalar(f64),
    Range(f64, f64),
}

/// Dispatches an elementwise operation; tensor operands must match `a`'s shape.
pub fn elementwise<'t, T: Scalar>(op: ElementwiseOp, a: &Var<'t, T>, rhs: Operand<'_, 't, T>) -> Result<Var<'t, T>> {
    use ElementwiseOp::*;
    match (op, rhs) {
        (Add, Operand::Tensor(b)) => a.add(b),
        (Sub, Operand::Tensor(b)) => a.sub(b),
        (Mul, Operand::Tensor(b)) => a.mul(b),
        (Div, Operand::Tensor(b)) => a.div(b),
        (Add, Operand::Scalar(s)) => Ok(a.add_scalar(s)),
        (Sub, Operand::Scalar(s)) => Ok(a.add_scalar(-s)),
        (Mul | Scale, Operand::Scalar(s)) => Ok(a.scale(s)),
        (Div, Operand::Scalar(s)) => {
            if s == 0.0 {
                Err(Error::DivisionByZero { index: 0 })
            } else {
                Ok(a.scale(1.0 / s))
            }
        }
        (Clamp, Operand::Range(lo, hi)) => Ok(a.clamp(lo, hi)),
        (op, _) => Err(Error::Config(format!("operand kind not valid for {op:?}"))),
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Batched row-major product: `[batch, m, k] x [batch, k, n]`.
pub(crate) fn bmm_raw<T: Scalar>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let c = &mut c[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    }
    c
}

/// Dot product with four independent accumulators so the loop vectorizes.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: T = ac.remainder().iter().zip(bc.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn transpose_raw<T: Scalar>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let src = &x[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// For each element of `shape`, the flat index of its image after reducing
/// `axes` (kept as extent-1 dims).
fn reduction_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &e)| if axes.contains(&i) { 1 } else { e })
        .collect();
    let kstr = strides(&kept);
    let n = numel_of(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for (d, &i) in idx.iter().enumerate() {
            if kept[d] != 1 {
                o += i * kstr[d];
            }
        }
        map.push(o);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (kept, map)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("add", self, other)?;
        let out = self.value().zip_map(other.value(), |a, b| a + b)?;
        let n = out.numel() as u64;
        Ok(self
            .tape()
            .record(out, &[self, other], n, |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("sub", self, other)?;
        let out = self.value().zip_map(other.value(), |a, b| a - b)?;
        let n = out.numel() as u64;
        Ok(self.tape().record(out, &[self, other], n, |g, needs| {
            vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("mul", self, other)?;
        let out = self.value().zip_map(other.value(), |a, b| a * b)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        let n = out.numel() as u64;
        Ok(self.tape().record(out, &[self, other], n, move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |g, b| g * b).unwrap()),
                needs[1].then(|| g.zip_map(&a, |g, a| g * a).unwrap()),
            ]
        }))
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("div", self, other)?;
        if let Some(index) = other.value().data().iter().position(|v| *v == T::zero()) {
            return Err(Error::DivisionByZero { index });
        }
        let out = self.value().zip_map(other.value(), |a, b| a / b)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        let n = out.numel() as u64;
        Ok(self.tape().record(out, &[self, other], n, move |g, needs| {
            let da = needs[0].then(|| g.zip_map(&b, |g, b| g / b).unwrap());
            let db = needs[1].then(|| {
                let data = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .zip(b.data())
                    .map(|((&g, &a), &b)| -g * a / (b * b))
                    .collect();
                Tensor::from_parts(g.shape().to_vec(), data)
            });
            vec![da, db]
        }))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::lit(s);
        let out = self.value().map(|v| v + s);
        let n = out.numel() as u64;
        self.tape().record(out, &[self], n, |g, _| vec![Some(g.clone())])
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = T::lit(s);
        let out = self.value().map(|v| v * s);
        let n = out.numel() as u64;
        self.tape()
            .record(out, &[self], n, move |g, _| vec![Some(g.map(|v| v * s))])
    }

    /// Saturates into `[lo, hi]`; the gradient passes where the input lies in
    /// the closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let out = self.value().map(|v| v.max(lo).min(hi));
        let x = self.value_rc();
        let n = out.numel() as u64;
        self.tape().record(out, &[self], n, move |g, _| {
            vec![Some(
                g.zip_map(&x, |g, x| if x >= lo && x <= hi { g } else { T::zero() })
                    .unwrap(),
            )]
        })
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn unary(&self, flops_per: u64, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let out = self.value().map(f);
        let x = self.value_rc();
        let y = std::rc::Rc::new(out.clone());
        let n = out.numel() as u64 * flops_per;
        self.tape().record(out, &[self], n, move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(1, |x| x * x, |x, _| x + x)
    }

    /// Matrix product of rank-2 `[m, k] x [k, n]` or batched rank-3
    /// `[b, m, k] x [b, k, n]` operands.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (batch, m, k, k2, n) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let data = bmm_raw(self.value().data(), other.value().data(), batch, m, k, n);
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::from_parts(shape, data);
        let (a, b) = (self.value_rc(), other.value_rc());
        let flops = 2 * (batch * m * k * n) as u64;
        Ok(self.tape().record(out, &[self, other], flops, move |g, needs| {
            let da = needs[0].then(|| {
                let bt = transpose_raw(b.data(), batch, k, n);
                Tensor::from_parts(a.shape().to_vec(), bmm_raw(g.data(), &bt, batch, m, n, k))
            });
            let db = needs[1].then(|| {
                let at = transpose_raw(a.data(), batch, m, k);
                Tensor::from_parts(b.shape().to_vec(), bmm_raw(&at, g.data(), batch, k, m, n))
            });
            vec![da, db]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: s.len(),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value().numel() / (r * c);
        let mut shape = s.to_vec();
        let rank = shape.len();
        shape.swap(rank - 2, rank - 1);
        let out = Tensor::from_parts(shape, transpose_raw(self.value().data(), batch, r, c));
        let in_shape = s.to_vec();
        Ok(self.tape().record(out, &[self], 0, move |g, _| {
            vec![Some(Tensor::from_parts(
                in_shape.clone(),
                transpose_raw(g.data(), batch, c, r),
            ))]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        let in_shape = self.shape().to_vec();
        Ok(self
            .tape()
            .record(out, &[self], 0, move |g, _| vec![Some(g.reshape(&in_shape).unwrap())]))
    }

    /// Expands extent-1 axes to `shape` (same rank).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let src = self.shape().to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1) {
            return Err(Error::shape("broadcast_to", &src, shape));
        }
        let axes: Vec<usize> = (0..src.len()).filter(|&i| src[i] != shape[i]).collect();
        let (_, map) = reduction_index(shape, &axes);
        let x = self.value().data();
        let data: Vec<T> = map.iter().map(|&i| x[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.tape().record(out, &[self], 0, move |g, _| {
            let mut acc = vec![T::zero(); numel_of(&src)];
            for (&o, &gv) in map.iter().zip(g.data()) {
                acc[o] += gv;
            }
            vec![Some(Tensor::from_parts(src.clone(), acc))]
        }))
    }

    /// Reduces over `axes`; reduced axes are kept as extent 1 when
    /// `keep_dims`, removed otherwise.
    pub fn reduce(&self, kind: Reduction, axes: &[usize], keep_dims: bool) -> Result<Var<'t, T>> {
        let shape = self.shape().to_vec();
        for (i, &a) in axes.iter().enumerate() {
            if a >= shape.len() {
                return Err(Error::InvalidAxis {
                    op: "reduce",
                    axis: a,
                    rank: shape.len(),
                });
            }
            if axes[..i].contains(&a) {
                return Err(Error::Config(format!("reduce: axis {a} listed twice")));
            }
        }
        let (kept, map) = reduction_index(&shape, axes);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let out_n = numel_of(&kept);
        let x = self.value().data();
        let out_shape: Vec<usize> = if keep_dims {
            kept.clone()
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &e)| e)
                .collect()
        };
        let flops = x.len() as u64;
        match kind {
            Reduction::Sum | Reduction::Mean => {
                let mut acc = vec![T::zero(); out_n];
                for (&o, &v) in map.iter().zip(x) {
                    acc[o] += v;
                }
                let factor = if kind == Reduction::Mean {
                    T::one() / T::lit(count as f64)
                } else {
                    T::one()
                };
                if kind == Reduction::Mean {
                    acc.iter_mut().for_each(|v| *v *= factor);
                }
                let out = Tensor::from_parts(out_shape, acc);
                Ok(self.tape().record(out, &[self], flops, move |g, _| {
                    let gd = g.data();
                    let data = map.iter().map(|&o| gd[o] * factor).collect();
                    vec![Some(Tensor::from_parts(shape.clone(), data))]
                }))
            }
            Reduction::Max => {
                let mut best = vec![T::neg_infinity(); out_n];
                let mut arg = vec![usize::MAX; out_n];
                for (i, (&o, &v)) in map.iter().zip(x).enumerate() {
                    if arg[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        arg[o] = i;
                    }
                }
                let out = Tensor::from_parts(out_shape, best);
                let n = x.len();
                Ok(self.tape().record(out, &[self], flops, move |g, _| {
                    let mut data = vec![T::zero(); n];
                    for (o, &i) in arg.iter().enumerate() {
                        data[i] += g.data()[o];
                    }
                    vec![Some(Tensor::from_parts(shape.clone(), data))]
                }))
            }
        }
    }

    pub fn sum(&self, axes: &[usize], keep_dims: bool) -> Result<Var<'t, T>> {
        self.reduce(Reduction::Sum, axes, keep_dims)
    }

    pub fn mean(&self, axes: &[usize], keep_dims: bool) -> Result<Var<'t, T>> {
        self.reduce(Reduction::Mean, axes, keep_dims)
    }

    pub fn max(&self, axes: &[usize], keep_dims: bool) -> Result<Var<'t, T>> {
        self.reduce(Reduction::Max, axes, keep_dims)
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&self) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let out = Tensor::scalar(self.value().sum());
        self.tape()
            .record(out, &[self], shape.iter().product::<usize>() as u64, move |g, _| {
                vec![Some(Tensor::full(&shape, g.data()[0]))]
            })
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("narrow [{start}, {}) out of range on axis {axis}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let x = self.value().data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            data.extend_from_slice(&x[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.tape().record(out, &[self], 0, move |g, _| {
            let mut full = vec![T::zero(); numel_of(&shape)];
            let gd = g.data();
            for o in 0..outer {
                let base = o * ext * inner;
                full[base + start * inner..base + (start + len) * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), full))]
        }))
    }
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<'t, T: Scalar>(parts: &[&Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::InvalidAxis {
            op: "concat",
            axis,
            rank,
        });
    }
    for p in parts {
        let ok = p.shape().len() == rank && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
        if !ok {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let exts: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = exts.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &e) in parts.iter().zip(&exts) {
            let x = p.value().data();
            data.extend_from_slice(&x[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let out = Tensor::from_parts(shape, data);
    let in_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
    Ok(first.tape().record(out, parts, 0, move |g, needs| {
        let gd = g.data();
        let mut offsets = vec![0usize; exts.len()];
        let mut acc = 0;
        for (i, &e) in exts.iter().enumerate() {
            offsets[i] = acc;
            acc += e;
        }
        exts.iter()
            .enumerate()
            .map(|(i, &e)| {
                needs[i].then(|| {
                    let mut d = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total + offsets[i]) * inner;
                        d.extend_from_slice(&gd[base..base + e * inner]);
                    }
                    Tensor::from_parts(in_shapes[i].clone(), d)
                })
            })
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let m = elementwise(ElementwiseOp::Mul, &a, Operand::Tensor(&b)).unwrap();
        assert_eq!(m.value().data(), &[3.0, 8.0]);
        let z = elementwise(ElementwiseOp::Add, &a, Operand::Scalar(0.0)).unwrap();
        assert_eq!(z.value(), a.value());
        let c = tape.constant(t(&[2], &[-0.5, 1.5]));
        let cl = elementwise(ElementwiseOp::Clamp, &c, Operand::Range(0.0, 1.0)).unwrap();
        assert_eq!(cl.value().data(), &[0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        match a.add(&b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn division_by_zero_is_domain_error() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[3], &[1.0, 0.0, 3.0]));
        assert!(matches!(a.div(&b), Err(Error::DivisionByZero { index: 1 })));
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::<f64>::new();
        // Hand expansion: [1*5 + 2*6, 3*5 + 4*6] = [17, 39].
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[17.0, 39.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(Tensor::from_fn(&[2, 5], |i| i as f64 * 0.3 - 1.0));
        assert_eq!(eye.matmul(&m).unwrap().value(), m.value());

        let z = tape.constant(Tensor::zeros(&[3, 4]));
        let r = tape.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        assert_eq!(z.matmul(&r).unwrap().value(), &Tensor::zeros(&[3, 2]));

        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(a.matmul(&bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_gradients() {
        let tape = Tape::<f64>::new();
        let a = tape.variable(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.variable(t(&[2, 1], &[5.0, 6.0]));
        let g = a.matmul(&b).unwrap().sum_all().backward().unwrap();
        // dA = 1·Bᵀ per row, dB = column sums of A.
        assert_eq!(g.wrt(&a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.wrt(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn reduce_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.sum(&[0], false).unwrap().value().data(), &[4.0, 6.0]);
        let c = tape.constant(Tensor::full(&[2, 3, 4], 0.7));
        let m = c.mean(&[0, 1, 2], false).unwrap();
        assert!((m.item().unwrap() - 0.7).abs() < 1e-15);
        let v = tape.constant(t(&[3], &[1.0, 5.0, 3.0]));
        assert_eq!(v.max(&[0], false).unwrap().item(), Some(5.0));
        assert_eq!(x.sum(&[1], true).unwrap().shape(), &[2, 1]);
        assert!(matches!(x.sum(&[2], false), Err(Error::InvalidAxis { axis: 2, .. })));
        assert!(x.sum(&[0, 0], false).is_err());
    }

    #[test]
    fn broadcast_and_back() {
        let tape = Tape::<f64>::new();
        let x = tape.variable(t(&[2, 1], &[1.0, 2.0]));
        let y = x.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(y.value().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let g = y.sum_all().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let tape = Tape::<f64>::new();
        let a = tape.variable(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let b = tape.variable(Tensor::from_fn(&[1, 3, 2, 2], |i| 100.0 + i as f64));
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2]);
        let back = c.narrow(1, 2, 3).unwrap();
        assert_eq!(back.value(), b.value());
        let g = back.sum_all().backward().unwrap();
        assert_eq!(g.wrt(&a).unwrap(), &Tensor::zeros(&[1, 2, 2, 2]));
        assert_eq!(g.wrt(&b).unwrap(), &Tensor::ones(&[1, 3, 2, 2]));
    }

    #[test]
    fn transpose_batched() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let y = x.transpose().unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert_eq!(&y.value().data()[..6], &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
