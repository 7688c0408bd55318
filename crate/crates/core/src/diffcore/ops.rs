//! Elementwise, reduction, shape and normalization primitives.

use super::tape::Var;
use super::tensor::{Scalar, Tensor};
use crate::error::{Result, SureError};

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SureError::invalid(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(self, f: impl Fn(T) -> T, deriv: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(&f);
        self.tape.record(
            y,
            &[self],
            Box::new(move |g, ops, out, _| {
                let x = ops[0].data();
                let y = out.data();
                let grad = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&x, &y))| g * deriv(x, y))
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::from_f64_lossy(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::from_f64_lossy(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    /// Natural logarithm; errors on non-positive entries.
    pub fn ln(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.value().data().iter().find(|v| **v <= T::zero()) {
            return Err(SureError::Numeric(format!(
                "ln of non-positive value {bad}"
            )));
        }
        Ok(self.unary(|x| x.ln(), |x, _| T::one() / x))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floor(self, floor: f64) -> Var<'t, T> {
        let floor = T::from_f64_lossy(floor);
        self.unary(
            move |x| x.max(floor).ln(),
            move |x, _| if x > floor { T::one() / x } else { T::zero() },
        )
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn softplus(self) -> Result<Var<'t, T>> {
        if self.value().data().iter().any(|v| v.is_nan()) {
            return Err(SureError::invalid("softplus of NaN"));
        }
        Ok(self.unary(softplus_scalar, |x, _| sigmoid_scalar(x)))
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// `x^c` for non-negative `x`.
    pub fn powf(self, c: f64) -> Var<'t, T> {
        let c = T::from_f64_lossy(c);
        self.unary(
            move |x| x.powf(c),
            move |x, _| {
                if c == T::zero() {
                    T::zero()
                } else {
                    c * x.powf(c - T::one())
                }
            },
        )
    }

    /// Log-gamma for positive entries; the derivative is the digamma function.
    pub fn ln_gamma(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.value().data().iter().find(|v| **v <= T::zero()) {
            return Err(SureError::Numeric(format!(
                "ln_gamma of non-positive value {bad}"
            )));
        }
        Ok(self.unary(|x| x.ln_gamma(), |x, _| x.digamma()))
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &str,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        same_shape(name, &a, &b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |g, ops, _, needs| {
                let (a, b) = (ops[0].data(), ops[1].data());
                let ga = needs[0].then(|| {
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(&g, (&x, &y))| g * da(x, y))
                        .collect()
                });
                let gb = needs[1].then(|| {
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(&g, (&x, &y))| g * db(x, y))
                        .collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            "sub",
            |x, y| x - y,
            |_, _| T::one(),
            |_, _| -T::one(),
        )
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            "div",
            |x, y| x / y,
            |_, y| T::one() / y,
            |x, y| -x / (y * y),
        )
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let n = x.numel();
        self.tape.record(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    /// Mean of all entries; the mean of an empty tensor is zero.
    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel();
        if n == 0 {
            return self.sum();
        }
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self
            .tape
            .record(out, &[self], Box::new(|g, _, _, _| vec![Some(g.to_vec())])))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let &[r, c] = x.shape() else {
            return Err(SureError::invalid(format!(
                "transpose needs rank 2, got {:?}",
                x.shape()
            )));
        };
        let out = Tensor::new(vec![c, r], transpose_data(x.data(), r, c))?;
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _, _, _| vec![Some(transpose_data(g, c, r))]),
        ))
    }

    /// Picks entries by flat index into a tensor of the given shape.
    pub fn gather(self, indices: &[usize], shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = x.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(SureError::invalid(format!(
                "gather index {bad} out of range for {n} elements"
            )));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let indices = indices.to_vec();
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _, _, _| {
                let mut grad = vec![T::zero(); n];
                for (&i, &gv) in indices.iter().zip(g) {
                    grad[i] = grad[i] + gv;
                }
                vec![Some(grad)]
            }),
        ))
    }

    /// Rows of a rank-2 tensor, in the given order (repeats allowed).
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let &[r, c] = shape.as_slice() else {
            return Err(SureError::invalid(format!(
                "gather_rows needs rank 2, got {shape:?}"
            )));
        };
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(SureError::invalid(format!(
                "row {bad} out of range for {r} rows"
            )));
        }
        let idx: Vec<usize> = rows
            .iter()
            .flat_map(|&row| (row * c)..(row * c + c))
            .collect();
        self.gather(&idx, &[rows.len(), c])
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(SureError::invalid(format!(
                "narrow axis {axis} [{start}, {}) out of range for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * dim + a) * inner;
                idx.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.gather(&idx, &out_shape)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(SureError::invalid(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if x.numel() == 0 {
            return Err(SureError::invalid("softmax of an empty tensor"));
        }
        let mut out = vec![T::zero(); x.numel()];
        if inner == 1 {
            for (xr, yr) in x.data().chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
                let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for (y, &v) in yr.iter_mut().zip(xr) {
                    *y = (v - m).exp();
                    z = z + *y;
                }
                yr.iter_mut().for_each(|y| *y = *y / z);
            }
        } else {
            // Row-major sweeps with one accumulator per inner position keep memory access contiguous.
            let (mut m, mut z) = (vec![T::neg_infinity(); inner], vec![T::zero(); inner]);
            for (xo, yo) in x
                .data()
                .chunks_exact(dim * inner)
                .zip(out.chunks_exact_mut(dim * inner))
            {
                m.fill(T::neg_infinity());
                z.fill(T::zero());
                for row in xo.chunks_exact(inner) {
                    for (mi, &v) in m.iter_mut().zip(row) {
                        *mi = mi.max(v);
                    }
                }
                for (xr, yr) in xo.chunks_exact(inner).zip(yo.chunks_exact_mut(inner)) {
                    for (((y, &v), &mi), zi) in yr.iter_mut().zip(xr).zip(&m).zip(z.iter_mut()) {
                        *y = (v - mi).exp();
                        *zi = *zi + *y;
                    }
                }
                for yr in yo.chunks_exact_mut(inner) {
                    for (y, &zi) in yr.iter_mut().zip(&z) {
                        *y = *y / zi;
                    }
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _, y, _| {
                let yd = y.data();
                let mut grad = vec![T::zero(); yd.len()];
                let mut dot = vec![T::zero(); inner];
                let block = dim * inner;
                for ((go, yo), out) in g
                    .chunks_exact(block)
                    .zip(yd.chunks_exact(block))
                    .zip(grad.chunks_exact_mut(block))
                {
                    dot.fill(T::zero());
                    for (gr, yr) in go.chunks_exact(inner).zip(yo.chunks_exact(inner)) {
                        for ((d, &gv), &yv) in dot.iter_mut().zip(gr).zip(yr) {
                            *d = *d + gv * yv;
                        }
                    }
                    for ((gr, yr), orow) in go
                        .chunks_exact(inner)
                        .zip(yo.chunks_exact(inner))
                        .zip(out.chunks_exact_mut(inner))
                    {
                        for (((o, &gv), &yv), &d) in orow.iter_mut().zip(gr).zip(yr).zip(&dot) {
                            *o = yv * (gv - d);
                        }
                    }
                }
                vec![Some(grad)]
            }),
        ))
    }

    /// `x[c, ..] * s[c]` for a per-channel vector `s`.
    pub fn mul_channels(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let sv = s.value();
        let c = channels_check("mul_channels", &x, &sv)?;
        let inner = x.numel() / c.max(1);
        let mut out = x.data().to_vec();
        for ch in 0..c {
            let f = sv.data()[ch];
            out[ch * inner..(ch + 1) * inner]
                .iter_mut()
                .for_each(|v| *v = *v * f);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(
            out,
            &[self, s],
            Box::new(move |g, ops, _, needs| {
                let (x, s) = (ops[0].data(), ops[1].data());
                let gx = needs[0].then(|| {
                    let mut gx = g.to_vec();
                    for ch in 0..c {
                        gx[ch * inner..(ch + 1) * inner]
                            .iter_mut()
                            .for_each(|v| *v = *v * s[ch]);
                    }
                    gx
                });
                let gs = needs[1].then(|| {
                    (0..c)
                        .map(|ch| {
                            let r = ch * inner..(ch + 1) * inner;
                            g[r.clone()].iter().zip(&x[r]).map(|(&a, &b)| a * b).sum()
                        })
                        .collect()
                });
                vec![gx, gs]
            }),
        ))
    }

    /// `x[c, ..] + b[c]` for a per-channel vector `b`.
    pub fn add_channels(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let bv = b.value();
        let c = channels_check("add_channels", &x, &bv)?;
        let inner = x.numel() / c.max(1);
        let mut out = x.data().to_vec();
        for ch in 0..c {
            let f = bv.data()[ch];
            out[ch * inner..(ch + 1) * inner]
                .iter_mut()
                .for_each(|v| *v = *v + f);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(
            out,
            &[self, b],
            Box::new(move |g, _, _, needs| {
                let gx = needs[0].then(|| g.to_vec());
                let gb = needs[1].then(|| {
                    (0..c)
                        .map(|ch| g[ch * inner..(ch + 1) * inner].iter().copied().sum())
                        .collect()
                });
                vec![gx, gb]
            }),
        ))
    }
}

fn channels_check<T: Scalar>(op: &str, x: &Tensor<T>, v: &Tensor<T>) -> Result<usize> {
    let c = *x
        .shape()
        .first()
        .ok_or_else(|| SureError::invalid(format!("{op}: scalar input")))?;
    if v.shape() != [c] {
        return Err(SureError::invalid(format!(
            "{op}: per-channel vector {:?} does not match {c} channels",
            v.shape()
        )));
    }
    Ok(c)
}

pub(crate) fn transpose_data<T: Copy>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    const TILE: usize = 32;
    let mut out = x.to_vec();
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
    out
}

/// Concatenates tensors along `axis`; all other dimensions must agree.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| SureError::invalid("concat of zero tensors"))?;
    let tape = first.tape;
    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
    let rank = shapes[0].len();
    if axis >= rank {
        return Err(SureError::invalid(format!(
            "concat axis {axis} out of range"
        )));
    }
    for s in &shapes {
        if s.len() != rank
            || s.iter()
                .enumerate()
                .any(|(d, &n)| d != axis && n != shapes[0][d])
        {
            return Err(SureError::invalid(format!(
                "concat shape mismatch {:?} vs {:?}",
                s, shapes[0]
            )));
        }
    }
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let dims: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
    let total: usize = dims.iter().sum();
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &d) in values.iter().zip(&dims) {
            out.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
        }
    }
    let mut out_shape = shapes[0].clone();
    out_shape[axis] = total;
    let out = Tensor::new(out_shape, out)?;
    Ok(tape.record(
        out,
        parts,
        Box::new(move |g, _, _, needs| {
            let mut grads: Vec<Option<Vec<T>>> = needs
                .iter()
                .zip(&dims)
                .map(|(&n, &d)| n.then(|| Vec::with_capacity(outer * d * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &d) in grads.iter_mut().zip(&dims) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + d * inner]);
                    }
                    off += d * inner;
                }
            }
            grads
        }),
    ))
}
