//! Matrix products, convolutions and pooling.

use super::tape::Var;
use super::tensor::{Scalar, Tensor};
use crate::error::{Result, SureError};

/// Geometry of a strided, zero-padded 1-D or 2-D sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const SAME3: ConvSpec = ConvSpec {
        stride: 1,
        padding: 1,
    };
    pub const DOWN3: ConvSpec = ConvSpec {
        stride: 2,
        padding: 1,
    };
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        padding: 0,
    };

    fn out_len(&self, len: usize, k: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(SureError::invalid("convolution stride must be >= 1"));
        }
        if k > len + 2 * self.padding {
            return Err(SureError::invalid(format!(
                "kernel {k} larger than padded input {}",
                len + 2 * self.padding
            )));
        }
        Ok((len + 2 * self.padding - k) / self.stride + 1)
    }
}

fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::zero(),
        c,
        n as isize,
        1,
    );
}

/// `c[m,n] = a[m,k] * b[n,k]^T`
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        T::zero(),
        c,
        n as isize,
        1,
    );
}

/// `c[m,n] = a[k,m]^T * b[k,n]`
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        1,
        m as isize,
        b,
        n as isize,
        1,
        T::zero(),
        c,
        n as isize,
        1,
    );
}

impl<'t, T: Scalar> Var<'t, T> {
    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(SureError::invalid(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        };
        if k != k2 {
            return Err(SureError::invalid(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, a.data(), b.data(), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |g, ops, _, needs| {
                let (a, b) = (ops[0].data(), ops[1].data());
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g, b, &mut ga);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, a, g, &mut gb);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, K, K]` plus bias `[C_out]`.
    pub fn conv2d(
        self,
        kernel: Var<'t, T>,
        bias: Var<'t, T>,
        spec: ConvSpec,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = kernel.value();
        let b = bias.value();
        let (&[cin, h, wd], &[cout, cin2, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(SureError::invalid(format!(
                "conv2d expects [C,H,W] input and [O,C,K,K] kernel, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        };
        if cin != cin2 || kh != kw || b.shape() != [cout] {
            return Err(SureError::invalid(format!(
                "conv2d shape mismatch: input {:?}, kernel {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let k = kh;
        let ho = spec.out_len(h, k)?;
        let wo = spec.out_len(wd, k)?;
        let ckk = cin * k * k;
        let npos = ho * wo;
        let geom = Im2Col2d {
            cin,
            h,
            w: wd,
            k,
            ho,
            wo,
            spec,
        };
        let cols = geom.im2col(x.data());
        let mut out = vec![T::zero(); cout * npos];
        gemm_nn(cout, ckk, npos, w.data(), &cols, &mut out);
        for (o, chunk) in out.chunks_mut(npos.max(1)).enumerate().take(cout) {
            let bo = b.data()[o];
            chunk.iter_mut().for_each(|v| *v = *v + bo);
        }
        let out = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.tape.record(
            out,
            &[self, kernel, bias],
            Box::new(move |g, ops, _, needs| {
                let w = ops[1].data();
                let gx = needs[0].then(|| {
                    let mut gcols = vec![T::zero(); ckk * npos];
                    gemm_tn(ckk, cout, npos, w, g, &mut gcols);
                    geom.col2im(&gcols)
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); cout * ckk];
                    gemm_nt(cout, npos, ckk, g, &cols, &mut gw);
                    gw
                });
                let gb = needs[2].then(|| {
                    (0..cout)
                        .map(|o| g[o * npos..(o + 1) * npos].iter().copied().sum())
                        .collect()
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Batched 1-D cross-correlation: `[M, C_in, L]` with `[C_out, C_in, K]` plus bias `[C_out]`.
    pub fn conv1d(
        self,
        kernel: Var<'t, T>,
        bias: Var<'t, T>,
        spec: ConvSpec,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = kernel.value();
        let b = bias.value();
        let (&[m, cin, len], &[cout, cin2, k]) = (x.shape(), w.shape()) else {
            return Err(SureError::invalid(format!(
                "conv1d expects [M,C,L] input and [O,C,K] kernel, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        };
        if cin != cin2 || b.shape() != [cout] {
            return Err(SureError::invalid(format!(
                "conv1d shape mismatch: input {:?}, kernel {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let lo = spec.out_len(len, k)?;
        let ck = cin * k;
        let ncols = m * lo;
        // cols[(c, kk), (s, l)] = x[s, c, l*stride + kk - pad]
        let mut cols = vec![T::zero(); ck * ncols];
        let src = |s: usize, c: usize, l: usize, kk: usize| -> Option<usize> {
            let pos = (l * spec.stride + kk) as isize - spec.padding as isize;
            (pos >= 0 && (pos as usize) < len).then(|| (s * cin + c) * len + pos as usize)
        };
        for c in 0..cin {
            for kk in 0..k {
                let row = (c * k + kk) * ncols;
                for s in 0..m {
                    for l in 0..lo {
                        if let Some(i) = src(s, c, l, kk) {
                            cols[row + s * lo + l] = x.data()[i];
                        }
                    }
                }
            }
        }
        let mut prod = vec![T::zero(); cout * ncols];
        gemm_nn(cout, ck, ncols, w.data(), &cols, &mut prod);
        let mut out = vec![T::zero(); m * cout * lo];
        for o in 0..cout {
            for s in 0..m {
                for l in 0..lo {
                    out[(s * cout + o) * lo + l] = prod[o * ncols + s * lo + l] + b.data()[o];
                }
            }
        }
        let out = Tensor::new(vec![m, cout, lo], out)?;
        let stride = spec.stride;
        let pad = spec.padding;
        Ok(self.tape.record(
            out,
            &[self, kernel, bias],
            Box::new(move |g, ops, _, needs| {
                let w = ops[1].data();
                // upstream reordered to [C_out, (s, l)]
                let mut gp = vec![T::zero(); cout * ncols];
                for s in 0..m {
                    for o in 0..cout {
                        for l in 0..lo {
                            gp[o * ncols + s * lo + l] = g[(s * cout + o) * lo + l];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gcols = vec![T::zero(); ck * ncols];
                    gemm_tn(ck, cout, ncols, w, &gp, &mut gcols);
                    let mut gx = vec![T::zero(); m * cin * len];
                    for c in 0..cin {
                        for kk in 0..k {
                            let row = (c * k + kk) * ncols;
                            for s in 0..m {
                                for l in 0..lo {
                                    let pos = (l * stride + kk) as isize - pad as isize;
                                    if pos >= 0 && (pos as usize) < len {
                                        let i = (s * cin + c) * len + pos as usize;
                                        gx[i] = gx[i] + gcols[row + s * lo + l];
                                    }
                                }
                            }
                        }
                    }
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); cout * ck];
                    gemm_nt(cout, ncols, ck, &gp, &cols, &mut gw);
                    gw
                });
                let gb = needs[2].then(|| {
                    (0..cout)
                        .map(|o| gp[o * ncols..(o + 1) * ncols].iter().copied().sum())
                        .collect()
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Non-overlapping `window x window` mean pooling of `[C, H, W]`.
    pub fn avg_pool2d(self, window: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let &[c, h, w] = x.shape() else {
            return Err(SureError::invalid(format!(
                "avg_pool2d expects [C,H,W], got {:?}",
                x.shape()
            )));
        };
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(SureError::invalid(format!(
                "avg_pool2d window {window} does not tile {h}x{w}"
            )));
        }
        let (ho, wo) = (h / window, w / window);
        let norm = T::one() / T::from_usize(window * window).unwrap();
        let mut out = vec![T::zero(); c * ho * wo];
        let xd = x.data();
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let o = (ch * ho + y / window) * wo + xx / window;
                    out[o] = out[o] + xd[(ch * h + y) * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * norm);
        let out = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(ch * h + y) * w + xx] =
                                g[(ch * ho + y / window) * wo + xx / window] * norm;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[derive(Clone, Copy)]
struct Im2Col2d {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Im2Col2d {
    /// Output positions `lo..hi` along one axis whose input index lies in `0..len`,
    /// together with the input index of `lo`.
    fn valid(&self, out_len: usize, koff: usize, len: usize) -> (usize, usize, usize) {
        let (s, p) = (self.spec.stride, self.spec.padding);
        let lo = if koff >= p { 0 } else { (p - koff).div_ceil(s) };
        let hi = if len + p > koff {
            ((len + p - koff - 1) / s + 1).min(out_len)
        } else {
            0
        };
        let lo = lo.min(hi);
        (lo, hi, (lo * s + koff).saturating_sub(p))
    }

    /// Calls `f(input offset, column offset, count)` for each contiguous run of
    /// valid taps; consecutive inputs within a run are `stride` apart.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let npos = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.k {
                let (ylo, yhi, y0) = self.valid(self.ho, ky, self.h);
                for kx in 0..self.k {
                    let (xlo, xhi, x0) = self.valid(self.wo, kx, self.w);
                    if xhi == xlo {
                        continue;
                    }
                    let row = ((c * self.k + ky) * self.k + kx) * npos;
                    for (n, oy) in (ylo..yhi).enumerate() {
                        let y = y0 + n * self.spec.stride;
                        f(
                            (c * self.h + y) * self.w + x0,
                            row + oy * self.wo + xlo,
                            xhi - xlo,
                        );
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.cin * self.k * self.k * self.ho * self.wo];
        let s = self.spec.stride;
        self.for_each_run(|src, dst, n| {
            let out = &mut cols[dst..dst + n];
            if s == 1 {
                out.copy_from_slice(&x[src..src + n]);
            } else {
                for (o, v) in out.iter_mut().zip(x[src..].iter().step_by(s)) {
                    *o = *v;
                }
            }
        });
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let mut x = vec![T::zero(); self.cin * self.h * self.w];
        let s = self.spec.stride;
        self.for_each_run(|src, dst, n| {
            for (i, &v) in cols[dst..dst + n].iter().enumerate() {
                x[src + i * s] = x[src + i * s] + v;
            }
        });
        x
    }
}
