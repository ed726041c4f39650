//! Forward and backward kernels for the supported layer types.

use crate::tensor::{matmul, Mat, Real, Tensor};

/// Target number of im2col columns per GEMM call.
const CHUNK_COLS: usize = 8192;

pub fn conv_out_side(side: usize, k: usize, stride: usize) -> usize {
    (side + 2 * (k / 2) - k) / stride + 1
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(shape: [usize; 4], k: usize, s: usize) -> Self {
        let [_, c, h, w] = shape;
        ConvGeom {
            c,
            h,
            w,
            k,
            s,
            p: k / 2,
            ho: conv_out_side(h, k, s),
            wo: conv_out_side(w, k, s),
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    fn images_per_chunk(&self) -> usize {
        (CHUNK_COLS / self.plane()).max(1)
    }

    /// Unfold images `[b0, b1)` into `cols[rows, n]`.
    fn im2col<T: Real>(&self, x: &[T], b0: usize, b1: usize, cols: &mut [T]) {
        let n = (b1 - b0) * self.plane();
        let item = self.c * self.h * self.w;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for (bi, b) in (b0..b1).enumerate() {
                        let plane = &x[b * item + ci * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let d = &mut dst[(bi * self.ho + oy) * self.wo..][..self.wo];
                            let iy = (oy * self.s + ky) as isize - self.p as isize;
                            if iy < 0 || iy >= self.h as isize {
                                d.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let src = &plane[iy as usize * self.w..][..self.w];
                            for (ox, dv) in d.iter_mut().enumerate() {
                                let ix = (ox * self.s + kx) as isize - self.p as isize;
                                *dv = if ix < 0 || ix >= self.w as isize {
                                    T::zero()
                                } else {
                                    src[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fold `cols[rows, n]` back onto images `[b0, b1)` additively.
    fn col2im<T: Real>(&self, cols: &[T], b0: usize, b1: usize, dx: &mut [T]) {
        let n = (b1 - b0) * self.plane();
        let item = self.c * self.h * self.w;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for (bi, b) in (b0..b1).enumerate() {
                        let plane = &mut dx[b * item + ci * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let iy = (oy * self.s + ky) as isize - self.p as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let s = &src[(bi * self.ho + oy) * self.wo..][..self.wo];
                            let d = &mut plane[iy as usize * self.w..][..self.w];
                            for (ox, &v) in s.iter().enumerate() {
                                let ix = (ox * self.s + kx) as isize - self.p as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    d[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with `k/2` zero padding. `w` is `[cout, cin*k*k]`.
pub fn conv_forward<T: Real>(x: &Tensor<T>, w: &[T], bias: &[T], cout: usize, k: usize, stride: usize) -> Tensor<T> {
    let g = ConvGeom::new(x.shape(), k, stride);
    let bsz = x.batch();
    let plane = g.plane();
    let mut out = Tensor::zeros([bsz, cout, g.ho, g.wo]);
    let per = g.images_per_chunk();
    let mut cols = Vec::new();
    let mut res = Vec::new();
    let mut b0 = 0;
    while b0 < bsz {
        let b1 = (b0 + per).min(bsz);
        let n = (b1 - b0) * plane;
        cols.resize(g.rows() * n, T::zero());
        res.resize(cout * n, T::zero());
        g.im2col(x.data(), b0, b1, &mut cols);
        matmul(
            Mat::new(w, cout, g.rows()),
            Mat::new(&cols, g.rows(), n),
            &mut res,
            false,
        );
        let od = out.data_mut();
        for (bi, b) in (b0..b1).enumerate() {
            for (co, &bv) in bias.iter().enumerate() {
                let src = &res[co * n + bi * plane..][..plane];
                let dst = &mut od[(b * cout + co) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        b0 = b1;
    }
    out
}

/// Backward of [`conv_forward`]. Accumulates into `dw`/`db` when given and
/// returns the input gradient when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    gout: &Tensor<T>,
    k: usize,
    stride: usize,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), k, stride);
    let cout = gout.channels();
    let bsz = x.batch();
    let plane = g.plane();
    let per = g.images_per_chunk();
    let mut dx = need_dx.then(|| x.zeros_like());
    let mut cols = Vec::new();
    let mut gmat = Vec::new();
    let mut b0 = 0;
    while b0 < bsz {
        let b1 = (b0 + per).min(bsz);
        let n = (b1 - b0) * plane;
        gmat.resize(cout * n, T::zero());
        let gd = gout.data();
        for (bi, b) in (b0..b1).enumerate() {
            for co in 0..cout {
                gmat[co * n + bi * plane..][..plane].copy_from_slice(&gd[(b * cout + co) * plane..][..plane]);
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += gmat[co * n..(co + 1) * n].iter().copied().sum::<T>();
            }
        }
        if dw.is_some() || need_dx {
            cols.resize(g.rows() * n, T::zero());
        }
        if let Some(dw) = dw.as_deref_mut() {
            g.im2col(x.data(), b0, b1, &mut cols);
            matmul(Mat::new(&gmat, cout, n), Mat::new(&cols, g.rows(), n).t(), dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            matmul(
                Mat::new(w, cout, g.rows()).t(),
                Mat::new(&gmat, cout, n),
                &mut cols,
                false,
            );
            g.col2im(&cols, b0, b1, dx.data_mut());
        }
        b0 = b1;
    }
    dx
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    x.zip_map(g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })
}

/// Non-overlapping max pooling; returns output and flat argmax per output.
pub fn maxpool_forward<T: Real>(x: &Tensor<T>, k: usize) -> (Tensor<T>, Vec<u32>) {
    let [b, c, h, w] = x.shape();
    let (ho, wo) = (h / k, w / k);
    let mut out = Tensor::zeros([b, c, ho, wo]);
    let mut arg = vec![0u32; b * c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = p * h * w + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = p * h * w + (oy * k + dy) * w + ox * k + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                od[o] = xd[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Real>(in_shape: [usize; 4], arg: &[u32], g: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (&a, &gv) in arg.iter().zip(g.data()) {
        d[a as usize] += gv;
    }
    dx
}

pub fn avgpool_forward<T: Real>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let (ho, wo) = (h / k, w / k);
    let inv = T::lit(1.0 / (k * k) as f64);
    let mut out = Tensor::zeros([b, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        s += xd[p * h * w + (oy * k + dy) * w + ox * k + dx];
                    }
                }
                od[p * ho * wo + oy * wo + ox] = s * inv;
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Real>(in_shape: [usize; 4], k: usize, g: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = in_shape;
    let [b, c, ho, wo] = g.shape();
    let inv = T::lit(1.0 / (k * k) as f64);
    let mut dx = Tensor::zeros(in_shape);
    let gd = g.data();
    let d = dx.data_mut();
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let v = gd[p * ho * wo + oy * wo + ox] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        d[p * h * w + (oy * k + dy) * w + ox * k + dx] += v;
                    }
                }
            }
        }
    }
    dx
}

pub fn gap_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let inv = T::lit(1.0 / (h * w) as f64);
    let data = x
        .data()
        .chunks(h * w)
        .map(|pl| pl.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([b, c, 1, 1], data).expect("gap shape")
}

pub fn gap_backward<T: Real>(in_shape: [usize; 4], g: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = in_shape;
    let inv = T::lit(1.0 / (h * w) as f64);
    let data = g
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v * inv, h * w))
        .collect();
    Tensor::from_vec(in_shape, data).expect("gap shape")
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over each item; returns output, means and inverse
/// standard deviations.
pub fn layernorm_forward<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let d = x.item_len();
    let mut out = x.zeros_like();
    let mut means = Vec::with_capacity(x.batch());
    let mut rstds = Vec::with_capacity(x.batch());
    for b in 0..x.batch() {
        let xi = x.item(b);
        let mean = xi.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = xi.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let (m, r) = (T::lit(mean), T::lit(rstd));
        for (i, o) in out.item_mut(b).iter_mut().enumerate() {
            *o = (xi[i] - m) * r * gamma[i] + beta[i];
        }
        means.push(m);
        rstds.push(r);
    }
    (out, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    g: &Tensor<T>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) -> Tensor<T> {
    let d = x.item_len();
    let inv_d = T::lit(1.0 / d as f64);
    let mut dx = x.zeros_like();
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for b in 0..x.batch() {
        let (xi, gi) = (x.item(b), g.item(b));
        let (m, r) = (means[b], rstds[b]);
        for i in 0..d {
            xhat[i] = (xi[i] - m) * r;
            dxhat[i] = gi[i] * gamma[i];
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            for i in 0..d {
                dg[i] += gi[i] * xhat[i];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for i in 0..d {
                db[i] += gi[i];
            }
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for (i, o) in dx.item_mut(b).iter_mut().enumerate() {
            *o = r * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
    dx
}

/// `y = x W^T + b` with `W` `[dout, din]` and `x` flattened per item.
pub fn linear_forward<T: Real>(x: &Tensor<T>, w: &[T], bias: &[T], dout: usize) -> Tensor<T> {
    let (b, din) = (x.batch(), x.item_len());
    let mut out = vec![T::zero(); b * dout];
    for row in out.chunks_mut(dout) {
        row.copy_from_slice(bias);
    }
    matmul(Mat::new(x.data(), b, din), Mat::new(w, dout, din).t(), &mut out, true);
    Tensor::matrix(b, dout, out).expect("linear shape")
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    g: &Tensor<T>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (b, din) = (x.batch(), x.item_len());
    let dout = g.item_len();
    if let Some(dw) = dw {
        matmul(Mat::new(g.data(), b, dout).t(), Mat::new(x.data(), b, din), dw, true);
    }
    if let Some(db) = db {
        for row in g.data().chunks(dout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    need_dx.then(|| {
        let mut dx = vec![T::zero(); b * din];
        matmul(Mat::new(g.data(), b, dout), Mat::new(w, dout, din), &mut dx, false);
        Tensor::from_vec(x.shape(), dx).expect("linear dx shape")
    })
}
