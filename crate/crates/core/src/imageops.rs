//! Differentiable spatial resampling: nearest/bilinear resize and zero
//! padding, each with an exact adjoint for backpropagation.

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interp {
    Nearest,
    Bilinear,
}

/// Per-output-coordinate interpolation taps along one axis.
#[derive(Clone, Debug)]
struct Axis {
    i0: Vec<usize>,
    i1: Vec<usize>,
    w0: Vec<f64>,
    w1: Vec<f64>,
}

impl Axis {
    fn weights<T: Real>(&self) -> (Vec<T>, Vec<T>) {
        (
            self.w0.iter().map(|&v| T::lit(v)).collect(),
            self.w1.iter().map(|&v| T::lit(v)).collect(),
        )
    }

    fn new(inp: usize, out: usize, mode: Interp) -> Self {
        let scale = inp as f64 / out as f64;
        let mut a = Axis {
            i0: Vec::with_capacity(out),
            i1: Vec::with_capacity(out),
            w0: Vec::with_capacity(out),
            w1: Vec::with_capacity(out),
        };
        for d in 0..out {
            match mode {
                Interp::Nearest => {
                    let s = ((d as f64 * scale).floor() as usize).min(inp - 1);
                    a.i0.push(s);
                    a.i1.push(s);
                    a.w0.push(1.0);
                    a.w1.push(0.0);
                }
                Interp::Bilinear => {
                    let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                    let s0 = (src.floor() as usize).min(inp - 1);
                    let s1 = if s0 + 1 < inp { s0 + 1 } else { s0 };
                    let l1 = src - s0 as f64;
                    a.i0.push(s0);
                    a.i1.push(s1);
                    a.w0.push(1.0 - l1);
                    a.w1.push(l1);
                }
            }
        }
        a
    }
}

/// One step of a spatial warp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WarpOp {
    Resize {
        h: usize,
        w: usize,
        mode: Interp,
    },
    /// Zero-pad into an `h x w` canvas at offset `(top, left)`.
    Pad {
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    },
}

/// A recorded sequence of spatial ops with its input size, replayable as
/// forward map and adjoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Warp {
    pub ops: Vec<WarpOp>,
}

impl Warp {
    pub fn identity() -> Self {
        Warp { ops: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn push(&mut self, op: WarpOp) {
        self.ops.push(op);
    }

    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for op in &self.ops {
            cur = apply_op(op, &cur);
        }
        cur
    }

    /// Transpose of [`Warp::apply`] for an input of spatial size `in_hw`.
    pub fn adjoint<T: Real>(&self, g: &Tensor<T>, in_hw: (usize, usize)) -> Tensor<T> {
        let mut sizes = vec![in_hw];
        for op in &self.ops {
            let (h, w) = match *op {
                WarpOp::Resize { h, w, .. } | WarpOp::Pad { h, w, .. } => (h, w),
            };
            sizes.push((h, w));
        }
        let mut cur = g.clone();
        for (i, op) in self.ops.iter().enumerate().rev() {
            cur = adjoint_op(op, &cur, sizes[i]);
        }
        cur
    }
}

fn apply_op<T: Real>(op: &WarpOp, x: &Tensor<T>) -> Tensor<T> {
    match *op {
        WarpOp::Resize { h, w, mode } => resize(x, h, w, mode),
        WarpOp::Pad { top, left, h, w } => pad(x, top, left, h, w),
    }
}

fn adjoint_op<T: Real>(op: &WarpOp, g: &Tensor<T>, in_hw: (usize, usize)) -> Tensor<T> {
    match *op {
        WarpOp::Resize { mode, .. } => resize_adjoint(g, in_hw.0, in_hw.1, mode),
        WarpOp::Pad { top, left, .. } => crop(g, top, left, in_hw.0, in_hw.1),
    }
}

/// Resize every plane to `h x w` (PyTorch `interpolate` conventions,
/// `align_corners=False`), as a row pass followed by a column pass.
pub fn resize<T: Real>(x: &Tensor<T>, h: usize, w: usize, mode: Interp) -> Tensor<T> {
    let [b, c, ih, iw] = x.shape();
    if (ih, iw) == (h, w) {
        return x.clone();
    }
    let ay = Axis::new(ih, h, mode);
    let ax = Axis::new(iw, w, mode);
    let (wx0, wx1) = ax.weights::<T>();
    let (wy0, wy1) = ay.weights::<T>();
    let mut out = Tensor::zeros([b, c, h, w]);
    let mut rows = vec![T::zero(); ih * w];
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        let sp = &src[p * ih * iw..(p + 1) * ih * iw];
        for (srow, trow) in sp.chunks_exact(iw).zip(rows.chunks_exact_mut(w)) {
            for ox in 0..w {
                trow[ox] = wx0[ox] * srow[ax.i0[ox]] + wx1[ox] * srow[ax.i1[ox]];
            }
        }
        let dp = &mut dst[p * h * w..(p + 1) * h * w];
        for (oy, drow) in dp.chunks_exact_mut(w).enumerate() {
            let r0 = &rows[ay.i0[oy] * w..(ay.i0[oy] + 1) * w];
            let r1 = &rows[ay.i1[oy] * w..(ay.i1[oy] + 1) * w];
            let (a, bb) = (wy0[oy], wy1[oy]);
            for ((d, &u), &v) in drow.iter_mut().zip(r0).zip(r1) {
                *d = a * u + bb * v;
            }
        }
    }
    out
}

/// Adjoint of [`resize`] back to `h x w`.
pub fn resize_adjoint<T: Real>(g: &Tensor<T>, h: usize, w: usize, mode: Interp) -> Tensor<T> {
    let [b, c, oh, ow] = g.shape();
    if (oh, ow) == (h, w) {
        return g.clone();
    }
    let ay = Axis::new(h, oh, mode);
    let ax = Axis::new(w, ow, mode);
    let (wx0, wx1) = ax.weights::<T>();
    let (wy0, wy1) = ay.weights::<T>();
    let mut out = Tensor::zeros([b, c, h, w]);
    let mut rows = vec![T::zero(); h * ow];
    let src = g.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        rows.iter_mut().for_each(|v| *v = T::zero());
        let gp = &src[p * oh * ow..(p + 1) * oh * ow];
        for (oy, grow) in gp.chunks_exact(ow).enumerate() {
            let (a, bb) = (wy0[oy], wy1[oy]);
            let r0 = ay.i0[oy] * ow;
            for (t, &v) in rows[r0..r0 + ow].iter_mut().zip(grow) {
                *t += a * v;
            }
            let r1 = ay.i1[oy] * ow;
            for (t, &v) in rows[r1..r1 + ow].iter_mut().zip(grow) {
                *t += bb * v;
            }
        }
        let dp = &mut dst[p * h * w..(p + 1) * h * w];
        for (trow, drow) in rows.chunks_exact(ow).zip(dp.chunks_exact_mut(w)) {
            for ox in 0..ow {
                let v = trow[ox];
                drow[ax.i0[ox]] += wx0[ox] * v;
                drow[ax.i1[ox]] += wx1[ox] * v;
            }
        }
    }
    out
}

/// Zero-pad each plane into an `h x w` canvas at `(top, left)`.
pub fn pad<T: Real>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
    let [b, c, ih, iw] = x.shape();
    assert!(top + ih <= h && left + iw <= w, "padding canvas too small");
    let mut out = Tensor::zeros([b, c, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        for y in 0..ih {
            let s = p * ih * iw + y * iw;
            let d = p * h * w + (y + top) * w + left;
            dst[d..d + iw].copy_from_slice(&src[s..s + iw]);
        }
    }
    out
}

/// Extract the `h x w` window at `(top, left)`; adjoint of [`pad`].
pub fn crop<T: Real>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
    let [b, c, ih, iw] = x.shape();
    assert!(top + h <= ih && left + w <= iw, "crop window out of range");
    let mut out = Tensor::zeros([b, c, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        for y in 0..h {
            let s = p * ih * iw + (y + top) * iw + left;
            let d = p * h * w + y * w;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random::<f64>() - 0.5).collect()).unwrap()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn adjoint_identity_holds_for_warps() {
        let mut warp = Warp::identity();
        warp.push(WarpOp::Resize {
            h: 11,
            w: 11,
            mode: Interp::Nearest,
        });
        warp.push(WarpOp::Pad {
            top: 1,
            left: 0,
            h: 12,
            w: 12,
        });
        warp.push(WarpOp::Resize {
            h: 10,
            w: 10,
            mode: Interp::Bilinear,
        });
        let x = rand_tensor([2, 3, 10, 10], 1);
        let g = rand_tensor([2, 3, 10, 10], 2);
        let lhs = dot(&warp.apply(&x), &g);
        let rhs = dot(&x, &warp.adjoint(&g, (10, 10)));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn bilinear_matches_hand_values() {
        // 2 -> 4 upsample of [0, 1]: src coords -0.25(clamped 0), 0.25, 0.75, 1.25
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = resize(&x, 1, 4, Interp::Bilinear);
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
        let n = resize(&x, 1, 4, Interp::Nearest);
        assert_eq!(n.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn bilinear_matches_direct_four_tap_formula() {
        let x = rand_tensor([1, 2, 7, 9], 4);
        let (h, w) = (10, 6);
        let y = resize(&x, h, w, Interp::Bilinear);
        let tap = |inp: usize, out: usize, d: usize| {
            let src = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
            let s0 = (src.floor() as usize).min(inp - 1);
            ((s0, (s0 + 1).min(inp - 1)), src - s0 as f64)
        };
        for c in 0..2 {
            for oy in 0..h {
                let ((y0, y1), ly) = tap(7, h, oy);
                for ox in 0..w {
                    let ((x0, x1), lx) = tap(9, w, ox);
                    let v = (1.0 - ly) * ((1.0 - lx) * x.at(0, c, y0, x0) + lx * x.at(0, c, y0, x1))
                        + ly * ((1.0 - lx) * x.at(0, c, y1, x0) + lx * x.at(0, c, y1, x1));
                    assert!((y.at(0, c, oy, ox) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let x = rand_tensor([1, 2, 5, 5], 3);
        assert_eq!(resize(&x, 5, 5, Interp::Bilinear), x);
    }

    #[test]
    fn pad_then_crop_recovers_input() {
        let x = rand_tensor([1, 1, 3, 4], 4);
        let p = pad(&x, 1, 2, 5, 7);
        assert_eq!(crop(&p, 1, 2, 3, 4), x);
        let total: f64 = p.data().iter().sum();
        let orig: f64 = x.data().iter().sum();
        assert!((total - orig).abs() < 1e-12);
    }
}
