//! Input diversity, gradient smoothing, scale copies, admixing and
//! variance tuning.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{Interp, Warp, WarpOp};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransformKind {
    Identity,
    DI,
    RDI,
    TI,
    SI,
    Admix,
    VT,
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "identity" => TransformKind::Identity,
            "di" => TransformKind::DI,
            "rdi" => TransformKind::RDI,
            "ti" => TransformKind::TI,
            "si" => TransformKind::SI,
            "admix" => TransformKind::Admix,
            "vt" => TransformKind::VT,
            other => return Err(Error::config("transforms", format!("unknown transform `{other}`"))),
        })
    }
}

/// Scalar knobs for every transform kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformParams {
    /// Probability that DI is applied to a batch.
    pub di_prob: f64,
    /// Enlarged canvas side as a multiple of the input side.
    pub max_pad_ratio: f64,
    pub ti_kernel_size: usize,
    /// Kernel half-width in standard deviations.
    pub ti_sigma: f64,
    pub si_copies: usize,
    pub admix_weight: f64,
    pub admix_count: usize,
    pub admix_scales: usize,
    pub vt_samples: usize,
    /// Neighborhood half-width as a multiple of epsilon.
    pub vt_bound: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        TransformParams {
            di_prob: 0.7,
            max_pad_ratio: 1.1,
            ti_kernel_size: 5,
            ti_sigma: 3.0,
            si_copies: 5,
            admix_weight: 0.2,
            admix_count: 3,
            admix_scales: 1,
            vt_samples: 5,
            vt_bound: 1.5,
        }
    }
}

impl TransformParams {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str, msg: &str| Err(Error::config(format!("transform_params.{name}"), msg));
        if !(0.0..=1.0).contains(&self.di_prob) {
            return f("di_prob", "must lie in [0, 1]");
        }
        if !(self.max_pad_ratio >= 1.0) {
            return f("max_pad_ratio", "must be at least 1");
        }
        if self.ti_kernel_size == 0 || self.ti_kernel_size.is_multiple_of(2) {
            return f("ti_kernel_size", "must be odd and positive");
        }
        if !(self.ti_sigma > 0.0) {
            return f("ti_sigma", "must be positive");
        }
        if self.si_copies == 0 {
            return f("si_copies", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.admix_weight) {
            return f("admix_weight", "must lie in [0, 1]");
        }
        if self.admix_count == 0 || self.admix_scales == 0 {
            return f("admix_count", "admix_count and admix_scales must be at least 1");
        }
        if self.vt_samples == 0 {
            return f("vt_samples", "must be at least 1");
        }
        if !(self.vt_bound >= 0.0) {
            return f("vt_bound", "must be non-negative");
        }
        Ok(())
    }
}

fn enlarged(side: usize, ratio: f64) -> usize {
    ((side as f64) * ratio).floor() as usize
}

/// Draw a resize-and-pad warp: resize to a uniform integer side in
/// `[H, floor(ratio*H)]` (nearest), then zero-pad to `floor(ratio*H)` at a
/// uniform offset.
fn draw_diverse_warp(h: usize, w: usize, ratio: f64, rng: &mut Rng) -> Warp {
    let (hm, wm) = (enlarged(h, ratio).max(h), enlarged(w, ratio).max(w));
    let rh = rng.random_range(h..=hm);
    let rw = if h == w {
        rh
    } else {
        ((rh as f64) * w as f64 / h as f64).round() as usize
    };
    let rw = rw.clamp(w, wm);
    let top = rng.random_range(0..=hm - rh);
    let left = rng.random_range(0..=wm - rw);
    let mut warp = Warp::identity();
    warp.push(WarpOp::Resize {
        h: rh,
        w: rw,
        mode: Interp::Nearest,
    });
    warp.push(WarpOp::Pad {
        top,
        left,
        h: hm,
        w: wm,
    });
    warp
}

/// Diverse-input warp: applied with probability `prob` per batch.
pub fn di_warp(h: usize, w: usize, prob: f64, ratio: f64, rng: &mut Rng) -> Warp {
    if rng.random::<f64>() < prob {
        draw_diverse_warp(h, w, ratio, rng)
    } else {
        Warp::identity()
    }
}

/// Resized diverse-input warp: diverse input with probability one, then a
/// bilinear rescale back to `h x w`.
pub fn rdi_warp(h: usize, w: usize, ratio: f64, rng: &mut Rng) -> Warp {
    let mut warp = draw_diverse_warp(h, w, ratio, rng);
    warp.push(WarpOp::Resize {
        h,
        w,
        mode: Interp::Bilinear,
    });
    warp
}

/// Random resize and pad with probability `prob`; returns the output and
/// the warp needed for its adjoint.
pub fn di_transform<T: Real>(x: &Tensor<T>, prob: f64, ratio: f64, rng: &mut Rng) -> (Tensor<T>, Warp) {
    let warp = di_warp(x.height(), x.width(), prob, ratio, rng);
    (warp.apply(x), warp)
}

/// DI at probability one followed by rescaling to the input size.
pub fn rdi_transform<T: Real>(x: &Tensor<T>, ratio: f64, rng: &mut Rng) -> (Tensor<T>, Warp) {
    let warp = rdi_warp(x.height(), x.width(), ratio, rng);
    (warp.apply(x), warp)
}

/// Normalized `k x k` Gaussian sampled on `linspace(-sigma, sigma, k)` in
/// units of standard deviations, row-major.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Vec<f64>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Input(format!("TI kernel size must be odd, got {k}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Input("TI sigma must be positive".into()));
    }
    let taps: Vec<f64> = if k == 1 {
        vec![1.0]
    } else {
        (0..k)
            .map(|i| {
                let t = -sigma + 2.0 * sigma * i as f64 / (k - 1) as f64;
                (-0.5 * t * t).exp()
            })
            .collect()
    };
    let mut kern: Vec<f64> = taps.iter().flat_map(|a| taps.iter().map(move |b| a * b)).collect();
    let s: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|v| *v /= s);
    Ok(kern)
}

/// Depthwise Gaussian smoothing of a gradient with zero "same" padding,
/// applied as a row pass followed by a column pass.
pub fn ti_smooth<T: Real>(g: &Tensor<T>, kernel_size: usize, sigma: f64) -> Result<Tensor<T>> {
    gaussian_kernel(kernel_size, sigma)?;
    if kernel_size == 1 {
        return Ok(g.clone());
    }
    let taps: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let t = -sigma + 2.0 * sigma * i as f64 / (kernel_size - 1) as f64;
            (-0.5 * t * t).exp()
        })
        .collect();
    let norm: f64 = taps.iter().sum();
    let kt: Vec<T> = taps.iter().map(|&v| T::lit(v / norm)).collect();
    let [b, c, h, w] = g.shape();
    let r = kernel_size / 2;
    let mut tmp = vec![T::zero(); h * w];
    let mut padded = vec![T::zero(); w + 2 * r];
    let mut out = g.zeros_like();
    let src = g.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        let sp = &src[p * h * w..(p + 1) * h * w];
        let dp = &mut dst[p * h * w..(p + 1) * h * w];
        for (row, trow) in sp.chunks_exact(w).zip(tmp.chunks_exact_mut(w)) {
            padded[r..r + w].copy_from_slice(row);
            for (t, win) in trow.iter_mut().zip(padded.windows(kernel_size)) {
                let mut acc = T::zero();
                for (&k, &v) in kt.iter().zip(win) {
                    acc += k * v;
                }
                *t = acc;
            }
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            let drow = &mut dp[y * w..(y + 1) * w];
            for yy in lo..hi {
                let k = kt[yy + r - y];
                for (d, &v) in drow.iter_mut().zip(&tmp[yy * w..(yy + 1) * w]) {
                    *d += k * v;
                }
            }
        }
    }
    Ok(out)
}

/// One input copy together with `d copy / d x`, a scalar factor.
pub struct ScaledCopy<T> {
    pub image: Tensor<T>,
    pub dscale: f64,
}

/// Scale copies `x / 2^i` for `i` in `0..m`.
pub fn si_copies<T: Real>(x: &Tensor<T>, m: usize) -> Result<Vec<ScaledCopy<T>>> {
    if m == 0 {
        return Err(Error::Input("SI needs at least one copy".into()));
    }
    Ok((0..m)
        .map(|i| {
            let s = 0.5f64.powi(i as i32);
            ScaledCopy {
                image: x.map(|v| v * T::lit(s)),
                dscale: s,
            }
        })
        .collect())
}

/// Pool indices for admixing: for every image, `m2` draws from the pool
/// excluding the image's own position when the pool is the batch itself.
pub fn admix_indices(batch: usize, pool: usize, m2: usize, same_batch: bool, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let usable = if same_batch { pool.saturating_sub(1) } else { pool };
    if usable == 0 {
        return Err(Error::Input("Admix pool is empty".into()));
    }
    Ok((0..batch)
        .map(|b| {
            (0..m2)
                .map(|_| {
                    let j = rng.random_range(0..usable);
                    if same_batch && j >= b {
                        j + 1
                    } else {
                        j
                    }
                })
                .collect()
        })
        .collect())
}

/// Admix copies `(x + w * x~) / 2^i`, `m2` pool draws times `m1` scales,
/// ordered draw-major. `pool` equal in size to `x` is treated as the batch
/// itself, so an image is never mixed with its own pool entry.
pub fn admix_copies<T: Real>(
    x: &Tensor<T>,
    pool: &Tensor<T>,
    w: f64,
    m2: usize,
    m1: usize,
    rng: &mut Rng,
) -> Result<Vec<ScaledCopy<T>>> {
    if m2 == 0 || m1 == 0 {
        return Err(Error::Input("Admix needs m1, m2 >= 1".into()));
    }
    if pool.batch() > 0 && pool.item_len() != x.item_len() {
        return Err(Error::Input("Admix pool images differ in shape".into()));
    }
    let same_batch = pool.batch() == x.batch();
    let idx = admix_indices(x.batch(), pool.batch(), m2, same_batch, rng)?;
    let wt = T::lit(w);
    let mut out = Vec::with_capacity(m1 * m2);
    for j in 0..m2 {
        let partners: Vec<usize> = idx.iter().map(|v| v[j]).collect();
        let other = pool.select(&partners);
        let mixed = x.zip_map(&other, |a, b| a + wt * b);
        for i in 0..m1 {
            let s = 0.5f64.powi(i as i32);
            out.push(ScaledCopy {
                image: mixed.map(|v| v * T::lit(s)),
                dscale: s,
            });
        }
    }
    Ok(out)
}

/// Variance tuning. Returns `(g(x) + v_prev, v_new)` where `v_new` is the
/// mean gradient over `n` uniform neighbors within `bound` minus `g(x)`.
pub fn vt_gradient<T: Real>(
    loss_grad_fn: &mut dyn FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    n: usize,
    bound: f64,
    v_prev: &Tensor<T>,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = loss_grad_fn(x)?;
    let v_new = vt_variance(loss_grad_fn, x, &g, n, bound, rng)?;
    let mut tuned = g;
    tuned.add_assign(v_prev);
    Ok((tuned, v_new))
}

/// Neighborhood term of [`vt_gradient`] given the centre gradient `g`.
pub fn vt_variance<T: Real>(
    loss_grad_fn: &mut dyn FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    g: &Tensor<T>,
    n: usize,
    bound: f64,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(Error::Input("VT needs at least one sample".into()));
    }
    let mut acc = x.zeros_like();
    for _ in 0..n {
        let mut noisy = x.clone();
        if bound > 0.0 {
            for v in noisy.data_mut() {
                *v += T::lit(rng.random_range(-bound..=bound));
            }
        }
        acc.add_assign(&loss_grad_fn(&noisy)?);
    }
    acc.scale(T::lit(1.0 / n as f64));
    Ok(acc.zip_map(g, |a, b| a - b))
}
