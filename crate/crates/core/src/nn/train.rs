//! Supervised training: softmax cross-entropy, Adam and a cosine schedule.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{Network, NoHook};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (b, k) = (logits.batch(), logits.item_len());
    if labels.len() != b {
        return Err(Error::Input("label count differs from batch size".into()));
    }
    let mut grad = logits.zeros_like();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Input(format!("label {y} out of range for {k} classes")));
        }
        let row = logits.item(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + m - row[y].as_f64();
        for (j, g) in grad.item_mut(i).iter_mut().enumerate() {
            let p = exps[j] / z - if j == y { 1.0 } else { 0.0 };
            *g = T::lit(p / b as f64);
        }
    }
    Ok((loss / b as f64, grad))
}

/// Adam optimizer state.
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(net: &Network<T>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: net.zero_grads(),
            v: net.zero_grads(),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &[Vec<T>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in net.params_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                p[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Cosine-annealed learning rate for `epoch` of `epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Per-epoch mean training loss.
pub type Curve = Vec<f64>;

/// Train with Adam and a per-epoch cosine schedule. `augment` maps a batch
/// to its augmented version.
pub fn fit<T: Real>(
    net: &mut Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
    augment: &mut dyn FnMut(Tensor<T>, &mut Rng) -> Tensor<T>,
) -> Result<Curve> {
    let n = images.batch();
    if n == 0 || labels.len() != n {
        return Err(Error::Input("training set is empty or mislabeled".into()));
    }
    let mut opt = Adam::new(net);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = augment(images.select(chunk), rng);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (logits, tape) = net.forward(x, &mut NoHook, true)?;
            let (loss, g) = cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("training loss diverged at epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            let mut grads = net.zero_grads();
            net.backward(&tape.expect("tape"), g, &mut NoHook, Some(&mut grads), false)?;
            opt.step(net, &grads, lr);
        }
        curve.push(total / n as f64);
        log::debug!("epoch {epoch}: loss {:.4}", total / n as f64);
    }
    Ok(curve)
}

/// Top-1 accuracy of `net` on a labeled set, evaluated in chunks.
pub fn accuracy<T: Real>(net: &Network<T>, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for start in (0..images.batch()).step_by(256) {
        let end = (start + 256).min(images.batch());
        let (logits, _) = net.forward(images.slice_batch(start, end), &mut NoHook, false)?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&labels[start..end])
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(correct as f64 / images.batch().max(1) as f64)
}
