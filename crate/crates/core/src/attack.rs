//! Momentum-iterative targeted attack with logit loss, input transforms and
//! feature-space augmentation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::Warp;
use crate::mixup::{
    record_clean_features, resolve_layers, CfmHook, FeatureAugmenter, FeatureRecord, FtmHook, MixParams, Plain,
};
use crate::model::{EnsembleHandle, ModelHandle};
use crate::nn::Interceptor;
use crate::rng::{stream, Rng, Stream};
use crate::tensor::{Real, Tensor};
use crate::transforms::{
    admix_copies, di_warp, rdi_warp, si_copies, ti_smooth, vt_variance, ScaledCopy, TransformKind, TransformParams,
};

/// Which feature-space augmentation runs inside the surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// No interception.
    Off,
    /// Clean-feature mixup only.
    Cfm,
    /// Learnable perturbation plus clean-feature mixup.
    Ftm,
}

/// Attack hyperparameters. Pixel quantities are in `[0, 1]` units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub eta: f64,
    pub mu: f64,
    pub iterations: usize,
    pub beta: f64,
    pub p: f64,
    pub alpha_max: f64,
    pub ensemble_k: usize,
    pub eps_bar: f64,
    pub feature_mode: FeatureMode,
    /// Interception layers; all eligible layers when absent.
    pub layers: Option<Vec<String>>,
    pub transforms: Vec<TransformKind>,
    pub transform_params: TransformParams,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 16.0 / 255.0,
            eta: 2.0 / 255.0,
            mu: 1.0,
            iterations: 300,
            beta: 0.01,
            p: 0.1,
            alpha_max: 0.75,
            ensemble_k: 1,
            eps_bar: 1e-12,
            feature_mode: FeatureMode::Ftm,
            layers: None,
            transforms: vec![TransformKind::RDI, TransformKind::TI],
            transform_params: TransformParams::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad("epsilon", "must lie in (0, 1]");
        }
        if !(self.eta > 0.0 && self.eta <= self.epsilon) {
            return bad("eta", "must lie in (0, epsilon]");
        }
        if !self.mu.is_finite() {
            return bad("mu", "must be finite");
        }
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad("p", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.alpha_max) {
            return bad("alpha_max", "must lie in [0, 1]");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be finite and non-negative");
        }
        if self.ensemble_k == 0 {
            return bad("ensemble_k", "must be at least 1");
        }
        if !(self.eps_bar > 0.0) {
            return bad("eps_bar", "must be positive");
        }
        let has = |k| self.transforms.contains(&k);
        for (i, k) in self.transforms.iter().enumerate() {
            if self.transforms[..i].contains(k) {
                return bad("transforms", &format!("{k:?} listed twice"));
            }
        }
        if has(TransformKind::DI) && has(TransformKind::RDI) {
            return bad("transforms", "DI and RDI are mutually exclusive");
        }
        if has(TransformKind::SI) && has(TransformKind::Admix) {
            return bad("transforms", "SI and Admix are mutually exclusive");
        }
        self.transform_params.validate()
    }

    pub fn mix_params(&self) -> MixParams {
        MixParams {
            beta: self.beta,
            p: self.p,
            alpha_max: self.alpha_max,
            eps_bar: self.eps_bar,
        }
    }

    fn has(&self, k: TransformKind) -> bool {
        self.transforms.contains(&k)
    }
}

/// Loop state at an iteration boundary.
#[derive(Clone, Debug)]
pub struct AttackState<T> {
    pub x_adv: Tensor<T>,
    pub g_momentum: Tensor<T>,
    /// Number of completed iterations.
    pub iter: usize,
}

/// Attack output.
#[derive(Clone, Debug)]
pub struct AdvResult<T> {
    pub x_adv_final: Tensor<T>,
    /// Batch-mean loss at every iteration.
    pub per_iter_loss: Vec<f64>,
    /// Wall time per image.
    pub elapsed_seconds: f64,
    /// Intercepted features per ensemble copy, when requested.
    pub feature_trace: Vec<Vec<FeatureRecord<T>>>,
}

/// Per-run options that do not change the attack's definition.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Selects independent random streams for concurrently crafted batches.
    pub batch_index: u64,
    /// Record every intercepted feature.
    pub trace_features: bool,
}

/// `L[b] = -logits[b, y_t[b]]`.
pub fn logit_loss<T: Real>(logits: &Tensor<T>, y_t: &[usize]) -> Result<Vec<f64>> {
    check_targets(logits, y_t)?;
    Ok(y_t
        .iter()
        .enumerate()
        .map(|(b, &y)| -logits.item(b)[y].as_f64())
        .collect())
}

fn check_targets<T: Real>(logits: &Tensor<T>, y_t: &[usize]) -> Result<()> {
    if y_t.len() != logits.batch() {
        return Err(Error::Input(format!(
            "{} target labels for a batch of {}",
            y_t.len(),
            logits.batch()
        )));
    }
    let k = logits.item_len();
    if let Some((b, y)) = y_t.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::Input(format!(
            "target label {y} of image {b} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Gradient of `scale * sum_b L[b]` w.r.t. the logits.
fn logit_loss_grad<T: Real>(logits: &Tensor<T>, y_t: &[usize], scale: f64) -> Result<Tensor<T>> {
    check_targets(logits, y_t)?;
    let mut g = logits.zeros_like();
    for (b, &y) in y_t.iter().enumerate() {
        g.item_mut(b)[y] = T::lit(-scale);
    }
    Ok(g)
}

/// `mu * g_prev + g_new / ||g_new||_1`, normalized per image. An image whose
/// new gradient is all zero keeps `mu * g_prev`.
pub fn momentum_update<T: Real>(g_prev: &Tensor<T>, g_new: &Tensor<T>, mu: f64) -> Result<Tensor<T>> {
    if g_prev.shape() != g_new.shape() {
        return Err(Error::Input(format!(
            "momentum shape {:?} differs from gradient {:?}",
            g_prev.shape(),
            g_new.shape()
        )));
    }
    let mu = T::lit(mu);
    let norms = g_new.l1_per_item();
    let mut out = g_prev.zeros_like();
    for (b, &n) in norms.iter().enumerate() {
        let prev = g_prev.item(b);
        let new = g_new.item(b);
        let o = out.item_mut(b);
        if n == T::zero() {
            log::warn!("zero gradient for image {b}; normalization skipped");
            for (o, &p) in o.iter_mut().zip(prev) {
                *o = mu * p;
            }
        } else {
            for ((o, &p), &g) in o.iter_mut().zip(prev).zip(new) {
                *o = mu * p + g / n;
            }
        }
    }
    Ok(out)
}

/// Elementwise box `[max(x - eps, 0), min(x + eps, 1)]`, tightened so that
/// `|bound - x| <= eps` holds exactly when evaluated in `f64`.
pub struct Bounds<T> {
    lo: Vec<T>,
    hi: Vec<T>,
}

impl<T: Real> Bounds<T> {
    pub fn new(x_ref: &Tensor<T>, eps: f64) -> Self {
        let mut lo = Vec::with_capacity(x_ref.len());
        let mut hi = Vec::with_capacity(x_ref.len());
        for &x in x_ref.data() {
            let xf = x.as_f64();
            let mut h = T::lit(xf + eps);
            while h.as_f64() - xf > eps {
                h = h.prev_float();
            }
            let mut l = T::lit(xf - eps);
            while xf - l.as_f64() > eps {
                l = l.next_float();
            }
            hi.push(h.min(T::one()));
            lo.push(l.max(T::zero()));
        }
        Bounds { lo, hi }
    }

    /// `clip(x_adv - eta * sign(g))`.
    pub fn step(&self, x_adv: &Tensor<T>, g: &Tensor<T>, eta: f64) -> Tensor<T> {
        let eta = T::lit(eta);
        let mut out = x_adv.clone();
        for (i, (v, &gv)) in out.data_mut().iter_mut().zip(g.data()).enumerate() {
            let s = if gv > T::zero() {
                T::one()
            } else if gv < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            *v = (*v - eta * s).max(self.lo[i]).min(self.hi[i]);
        }
        out
    }
}

/// One signed step followed by projection onto the epsilon ball around
/// `x_ref` and the pixel box.
pub fn step_and_clip<T: Real>(
    x_adv: &Tensor<T>,
    g_tilde: &Tensor<T>,
    x_ref: &Tensor<T>,
    eta: f64,
    epsilon: f64,
) -> Result<Tensor<T>> {
    if x_adv.shape() != g_tilde.shape() || x_adv.shape() != x_ref.shape() {
        return Err(Error::Input("step_and_clip operands differ in shape".into()));
    }
    Ok(Bounds::new(x_ref, epsilon).step(x_adv, g_tilde, eta))
}

/// Feature augmentation of one ensemble copy.
enum Augmenter<T: Real> {
    Plain(Plain),
    Cfm(CfmHook<T>),
    Ftm(FtmHook<T>),
}

macro_rules! dispatch {
    ($s:expr, $h:ident => $e:expr) => {
        match $s {
            Augmenter::Plain($h) => $e,
            Augmenter::Cfm($h) => $e,
            Augmenter::Ftm($h) => $e,
        }
    };
}

impl<T: Real> Interceptor<T> for Augmenter<T> {
    fn forward(&mut self, tap: usize, z: Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, h => Interceptor::<T>::forward(h, tap, z))
    }
    fn backward(&mut self, tap: usize, g: Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, h => Interceptor::<T>::backward(h, tap, g))
    }
}

impl<T: Real> Augmenter<T> {
    fn begin_iteration(&mut self, i: usize) -> Result<()> {
        dispatch!(self, h => FeatureAugmenter::<T>::begin_iteration(h, i))
    }
    fn set_accumulate(&mut self, on: bool) {
        dispatch!(self, h => FeatureAugmenter::<T>::set_accumulate(h, on))
    }
    fn end_iteration(&mut self) -> Result<()> {
        dispatch!(self, h => FeatureAugmenter::<T>::end_iteration(h))
    }
    fn enable_trace(&mut self) {
        dispatch!(self, h => FeatureAugmenter::<T>::enable_trace(h))
    }
    fn take_trace(&mut self) -> Vec<FeatureRecord<T>> {
        dispatch!(self, h => FeatureAugmenter::<T>::take_trace(h))
    }
}

fn check_inputs<T: Real>(model: &ModelHandle<T>, x: &Tensor<T>, y_t: &[usize]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Input("empty image batch".into()));
    }
    if x.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(Error::Input("image values must lie in [0, 1]".into()));
    }
    if y_t.len() != x.batch() {
        return Err(Error::Input(format!(
            "{} target labels for {} images",
            y_t.len(),
            x.batch()
        )));
    }
    if let Some(&y) = y_t.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::Input(format!(
            "target label {y} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

fn draw_warp(cfg: &AttackConfig, h: usize, w: usize, rng: &mut Rng) -> Warp {
    let tp = &cfg.transform_params;
    if cfg.has(TransformKind::RDI) {
        rdi_warp(h, w, tp.max_pad_ratio, rng)
    } else if cfg.has(TransformKind::DI) {
        di_warp(h, w, tp.di_prob, tp.max_pad_ratio, rng)
    } else {
        Warp::identity()
    }
}

struct Streams {
    transform: Rng,
    admix: Rng,
    variance: Rng,
}

struct Loop<'a, 'm, T: Real> {
    cfg: &'a AttackConfig,
    ens: EnsembleHandle<'m, T, Augmenter<T>>,
    x: &'a Tensor<T>,
    y_t: &'a [usize],
    rngs: Streams,
}

impl<T: Real> Loop<'_, '_, T> {
    /// Transformed-input gradient of the summed loss at `z`, with the batch
    /// mean loss.
    fn gradient(&mut self, z: &Tensor<T>) -> Result<(Tensor<T>, f64)> {
        let tp = &self.cfg.transform_params;
        let copies = if self.cfg.has(TransformKind::SI) {
            si_copies(z, tp.si_copies)?
        } else if self.cfg.has(TransformKind::Admix) {
            admix_copies(
                z,
                self.x,
                tp.admix_weight,
                tp.admix_count,
                tp.admix_scales,
                &mut self.rngs.admix,
            )?
        } else {
            vec![ScaledCopy {
                image: z.clone(),
                dscale: 1.0,
            }]
        };
        let n = copies.len() as f64;
        let (h, w) = (z.height(), z.width());
        let mut grad = z.zeros_like();
        let mut loss = 0.0;
        for c in &copies {
            let warp = draw_warp(self.cfg, h, w, &mut self.rngs.transform);
            let input = warp.apply(&c.image);
            let y_t = self.y_t;
            let mut batch_loss = 0.0;
            let step = self.ens.forward_backward(&input, |logits| {
                batch_loss = logit_loss(logits, y_t)?.iter().sum::<f64>();
                logit_loss_grad(logits, y_t, 1.0 / n)
            })?;
            loss += batch_loss / n;
            let gx = warp.adjoint(&step.grad_x, (h, w));
            grad.axpy(T::lit(c.dscale), &gx);
        }
        Ok((grad, loss / z.batch() as f64))
    }
}

/// Run the attack with default options.
pub fn run_attack<T: Real>(
    surrogate: &ModelHandle<T>,
    x: &Tensor<T>,
    y_t: &[usize],
    cfg: &AttackConfig,
) -> Result<AdvResult<T>> {
    run_attack_with(surrogate, x, y_t, cfg, &RunOptions::default(), &mut |_| {})
}

/// Run the attack; `observer` sees the state after every iteration.
pub fn run_attack_with<T: Real>(
    surrogate: &ModelHandle<T>,
    x: &Tensor<T>,
    y_t: &[usize],
    cfg: &AttackConfig,
    opts: &RunOptions,
    observer: &mut dyn FnMut(&AttackState<T>),
) -> Result<AdvResult<T>> {
    cfg.validate()?;
    check_inputs(surrogate, x, y_t)?;
    let start = Instant::now();
    let (seed, bi) = (cfg.seed, opts.batch_index);
    let layers = match cfg.feature_mode {
        FeatureMode::Off => Vec::new(),
        _ => resolve_layers(surrogate, cfg.layers.as_deref())?,
    };
    if cfg.feature_mode != FeatureMode::Off && layers.is_empty() && cfg.p > 0.0 {
        return Err(Error::config(
            "layers",
            format!("model `{}` has no eligible interception layers", surrogate.name),
        ));
    }
    let mut copies = Vec::with_capacity(cfg.ensemble_k);
    if cfg.feature_mode != FeatureMode::Off {
        let mut clean_rng = stream(seed, bi, 0, Stream::Clean);
        let warp = draw_warp(cfg, x.height(), x.width(), &mut clean_rng);
        let x_clean = warp.apply(x);
        for c in 0..cfg.ensemble_k as u64 {
            let store = record_clean_features(surrogate, &x_clean, &layers, &mut stream(seed, bi, c, Stream::Shuffle))?;
            let sel = stream(seed, bi, c, Stream::Selection);
            let mix = stream(seed, bi, c, Stream::Mixup);
            copies.push(match cfg.feature_mode {
                FeatureMode::Ftm => Augmenter::Ftm(FtmHook::new(layers.clone(), store, cfg.mix_params(), sel, mix)?),
                _ => Augmenter::Cfm(CfmHook::new(layers.clone(), store, cfg.p, cfg.alpha_max, sel, mix)?),
            });
        }
    } else {
        copies.extend((0..cfg.ensemble_k).map(|_| Augmenter::Plain(Plain)));
    }
    if opts.trace_features {
        copies.iter_mut().for_each(|c| c.enable_trace());
    }
    let mut lp = Loop {
        cfg,
        ens: EnsembleHandle::new(surrogate, copies)?,
        x,
        y_t,
        rngs: Streams {
            transform: stream(seed, bi, 0, Stream::Transform),
            admix: stream(seed, bi, 0, Stream::Admix),
            variance: stream(seed, bi, 0, Stream::Variance),
        },
    };
    let tp = cfg.transform_params.clone();
    let bounds = Bounds::new(x, cfg.epsilon);
    let mut state = AttackState {
        x_adv: x.clone(),
        g_momentum: x.zeros_like(),
        iter: 0,
    };
    let mut v = x.zeros_like();
    let mut per_iter_loss = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        for c in &mut lp.ens.copies {
            c.begin_iteration(i)?;
        }
        let (mut g, loss) = lp.gradient(&state.x_adv)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss} at iteration {i}")));
        }
        per_iter_loss.push(loss);
        if cfg.has(TransformKind::VT) {
            lp.ens.copies.iter_mut().for_each(|c| c.set_accumulate(false));
            let mut rng = std::mem::replace(&mut lp.rngs.variance, stream(0, 0, 0, Stream::Variance));
            let v_new = vt_variance(
                &mut |z: &Tensor<T>| lp.gradient(z).map(|r| r.0),
                &state.x_adv,
                &g,
                tp.vt_samples,
                tp.vt_bound * cfg.epsilon,
                &mut rng,
            );
            lp.rngs.variance = rng;
            lp.ens.copies.iter_mut().for_each(|c| c.set_accumulate(true));
            g.add_assign(&v);
            v = v_new?;
        }
        for c in &mut lp.ens.copies {
            c.end_iteration()?;
        }
        if cfg.has(TransformKind::TI) {
            g = ti_smooth(&g, tp.ti_kernel_size, tp.ti_sigma)?;
        }
        state.g_momentum = momentum_update(&state.g_momentum, &g, cfg.mu)?;
        state.x_adv = bounds.step(&state.x_adv, &state.g_momentum, cfg.eta);
        state.iter = i + 1;
        observer(&state);
    }
    let feature_trace = lp.ens.copies.iter_mut().map(|c| c.take_trace()).collect();
    Ok(AdvResult {
        x_adv_final: state.x_adv,
        per_iter_loss,
        elapsed_seconds: start.elapsed().as_secs_f64() / x.batch() as f64,
        feature_trace,
    })
}

/// Plain MI-FGSM with optional DI/RDI and TI, written without interception
/// or copy machinery. Shares random streams with [`run_attack`].
pub fn mi_fgsm_reference<T: Real>(
    model: &ModelHandle<T>,
    x: &Tensor<T>,
    y_t: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_inputs(model, x, y_t)?;
    if cfg
        .transforms
        .iter()
        .any(|k| matches!(k, TransformKind::SI | TransformKind::Admix | TransformKind::VT))
    {
        return Err(Error::config(
            "transforms",
            "reference path supports DI, RDI and TI only",
        ));
    }
    let mut rng = stream(cfg.seed, 0, 0, Stream::Transform);
    let (h, w) = (x.height(), x.width());
    let bounds = Bounds::new(x, cfg.epsilon);
    let mut x_adv = x.clone();
    let mut g = x.zeros_like();
    for _ in 0..cfg.iterations {
        let warp = draw_warp(cfg, h, w, &mut rng);
        let pass = model.forward(&warp.apply(&x_adv), &mut Plain)?;
        let dl = logit_loss_grad(&pass.logits, y_t, 1.0)?;
        let dx = model.backward(&pass, dl, &mut Plain)?;
        let mut grad = warp.adjoint(&dx, (h, w));
        if cfg.has(TransformKind::TI) {
            grad = ti_smooth(
                &grad,
                cfg.transform_params.ti_kernel_size,
                cfg.transform_params.ti_sigma,
            )?;
        }
        g = momentum_update(&g, &grad, cfg.mu)?;
        x_adv = bounds.step(&x_adv, &g, cfg.eta);
    }
    Ok(x_adv)
}
