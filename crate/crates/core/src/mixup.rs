//! Feature-space augmentation: clean-feature mixing and learnable
//! per-layer perturbations with stochastic layer selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerHandle, ModelHandle};
use crate::nn::Interceptor;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Mixing hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    /// Perturbation norm relative to the feature norm.
    pub beta: f64,
    /// Per-layer selection probability.
    pub p: f64,
    /// Upper bound of the clean-feature mixing ratio.
    pub alpha_max: f64,
    /// Stabilizer in the perturbation normalization.
    pub eps_bar: f64,
}

impl Default for MixParams {
    fn default() -> Self {
        MixParams {
            beta: 0.01,
            p: 0.1,
            alpha_max: 0.75,
            eps_bar: 1e-12,
        }
    }
}

/// Interception points whose feature has `16 * min(H, W) <= input_side`,
/// in forward order.
pub fn enumerate_eligible_layers<T: Real>(model: &ModelHandle<T>) -> Vec<LayerHandle> {
    model
        .interception_points()
        .iter()
        .filter(|l| 16 * l.feature_shape[1].min(l.feature_shape[2]) <= model.input_side)
        .cloned()
        .collect()
}

/// Resolve explicit layer ids, or all eligible layers when `ids` is `None`.
pub fn resolve_layers<T: Real>(model: &ModelHandle<T>, ids: Option<&[String]>) -> Result<Vec<LayerHandle>> {
    match ids {
        None => Ok(enumerate_eligible_layers(model)),
        Some(ids) => {
            let mut out: Vec<LayerHandle> = ids.iter().map(|id| model.layer(id).cloned()).collect::<Result<_>>()?;
            out.sort_by_key(|l| l.tap);
            out.dedup_by_key(|l| l.tap);
            Ok(out)
        }
    }
}

/// Clean features captured once per attack run, with the batch pairing used
/// when mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanFeatureStore<T> {
    pub features: BTreeMap<String, Tensor<T>>,
    /// Image `b` mixes with the clean feature of image `shuffle_perm[b]`.
    pub shuffle_perm: Vec<usize>,
}

impl<T: Real> CleanFeatureStore<T> {
    /// Clean feature of `layer` rearranged by the pairing permutation.
    pub fn paired(&self, layer: &str) -> Result<Tensor<T>> {
        let f = self
            .features
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("no clean feature for `{layer}`")))?;
        Ok(f.select(&self.shuffle_perm))
    }
}

/// Uniform random permutation without fixed points for `n > 1`; identity
/// for `n <= 1`.
pub fn derangement(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

struct Recorder<'a, T> {
    taps: &'a BTreeMap<usize, String>,
    out: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Interceptor<T> for Recorder<'_, T> {
    fn forward(&mut self, tap: usize, z: Tensor<T>) -> Result<Tensor<T>> {
        if let Some(id) = self.taps.get(&tap) {
            self.out.insert(id.clone(), z.clone());
        }
        Ok(z)
    }
    fn backward(&mut self, _: usize, g: Tensor<T>) -> Result<Tensor<T>> {
        Ok(g)
    }
}

/// One forward pass on `x_clean` capturing the input feature of every
/// requested layer, plus a seeded pairing permutation.
pub fn record_clean_features<T: Real>(
    model: &ModelHandle<T>,
    x_clean: &Tensor<T>,
    layers: &[LayerHandle],
    rng: &mut Rng,
) -> Result<CleanFeatureStore<T>> {
    let taps: BTreeMap<usize, String> = layers.iter().map(|l| (l.tap, l.layer_id.clone())).collect();
    let mut rec = Recorder {
        taps: &taps,
        out: BTreeMap::new(),
    };
    model.predict_with_interception(x_clean, &mut rec)?;
    Ok(CleanFeatureStore {
        features: rec.out,
        shuffle_perm: derangement(x_clean.batch(), rng),
    })
}

/// Draw `tau_k ~ U(0, 1)` for every layer, in the given order.
pub fn sample_selection(layers: &[LayerHandle], rng: &mut Rng) -> BTreeMap<String, f64> {
    layers
        .iter()
        .map(|l| (l.layer_id.clone(), rng.random::<f64>()))
        .collect()
}

#[inline]
pub fn is_selected(tau: f64, p: f64) -> bool {
    tau < p
}

/// Learnable feature perturbations and this iteration's selection draws.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbState<T> {
    pub delta: BTreeMap<String, Tensor<T>>,
    pub tau: BTreeMap<String, f64>,
}

impl<T: Real> PerturbState<T> {
    /// Zero perturbations shaped like the clean features.
    pub fn zeros(store: &CleanFeatureStore<T>) -> Self {
        PerturbState {
            delta: store
                .features
                .iter()
                .map(|(k, v)| (k.clone(), v.zeros_like()))
                .collect(),
            tau: BTreeMap::new(),
        }
    }

    pub fn selected(&self, layer: &str, p: f64) -> bool {
        self.tau.get(layer).is_some_and(|&t| is_selected(t, p))
    }
}

/// `z + beta * |z| * dz / (|dz| + eps_bar)` with whole-item L2 norms.
pub fn ftm_forward<T: Real>(z: &Tensor<T>, delta: &Tensor<T>, params: &MixParams) -> Tensor<T> {
    assert_eq!(z.shape(), delta.shape(), "feature and perturbation shapes differ");
    let nz = z.l2_per_item();
    let nd = delta.l2_per_item();
    let mut out = z.clone();
    for b in 0..z.batch() {
        let s = T::lit(params.beta * nz[b].as_f64() / (nd[b].as_f64() + params.eps_bar));
        for (o, &d) in out.item_mut(b).iter_mut().zip(delta.item(b)) {
            *o += s * d;
        }
    }
    out
}

/// Gradients of [`ftm_forward`] w.r.t. `z` and `delta` given the gradient
/// `g` w.r.t. its output.
pub fn ftm_backward<T: Real>(
    z: &Tensor<T>,
    delta: &Tensor<T>,
    g: &Tensor<T>,
    params: &MixParams,
) -> (Tensor<T>, Tensor<T>) {
    let nz = z.l2_per_item();
    let nd = delta.l2_per_item();
    let mut dz = g.clone();
    let mut dd = delta.zeros_like();
    for b in 0..z.batch() {
        let (zb, db, gb) = (z.item(b), delta.item(b), g.item(b));
        let (nzb, ndb) = (nz[b].as_f64(), nd[b].as_f64());
        let den = ndb + params.eps_bar;
        let gd: f64 = gb.iter().zip(db).map(|(&a, &c)| a.as_f64() * c.as_f64()).sum();
        if nzb > 0.0 {
            let cz = T::lit(params.beta * gd / (den * nzb));
            for (o, &zv) in dz.item_mut(b).iter_mut().zip(zb) {
                *o += cz * zv;
            }
        }
        let s = T::lit(params.beta * nzb / den);
        let cd = if ndb > 0.0 {
            T::lit(params.beta * nzb * gd / (den * den * ndb))
        } else {
            T::zero()
        };
        for ((o, &gv), &dv) in dd.item_mut(b).iter_mut().zip(gb).zip(db) {
            *o = s * gv - cd * dv;
        }
    }
    (dz, dd)
}

/// Draw per-(image, channel) ratios `U(0, alpha_max)`.
pub fn draw_alpha(batch: usize, channels: usize, alpha_max: f64, rng: &mut Rng) -> Vec<f64> {
    (0..batch * channels).map(|_| rng.random::<f64>() * alpha_max).collect()
}

/// `(1 - alpha) * z_bar + alpha * z_c` with `alpha` per (image, channel).
pub fn mix_with_alpha<T: Real>(z_bar: &Tensor<T>, z_c: &Tensor<T>, alpha: &[f64]) -> Result<Tensor<T>> {
    if z_bar.shape() != z_c.shape() {
        return Err(Error::Contract(format!(
            "clean feature {:?} does not match feature {:?}",
            z_c.shape(),
            z_bar.shape()
        )));
    }
    let plane = z_bar.height() * z_bar.width();
    let mut out = z_bar.clone();
    for ((o, c), &a) in out
        .data_mut()
        .chunks_mut(plane)
        .zip(z_c.data().chunks(plane))
        .zip(alpha)
    {
        let a = T::lit(a);
        let keep = T::one() - a;
        for (ov, &cv) in o.iter_mut().zip(c) {
            *ov = keep * *ov + a * cv;
        }
    }
    Ok(out)
}

/// Clean-feature mixup for a selected layer; identity otherwise. Returns
/// the mixed feature and the ratios drawn.
pub fn clean_mixup<T: Real>(
    z_bar: &Tensor<T>,
    z_c: &Tensor<T>,
    alpha_max: f64,
    selected: bool,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Option<Vec<f64>>)> {
    if !selected {
        return Ok((z_bar.clone(), None));
    }
    let alpha = draw_alpha(z_bar.batch(), z_bar.channels(), alpha_max, rng);
    Ok((mix_with_alpha(z_bar, z_c, &alpha)?, Some(alpha)))
}

/// Scale each (image, channel) plane of `g` by `1 - alpha`.
fn scale_by_keep<T: Real>(g: &Tensor<T>, alpha: &[f64]) -> Tensor<T> {
    let plane = g.height() * g.width();
    let mut out = g.clone();
    for (o, &a) in out.data_mut().chunks_mut(plane).zip(alpha) {
        let keep = T::one() - T::lit(a);
        o.iter_mut().for_each(|v| *v *= keep);
    }
    out
}

/// Raw gradient ascent on the selected layers' perturbations.
pub fn update_perturbations<T: Real>(
    state: &mut PerturbState<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    p: f64,
) -> Result<()> {
    for id in grads.keys() {
        if !state.selected(id, p) {
            return Err(Error::Contract(format!(
                "gradient supplied for unselected layer `{id}`"
            )));
        }
        if !state.delta.contains_key(id) {
            return Err(Error::Contract(format!("no perturbation for layer `{id}`")));
        }
    }
    for (id, g) in grads {
        state.delta.get_mut(id).expect("checked").add_assign(g);
    }
    Ok(())
}

/// Intercepted feature recorded for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord<T> {
    pub iteration: usize,
    pub layer_id: String,
    pub value: Tensor<T>,
}

/// Per-iteration hook protocol used by the attack loop.
pub trait FeatureAugmenter<T: Real>: Interceptor<T> {
    /// Draw this iteration's selection.
    fn begin_iteration(&mut self, iteration: usize) -> Result<()>;
    /// Whether backward passes contribute to the perturbation update.
    fn set_accumulate(&mut self, on: bool);
    /// Apply the perturbation update for this iteration.
    fn end_iteration(&mut self) -> Result<()>;
    fn enable_trace(&mut self);
    fn take_trace(&mut self) -> Vec<FeatureRecord<T>>;
}

struct Cached<T> {
    z: Tensor<T>,
    alpha: Option<Vec<f64>>,
}

/// Learnable perturbation plus clean-feature mixup at the eligible layers.
pub struct FtmHook<T: Real> {
    layers: Vec<LayerHandle>,
    slot_of_tap: BTreeMap<usize, usize>,
    pub state: PerturbState<T>,
    pub store: CleanFeatureStore<T>,
    paired: Vec<Tensor<T>>,
    params: MixParams,
    selection_rng: Rng,
    mixup_rng: Rng,
    cache: Vec<Option<Cached<T>>>,
    grads: BTreeMap<String, Tensor<T>>,
    accumulate: bool,
    iteration: usize,
    trace: Option<Vec<FeatureRecord<T>>>,
}

fn slots(layers: &[LayerHandle]) -> BTreeMap<usize, usize> {
    layers.iter().enumerate().map(|(i, l)| (l.tap, i)).collect()
}

fn paired_all<T: Real>(layers: &[LayerHandle], store: &CleanFeatureStore<T>) -> Result<Vec<Tensor<T>>> {
    layers.iter().map(|l| store.paired(&l.layer_id)).collect()
}

impl<T: Real> FtmHook<T> {
    pub fn new(
        layers: Vec<LayerHandle>,
        store: CleanFeatureStore<T>,
        params: MixParams,
        selection_rng: Rng,
        mixup_rng: Rng,
    ) -> Result<Self> {
        let paired = paired_all(&layers, &store)?;
        Ok(FtmHook {
            slot_of_tap: slots(&layers),
            cache: (0..layers.len()).map(|_| None).collect(),
            state: PerturbState::zeros(&store),
            layers,
            store,
            paired,
            params,
            selection_rng,
            mixup_rng,
            grads: BTreeMap::new(),
            accumulate: true,
            iteration: 0,
            trace: None,
        })
    }

    pub fn layers(&self) -> &[LayerHandle] {
        &self.layers
    }

    /// Loss gradients w.r.t. the perturbations of the selected layers,
    /// accumulated since the iteration began.
    pub fn delta_grads(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.grads
    }
}

impl<T: Real> Interceptor<T> for FtmHook<T> {
    fn forward(&mut self, tap: usize, z: Tensor<T>) -> Result<Tensor<T>> {
        let Some(&slot) = self.slot_of_tap.get(&tap) else {
            return Ok(z);
        };
        let id = &self.layers[slot].layer_id;
        let delta = &self.state.delta[id];
        if delta.shape() != z.shape() {
            return Err(Error::Contract(format!(
                "feature {:?} at `{id}` does not match perturbation {:?}",
                z.shape(),
                delta.shape()
            )));
        }
        let selected = self.state.selected(id, self.params.p);
        let z_bar = ftm_forward(&z, delta, &self.params);
        let (out, alpha) = clean_mixup(
            &z_bar,
            &self.paired[slot],
            self.params.alpha_max,
            selected,
            &mut self.mixup_rng,
        )?;
        if let Some(t) = self.trace.as_mut() {
            t.push(FeatureRecord {
                iteration: self.iteration,
                layer_id: id.clone(),
                value: out.clone(),
            });
        }
        self.cache[slot] = Some(Cached { z, alpha });
        Ok(out)
    }

    fn backward(&mut self, tap: usize, g: Tensor<T>) -> Result<Tensor<T>> {
        let Some(&slot) = self.slot_of_tap.get(&tap) else {
            return Ok(g);
        };
        let cached = self.cache[slot]
            .take()
            .ok_or_else(|| Error::Contract("backward without forward".into()))?;
        let id = &self.layers[slot].layer_id;
        let g_bar = match &cached.alpha {
            Some(a) => scale_by_keep(&g, a),
            None => g,
        };
        let (dz, dd) = ftm_backward(&cached.z, &self.state.delta[id], &g_bar, &self.params);
        if self.accumulate && self.state.selected(id, self.params.p) {
            match self.grads.get_mut(id) {
                Some(acc) => acc.add_assign(&dd),
                None => {
                    self.grads.insert(id.clone(), dd);
                }
            }
        }
        Ok(dz)
    }
}

impl<T: Real> FeatureAugmenter<T> for FtmHook<T> {
    fn begin_iteration(&mut self, iteration: usize) -> Result<()> {
        self.iteration = iteration;
        self.state.tau = sample_selection(&self.layers, &mut self.selection_rng);
        self.grads.clear();
        Ok(())
    }

    fn set_accumulate(&mut self, on: bool) {
        self.accumulate = on;
    }

    fn end_iteration(&mut self) -> Result<()> {
        let grads = std::mem::take(&mut self.grads);
        update_perturbations(&mut self.state, &grads, self.params.p)
    }

    fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    fn take_trace(&mut self) -> Vec<FeatureRecord<T>> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// Clean-feature mixup only: selected layers mix their input with a paired
/// clean feature at random channel-wise ratios.
pub struct CfmHook<T: Real> {
    layers: Vec<LayerHandle>,
    slot_of_tap: BTreeMap<usize, usize>,
    pub store: CleanFeatureStore<T>,
    paired: Vec<Tensor<T>>,
    p: f64,
    alpha_max: f64,
    tau: Vec<f64>,
    selection_rng: Rng,
    mixup_rng: Rng,
    alphas: Vec<Option<Vec<f64>>>,
    iteration: usize,
    trace: Option<Vec<FeatureRecord<T>>>,
}

impl<T: Real> CfmHook<T> {
    pub fn new(
        layers: Vec<LayerHandle>,
        store: CleanFeatureStore<T>,
        p: f64,
        alpha_max: f64,
        selection_rng: Rng,
        mixup_rng: Rng,
    ) -> Result<Self> {
        let paired = paired_all(&layers, &store)?;
        Ok(CfmHook {
            slot_of_tap: slots(&layers),
            alphas: (0..layers.len()).map(|_| None).collect(),
            tau: vec![1.0; layers.len()],
            layers,
            store,
            paired,
            p,
            alpha_max,
            selection_rng,
            mixup_rng,
            iteration: 0,
            trace: None,
        })
    }
}

impl<T: Real> Interceptor<T> for CfmHook<T> {
    fn forward(&mut self, tap: usize, z: Tensor<T>) -> Result<Tensor<T>> {
        let Some(&slot) = self.slot_of_tap.get(&tap) else {
            return Ok(z);
        };
        let out = if self.tau[slot] < self.p {
            let zc = &self.paired[slot];
            if zc.shape() != z.shape() {
                return Err(Error::Contract("clean feature shape mismatch".into()));
            }
            let plane = z.height() * z.width();
            let mut alpha = Vec::with_capacity(z.batch() * z.channels());
            let mut out = z;
            for (o, c) in out.data_mut().chunks_mut(plane).zip(zc.data().chunks(plane)) {
                let a_f = self.mixup_rng.random::<f64>() * self.alpha_max;
                alpha.push(a_f);
                let a = T::lit(a_f);
                let keep = T::one() - a;
                for (ov, &cv) in o.iter_mut().zip(c) {
                    *ov = keep * *ov + a * cv;
                }
            }
            self.alphas[slot] = Some(alpha);
            out
        } else {
            self.alphas[slot] = None;
            z
        };
        if let Some(t) = self.trace.as_mut() {
            t.push(FeatureRecord {
                iteration: self.iteration,
                layer_id: self.layers[slot].layer_id.clone(),
                value: out.clone(),
            });
        }
        Ok(out)
    }

    fn backward(&mut self, tap: usize, g: Tensor<T>) -> Result<Tensor<T>> {
        let Some(&slot) = self.slot_of_tap.get(&tap) else {
            return Ok(g);
        };
        Ok(match self.alphas[slot].take() {
            Some(a) => scale_by_keep(&g, &a),
            None => g,
        })
    }
}

impl<T: Real> FeatureAugmenter<T> for CfmHook<T> {
    fn begin_iteration(&mut self, iteration: usize) -> Result<()> {
        self.iteration = iteration;
        for t in self.tau.iter_mut() {
            *t = self.selection_rng.random::<f64>();
        }
        Ok(())
    }

    fn set_accumulate(&mut self, _: bool) {}

    fn end_iteration(&mut self) -> Result<()> {
        Ok(())
    }

    fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    fn take_trace(&mut self) -> Vec<FeatureRecord<T>> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// No feature augmentation.
pub struct Plain;

impl<T: Real> Interceptor<T> for Plain {
    fn forward(&mut self, _: usize, z: Tensor<T>) -> Result<Tensor<T>> {
        Ok(z)
    }
    fn backward(&mut self, _: usize, g: Tensor<T>) -> Result<Tensor<T>> {
        Ok(g)
    }
}

impl<T: Real> FeatureAugmenter<T> for Plain {
    fn begin_iteration(&mut self, _: usize) -> Result<()> {
        Ok(())
    }
    fn set_accumulate(&mut self, _: bool) {}
    fn end_iteration(&mut self) -> Result<()> {
        Ok(())
    }
    fn enable_trace(&mut self) {}
    fn take_trace(&mut self) -> Vec<FeatureRecord<T>> {
        Vec::new()
    }
}
