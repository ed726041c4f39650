//! Classifier handles: raw-pixel preprocessing, logits, feature
//! interception, perturbed-copy ensembles and the on-disk model registry.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageops::{resize, resize_adjoint, Interp};
use crate::nn::{Architecture, Interceptor, Network, NoHook, Tape};
use crate::tensor::{Real, Tensor};

/// Interception point with the static shape of its input feature.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerHandle {
    pub layer_id: String,
    /// Index into the model's interception points.
    pub tap: usize,
    /// `[C, H, W]` of the intercepted feature.
    pub feature_shape: [usize; 3],
}

/// Per-channel input standardization applied inside the handle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Subtract every image's own channel means before standardizing.
    #[serde(default)]
    pub center: bool,
}

fn center_planes<T: Real>(z: &mut Tensor<T>) {
    let plane = z.height() * z.width();
    let inv = T::lit(1.0 / plane as f64);
    for pl in z.data_mut().chunks_mut(plane) {
        let mut m = T::zero();
        pl.iter().for_each(|&v| m += v);
        m *= inv;
        pl.iter_mut().for_each(|v| *v -= m);
    }
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Normalizer {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            center: false,
        }
    }

    /// Channel statistics of a dataset, after per-image centering when
    /// `center` is set.
    pub fn fit<T: Real>(x: &Tensor<T>, center: bool) -> Self {
        let mut xc;
        let x = if center {
            xc = x.clone();
            center_planes(&mut xc);
            &xc
        } else {
            x
        };
        let [b, c, h, w] = x.shape();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..b {
            for (ch, pl) in x.item(i).chunks(plane).enumerate() {
                for &v in pl {
                    mean[ch] += v.as_f64();
                    sq[ch] += v.as_f64() * v.as_f64();
                }
            }
        }
        let n = (b * plane) as f64;
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(&s, &q)| ((q - s * s / n) / (n - 1.0).max(1.0)).max(1e-12).sqrt())
            .collect();
        Normalizer {
            mean: mean.iter().map(|s| s / n).collect(),
            std,
            center,
        }
    }

    /// Standardize a batch in place.
    pub fn apply<T: Real>(&self, z: &mut Tensor<T>) {
        if self.center {
            center_planes(z);
        }
        let plane = z.height() * z.width();
        let c = z.channels();
        for (i, pl) in z.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            let (m, inv) = (T::lit(self.mean[ch]), T::lit(1.0 / self.std[ch]));
            pl.iter_mut().for_each(|v| *v = (*v - m) * inv);
        }
    }

    /// Adjoint of [`Normalizer::apply`] for a gradient, in place.
    pub fn apply_adjoint<T: Real>(&self, g: &mut Tensor<T>) {
        let plane = g.height() * g.width();
        let c = g.channels();
        for (i, pl) in g.data_mut().chunks_mut(plane).enumerate() {
            let inv = T::lit(1.0 / self.std[i % c]);
            pl.iter_mut().for_each(|v| *v *= inv);
        }
        if self.center {
            center_planes(g);
        }
    }
}

/// Forward-pass record needed to backpropagate to raw pixels.
pub struct Pass<T> {
    pub logits: Tensor<T>,
    tape: Tape<T>,
    in_hw: (usize, usize),
}

/// A loaded classifier operating on raw `[0, 1]` pixels.
#[derive(Clone, Debug)]
pub struct ModelHandle<T: Real = f32> {
    pub name: String,
    pub input_side: usize,
    pub normalizer: Normalizer,
    net: Network<T>,
    points: Vec<LayerHandle>,
    num_classes: usize,
}

impl<T: Real> ModelHandle<T> {
    pub fn new(name: impl Into<String>, net: Network<T>, input_side: usize, normalizer: Normalizer) -> Result<Self> {
        let arch = net.arch();
        arch.validate(input_side)?;
        if normalizer.mean.len() != arch.in_channels || normalizer.std.len() != arch.in_channels {
            return Err(Error::Model("normalizer channel count differs from the network".into()));
        }
        if normalizer.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Model("normalizer std must be positive".into()));
        }
        let shapes = arch.feature_shapes(input_side)?;
        let points = arch
            .taps
            .iter()
            .enumerate()
            .map(|(i, t)| LayerHandle {
                layer_id: t.name.clone(),
                tap: i,
                feature_shape: shapes[t.layer],
            })
            .collect();
        let num_classes = arch.num_classes(input_side)?;
        Ok(ModelHandle {
            name: name.into(),
            input_side,
            normalizer,
            net,
            points,
            num_classes,
        })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn interception_points(&self) -> &[LayerHandle] {
        &self.points
    }

    pub fn layer(&self, id: &str) -> Result<&LayerHandle> {
        self.points.iter().find(|p| p.layer_id == id).ok_or_else(|| {
            let names: Vec<&str> = self.points.iter().map(|p| p.layer_id.as_str()).collect();
            Error::Input(format!(
                "model `{}` has no layer `{id}`; available: {}",
                self.name,
                names.join(", ")
            ))
        })
    }

    /// The same model in another precision.
    pub fn cast<U: Real>(&self) -> ModelHandle<U> {
        ModelHandle {
            name: self.name.clone(),
            input_side: self.input_side,
            normalizer: self.normalizer.clone(),
            net: self.net.cast(),
            points: self.points.clone(),
            num_classes: self.num_classes,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.normalizer.mean.len() {
            return Err(Error::Input(format!(
                "model `{}` expects {} channels, got {}",
                self.name,
                self.normalizer.mean.len(),
                x.channels()
            )));
        }
        if x.height() == 0 || x.width() == 0 {
            return Err(Error::Input("empty spatial extent".into()));
        }
        Ok(())
    }

    fn preprocess(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = self.input_side;
        let mut z = resize(x, s, s, Interp::Bilinear);
        self.normalizer.apply(&mut z);
        z
    }

    fn preprocess_adjoint(&self, g: Tensor<T>, in_hw: (usize, usize)) -> Tensor<T> {
        let mut g = g;
        self.normalizer.apply_adjoint(&mut g);
        resize_adjoint(&g, in_hw.0, in_hw.1, Interp::Bilinear)
    }

    /// Pre-softmax logits `[B, classes]`.
    pub fn predict_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_with_interception(x, &mut NoHook)
    }

    /// Logits with tapped features replaced by `hooks`.
    pub fn predict_with_interception(&self, x: &Tensor<T>, hooks: &mut dyn Interceptor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut parts = Vec::new();
        for start in (0..x.batch()).step_by(128) {
            let end = (start + 128).min(x.batch());
            let chunk = if start == 0 && end == x.batch() {
                self.preprocess(x)
            } else {
                self.preprocess(&x.slice_batch(start, end))
            };
            parts.push(self.net.forward(chunk, hooks, false)?.0);
        }
        if parts.is_empty() {
            return Tensor::matrix(0, self.num_classes, vec![]);
        }
        Tensor::concat(&parts)
    }

    /// Taped forward pass for a later [`ModelHandle::backward`].
    pub fn forward(&self, x: &Tensor<T>, hooks: &mut dyn Interceptor<T>) -> Result<Pass<T>> {
        self.check_input(x)?;
        let (logits, tape) = self.net.forward(self.preprocess(x), hooks, true)?;
        Ok(Pass {
            logits,
            tape: tape.expect("taped forward"),
            in_hw: (x.height(), x.width()),
        })
    }

    /// Gradient w.r.t. the raw input given the gradient w.r.t. the logits.
    pub fn backward(&self, pass: &Pass<T>, dlogits: Tensor<T>, hooks: &mut dyn Interceptor<T>) -> Result<Tensor<T>> {
        let g = self
            .net
            .backward(&pass.tape, dlogits, hooks, None, true)?
            .expect("input gradient requested");
        Ok(self.preprocess_adjoint(g, pass.in_hw))
    }
}

/// Forward-only interception by layer name.
pub struct FnHooks<'a, T> {
    by_tap: BTreeMap<usize, Box<dyn FnMut(Tensor<T>) -> Tensor<T> + 'a>>,
}

impl<'a, T: Real> FnHooks<'a, T> {
    /// Resolve `hooks` against the model's interception points; unknown
    /// layer ids are rejected.
    pub fn new(
        model: &ModelHandle<T>,
        hooks: Vec<(String, Box<dyn FnMut(Tensor<T>) -> Tensor<T> + 'a>)>,
    ) -> Result<Self> {
        let mut by_tap = BTreeMap::new();
        for (id, f) in hooks {
            by_tap.insert(model.layer(&id)?.tap, f);
        }
        Ok(FnHooks { by_tap })
    }
}

impl<T: Real> Interceptor<T> for FnHooks<'_, T> {
    fn forward(&mut self, tap: usize, z: Tensor<T>) -> Result<Tensor<T>> {
        Ok(match self.by_tap.get_mut(&tap) {
            Some(f) => f(z),
            None => z,
        })
    }

    fn backward(&mut self, tap: usize, g: Tensor<T>) -> Result<Tensor<T>> {
        if self.by_tap.contains_key(&tap) {
            return Err(Error::Contract("closure hooks are forward-only".into()));
        }
        Ok(g)
    }
}

/// `k` interception states sharing one model's weights; the ensemble output
/// is the mean of the copies' logits.
pub struct EnsembleHandle<'m, T: Real, H> {
    pub model: &'m ModelHandle<T>,
    pub copies: Vec<H>,
}

/// Result of [`EnsembleHandle::forward_backward`].
pub struct EnsembleStep<T> {
    pub logits: Tensor<T>,
    pub grad_x: Tensor<T>,
}

impl<'m, T: Real, H: Interceptor<T>> EnsembleHandle<'m, T, H> {
    pub fn new(model: &'m ModelHandle<T>, copies: Vec<H>) -> Result<Self> {
        if copies.is_empty() {
            return Err(Error::config("ensemble_k", "ensemble needs at least one copy"));
        }
        Ok(EnsembleHandle { model, copies })
    }

    pub fn k(&self) -> usize {
        self.copies.len()
    }

    /// Mean of the copies' intercepted logits.
    pub fn ensemble_logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for h in &mut self.copies {
            let l = self.model.predict_with_interception(x, h)?;
            match acc.as_mut() {
                Some(a) => a.add_assign(&l),
                None => acc = Some(l),
            }
        }
        let mut acc = acc.expect("k >= 1");
        if self.copies.len() > 1 {
            acc.scale(T::lit(1.0 / self.copies.len() as f64));
        }
        Ok(acc)
    }

    /// Joint forward/backward: `dloss` maps mean logits to the loss gradient
    /// w.r.t. them; every copy receives its `1/k` share.
    pub fn forward_backward(
        &mut self,
        x: &Tensor<T>,
        dloss: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<EnsembleStep<T>> {
        let k = self.copies.len();
        let mut passes = Vec::with_capacity(k);
        let mut acc: Option<Tensor<T>> = None;
        for h in &mut self.copies {
            let pass = self.model.forward(x, h)?;
            match acc.as_mut() {
                Some(a) => a.add_assign(&pass.logits),
                None => acc = Some(pass.logits.clone()),
            }
            passes.push(pass);
        }
        let mut logits = acc.expect("k >= 1");
        if k > 1 {
            logits.scale(T::lit(1.0 / k as f64));
        }
        let mut dl = dloss(&logits)?;
        if k > 1 {
            dl.scale(T::lit(1.0 / k as f64));
        }
        let mut grad_x: Option<Tensor<T>> = None;
        for (h, pass) in self.copies.iter_mut().zip(&passes) {
            let g = self.model.backward(pass, dl.clone(), h)?;
            match grad_x.as_mut() {
                Some(a) => a.add_assign(&g),
                None => grad_x = Some(g),
            }
        }
        Ok(EnsembleStep {
            logits,
            grad_x: grad_x.expect("k >= 1"),
        })
    }
}

const WEIGHT_MAGIC: &[u8; 4] = b"FTMW";

/// Serialize parameters as a little-endian f32 blob.
pub fn write_weights(path: &Path, params: &[Vec<f32>]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<Vec<Vec<f32>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Model(format!("cannot read weights {}: {e}", path.display())))?;
    let bad = || Error::Model(format!("corrupt weight file {}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != WEIGHT_MAGIC {
        return Err(bad());
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len_bytes = bytes.get(pos..pos + 8).ok_or_else(bad)?;
        let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 8;
        let body = bytes.get(pos..pos + 4 * len).ok_or_else(bad)?;
        out.push(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
        pos += 4 * len;
    }
    if pos != bytes.len() {
        return Err(bad());
    }
    Ok(out)
}

/// Lowercase hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One model in a registry file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    /// Weight blob path relative to the registry file.
    pub weights: String,
    pub sha256: String,
    pub input_side: usize,
    pub normalizer: Normalizer,
    /// Interception spec and layer stack.
    pub arch: Architecture,
    #[serde(default)]
    pub test_accuracy: Option<f64>,
}

/// Model registry: name to weights, input side, normalizer and
/// interception spec.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub models: Vec<RegistryEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Registry {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Model(format!("cannot read registry {}: {e}", path.display())))?;
        let mut reg: Registry = serde_json::from_str(&text)
            .map_err(|e| Error::Model(format!("malformed registry {}: {e}", path.display())))?;
        reg.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn names(&self) -> Vec<&str> {
        self.models.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn entry(&self, name: &str) -> Result<&RegistryEntry> {
        self.models.iter().find(|m| m.name == name).ok_or_else(|| {
            Error::Model(format!(
                "unknown model `{name}`; registry has: {}",
                self.names().join(", ")
            ))
        })
    }

    /// Load weights, verify the checksum and build the handle.
    pub fn load_model(&self, name: &str) -> Result<ModelHandle<f32>> {
        let e = self.entry(name)?;
        let path = self.root.join(&e.weights);
        let sum = file_sha256(&path).map_err(|err| Error::Model(format!("model `{name}`: {err}")))?;
        if sum != e.sha256 {
            return Err(Error::Model(format!(
                "model `{name}`: checksum mismatch for {}",
                path.display()
            )));
        }
        let net = Network::from_params(e.arch.clone(), read_weights(&path)?)?;
        ModelHandle::new(&e.name, net, e.input_side, e.normalizer.clone())
    }
}
