//! A small sequential convnet engine with manual backpropagation and
//! feature interception at named taps.

pub mod ops;
pub mod train;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// One layer of a sequential network. Convolutions pad by `k/2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    },
    Relu,
    MaxPool {
        k: usize,
    },
    AvgPool {
        k: usize,
    },
    GlobalAvgPool,
    Flatten,
    LayerNorm {
        dim: usize,
    },
    Linear {
        din: usize,
        dout: usize,
    },
}

impl LayerSpec {
    fn param_shapes(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Conv { cin, cout, k, .. } => vec![cout * cin * k * k, cout],
            LayerSpec::LayerNorm { dim } => vec![dim, dim],
            LayerSpec::Linear { din, dout } => vec![dout * din, dout],
            _ => vec![],
        }
    }

    /// Output feature shape `[C, H, W]` for an input feature shape.
    pub fn output_shape(&self, s: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = s;
        let bad = |msg: String| Err(Error::Model(format!("{self:?}: {msg}")));
        match *self {
            LayerSpec::Conv { cin, cout, k, stride } => {
                if c != cin {
                    return bad(format!("expects {cin} channels, got {c}"));
                }
                if k == 0 || stride == 0 || h + 2 * (k / 2) < k {
                    return bad("degenerate geometry".into());
                }
                Ok([cout, ops::conv_out_side(h, k, stride), ops::conv_out_side(w, k, stride)])
            }
            LayerSpec::Relu => Ok(s),
            LayerSpec::MaxPool { k } | LayerSpec::AvgPool { k } => {
                if k == 0 || h < k || w < k {
                    return bad(format!("pool {k} on {h}x{w}"));
                }
                Ok([c, h / k, w / k])
            }
            LayerSpec::GlobalAvgPool => Ok([c, 1, 1]),
            LayerSpec::Flatten => Ok([c * h * w, 1, 1]),
            LayerSpec::LayerNorm { dim } | LayerSpec::Linear { din: dim, .. } => {
                if c * h * w != dim || h * w != 1 {
                    return bad(format!("expects flat [{dim}], got {s:?}"));
                }
                match *self {
                    LayerSpec::Linear { dout, .. } => Ok([dout, 1, 1]),
                    _ => Ok(s),
                }
            }
        }
    }
}

/// Interception point: the input feature of `layer` is exposed as `name`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub name: String,
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<TapSpec>,
}

impl Architecture {
    /// Taps at every convolution input (`conv0`, `conv1`, ...) and at the
    /// input of the first normalization or linear layer after the last
    /// convolution (`head`).
    pub fn with_default_taps(in_channels: usize, layers: Vec<LayerSpec>) -> Self {
        let mut taps = Vec::new();
        let mut conv = 0;
        let mut head = None;
        for (i, l) in layers.iter().enumerate() {
            match l {
                LayerSpec::Conv { .. } => {
                    taps.push(TapSpec {
                        name: format!("conv{conv}"),
                        layer: i,
                    });
                    conv += 1;
                    head = None;
                }
                LayerSpec::LayerNorm { .. } | LayerSpec::Linear { .. } if head.is_none() => {
                    head = Some(i);
                }
                _ => {}
            }
        }
        if let Some(i) = head {
            taps.push(TapSpec {
                name: "head".into(),
                layer: i,
            });
        }
        Architecture {
            in_channels,
            layers,
            taps,
        }
    }

    /// Input feature shape of every layer, followed by the output shape.
    pub fn feature_shapes(&self, side: usize) -> Result<Vec<[usize; 3]>> {
        let mut shapes = vec![[self.in_channels, side, side]];
        for l in &self.layers {
            let next = l.output_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn num_classes(&self, side: usize) -> Result<usize> {
        let out = *self.feature_shapes(side)?.last().unwrap();
        if out[1] != 1 || out[2] != 1 {
            return Err(Error::Model(format!("network output {out:?} is not a logit vector")));
        }
        Ok(out[0])
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        self.num_classes(side)?;
        for t in &self.taps {
            if t.layer >= self.layers.len() {
                return Err(Error::Model(format!("tap `{}` points past the last layer", t.name)));
            }
        }
        let mut names: Vec<&str> = self.taps.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.taps.len() {
            return Err(Error::Model("duplicate tap names".into()));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }
}

/// Replaces tapped features during the forward pass and maps gradients back
/// during the backward pass. `tap` indexes [`Architecture::taps`].
pub trait Interceptor<T: Real> {
    fn forward(&mut self, tap: usize, z: Tensor<T>) -> Result<Tensor<T>>;
    fn backward(&mut self, tap: usize, grad: Tensor<T>) -> Result<Tensor<T>>;
}

/// Pass-through interceptor.
pub struct NoHook;

impl<T: Real> Interceptor<T> for NoHook {
    fn forward(&mut self, _: usize, z: Tensor<T>) -> Result<Tensor<T>> {
        Ok(z)
    }
    fn backward(&mut self, _: usize, g: Tensor<T>) -> Result<Tensor<T>> {
        Ok(g)
    }
}

enum Aux<T> {
    None,
    Argmax(Vec<u32>),
    Norm { means: Vec<T>, rstds: Vec<T> },
}

/// Cached layer inputs from a forward pass.
pub struct Tape<T> {
    inputs: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
}

/// Network weights together with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    arch: Architecture,
    params: Vec<Vec<T>>,
    offsets: Vec<usize>,
    tap_of_layer: Vec<Option<usize>>,
}

impl<T: Real> Network<T> {
    /// Uniform fan-in initialization: weights and biases in `±1/sqrt(fan_in)`,
    /// normalization scales at one.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Self {
        let mut params = Vec::new();
        for l in &arch.layers {
            match *l {
                LayerSpec::Conv { cin, cout, k, .. } => {
                    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
                    params.push(uniform(rng, cout * cin * k * k, bound));
                    params.push(uniform(rng, cout, bound));
                }
                LayerSpec::Linear { din, dout } => {
                    let bound = 1.0 / (din as f64).sqrt();
                    params.push(uniform(rng, dout * din, bound));
                    params.push(uniform(rng, dout, bound));
                }
                LayerSpec::LayerNorm { dim } => {
                    params.push(vec![T::one(); dim]);
                    params.push(vec![T::zero(); dim]);
                }
                _ => {}
            }
        }
        Self::from_params(arch, params).expect("init shapes")
    }

    pub fn from_params(arch: Architecture, params: Vec<Vec<T>>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(&n, p)| n != p.len()) {
            return Err(Error::Model("parameter shapes do not match the architecture".into()));
        }
        let mut net = Network {
            arch,
            params,
            offsets: Vec::new(),
            tap_of_layer: Vec::new(),
        };
        net.reindex();
        Ok(net)
    }

    fn reindex(&mut self) {
        let mut off = 0;
        self.offsets = self
            .arch
            .layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.param_shapes().len();
                o
            })
            .collect();
        self.tap_of_layer = vec![None; self.arch.layers.len()];
        for (i, t) in self.arch.taps.iter().enumerate() {
            if t.layer < self.tap_of_layer.len() {
                self.tap_of_layer[t.layer] = Some(i);
            }
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let params = self
            .params
            .iter()
            .map(|p| p.iter().map(|&v| U::lit(v.as_f64())).collect())
            .collect();
        Network::from_params(self.arch.clone(), params).expect("same shapes")
    }

    /// Forward pass. Tapped layer inputs go through `hook`; with `keep` the
    /// returned tape supports [`Network::backward`].
    pub fn forward(
        &self,
        x: Tensor<T>,
        hook: &mut dyn Interceptor<T>,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<Tape<T>>)> {
        if x.channels() != self.arch.in_channels {
            return Err(Error::Input(format!(
                "expected {} input channels, got {}",
                self.arch.in_channels,
                x.channels()
            )));
        }
        let mut tape = Tape {
            inputs: Vec::new(),
            aux: Vec::new(),
        };
        let mut cur = x;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            if let Some(t) = self.tap_of_layer[i] {
                cur = hook.forward(t, cur)?;
            }
            let p = &self.params[self.offsets[i]..];
            let (out, aux) = match *layer {
                LayerSpec::Conv { cout, k, stride, .. } => {
                    (ops::conv_forward(&cur, &p[0], &p[1], cout, k, stride), Aux::None)
                }
                LayerSpec::Relu => (ops::relu_forward(&cur), Aux::None),
                LayerSpec::MaxPool { k } => {
                    let (o, a) = ops::maxpool_forward(&cur, k);
                    (o, Aux::Argmax(a))
                }
                LayerSpec::AvgPool { k } => (ops::avgpool_forward(&cur, k), Aux::None),
                LayerSpec::GlobalAvgPool => (ops::gap_forward(&cur), Aux::None),
                LayerSpec::Flatten => {
                    let n = cur.item_len();
                    let b = cur.batch();
                    (cur.clone().reshape([b, n, 1, 1])?, Aux::None)
                }
                LayerSpec::LayerNorm { dim } => {
                    check_flat(&cur, dim)?;
                    let (o, means, rstds) = ops::layernorm_forward(&cur, &p[0], &p[1]);
                    (o, Aux::Norm { means, rstds })
                }
                LayerSpec::Linear { din, dout } => {
                    check_flat(&cur, din)?;
                    (ops::linear_forward(&cur, &p[0], &p[1], dout), Aux::None)
                }
            };
            if keep {
                tape.inputs.push(cur);
                tape.aux.push(aux);
            }
            cur = out;
        }
        Ok((cur, keep.then_some(tape)))
    }

    /// Backward pass from `grad` (gradient w.r.t. the output). Parameter
    /// gradients accumulate into `grads` when given; returns the input
    /// gradient when `need_dx`.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        grad: Tensor<T>,
        hook: &mut dyn Interceptor<T>,
        mut grads: Option<&mut [Vec<T>]>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut g = grad;
        for i in (0..self.arch.layers.len()).rev() {
            let x = &tape.inputs[i];
            let p = &self.params[self.offsets[i]..];
            let first_needed = need_dx || i > 0;
            let (dw, db) = match grads.as_deref_mut() {
                Some(gs) if !self.arch.layers[i].param_shapes().is_empty() => {
                    let (a, b) = gs[self.offsets[i]..].split_at_mut(1);
                    (Some(a[0].as_mut_slice()), Some(b[0].as_mut_slice()))
                }
                _ => (None, None),
            };
            let next = match self.arch.layers[i] {
                LayerSpec::Conv { k, stride, .. } => ops::conv_backward(x, &p[0], &g, k, stride, dw, db, first_needed),
                LayerSpec::Relu => Some(ops::relu_backward(x, &g)),
                LayerSpec::MaxPool { .. } => match &tape.aux[i] {
                    Aux::Argmax(a) => Some(ops::maxpool_backward(x.shape(), a, &g)),
                    _ => unreachable!("max pool without argmax"),
                },
                LayerSpec::AvgPool { k } => Some(ops::avgpool_backward(x.shape(), k, &g)),
                LayerSpec::GlobalAvgPool => Some(ops::gap_backward(x.shape(), &g)),
                LayerSpec::Flatten => Some(g.reshape(x.shape())?),
                LayerSpec::LayerNorm { .. } => match &tape.aux[i] {
                    Aux::Norm { means, rstds } => Some(ops::layernorm_backward(x, &p[0], means, rstds, &g, dw, db)),
                    _ => unreachable!("layer norm without statistics"),
                },
                LayerSpec::Linear { .. } => ops::linear_backward(x, &p[0], &g, dw, db, first_needed),
            };
            let Some(mut next) = next else {
                return Ok(None);
            };
            if let Some(t) = self.tap_of_layer[i] {
                next = hook.backward(t, next)?;
            }
            g = next;
        }
        Ok(Some(g))
    }
}

fn check_flat<T: Real>(x: &Tensor<T>, dim: usize) -> Result<()> {
    if x.item_len() != dim || x.height() * x.width() != 1 {
        return Err(Error::Input(format!(
            "expected flat features of size {dim}, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn uniform<T: Real>(rng: &mut Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn toy_arch() -> Architecture {
        Architecture::with_default_taps(
            3,
            vec![
                LayerSpec::Conv {
                    cin: 3,
                    cout: 4,
                    k: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2 },
                LayerSpec::Conv {
                    cin: 4,
                    cout: 6,
                    k: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::AvgPool { k: 2 },
                LayerSpec::Flatten,
                LayerSpec::LayerNorm { dim: 6 },
                LayerSpec::Linear { din: 6, dout: 5 },
            ],
        )
    }

    #[test]
    fn default_taps_cover_convs_and_head() {
        let a = toy_arch();
        let names: Vec<_> = a.taps.iter().map(|t| (t.name.as_str(), t.layer)).collect();
        assert_eq!(names, vec![("conv0", 0), ("conv1", 3), ("head", 7)]);
        let shapes = a.feature_shapes(8).unwrap();
        assert_eq!(shapes[3], [4, 2, 2]);
        assert_eq!(shapes[7], [6, 1, 1]);
        assert_eq!(a.num_classes(8).unwrap(), 5);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = stream(1, 0, 0, Stream::Init);
        let net: Network<f64> = Network::init(toy_arch(), &mut rng);
        let x = Tensor::from_vec(
            [2, 3, 8, 8],
            (0..384).map(|i| ((i * 37 % 101) as f64) / 101.0).collect(),
        )
        .unwrap();
        let wsum = |net: &Network<f64>| -> f64 {
            let (y, _) = net.forward(x.clone(), &mut NoHook, false).unwrap();
            y.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * (1.0 + i as f64 * 0.1))
                .sum()
        };
        let (y, tape) = net.forward(x.clone(), &mut NoHook, true).unwrap();
        let g = Tensor::from_vec(y.shape(), (0..y.len()).map(|i| 1.0 + i as f64 * 0.1).collect()).unwrap();
        let mut grads = net.zero_grads();
        net.backward(&tape.unwrap(), g, &mut NoHook, Some(&mut grads), true)
            .unwrap();
        let h = 1e-6;
        for (pi, idx) in [(0usize, 5usize), (1, 2), (2, 7), (4, 3), (5, 1), (6, 11), (7, 4)] {
            let mut plus = net.clone();
            plus.params_mut()[pi][idx] += h;
            let mut minus = net.clone();
            minus.params_mut()[pi][idx] -= h;
            let fd = (wsum(&plus) - wsum(&minus)) / (2.0 * h);
            let an = grads[pi][idx];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {pi}[{idx}]: {fd} vs {an}"
            );
        }
    }
}
