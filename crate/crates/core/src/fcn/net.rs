//! Layer graph of the miniature FCN-8s and its parameters.
//!
//! The network is a list of layers executed in order. Each layer reads the
//! output of the previous layer unless it names an explicit `input`, and an
//! `add` layer also reads its `skip_source`. That is enough to express the
//! three-resolution skip topology:
//!
//! ```text
//! input 64x64x1
//!  conv3(16) relu conv3(16) relu pool   -> S1 32x32x16 -> score(2) ---------------+
//!  conv3(32) relu conv3(32) relu pool   -> S2 16x16x32 -> score(2) ---------+     |
//!  conv3(64) relu conv3(64) relu pool   -> S3  8x8x64                       |     |
//!  conv3(64) relu score(2) -> up2 -> add <----------------------------------+     |
//!                                    up2 -> add <---------------------------------+
//!                                           up2 -> softmax  64x64x2
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{self, ConvGeom, Padding, UpGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Relu,
    Maxpool,
    Upconv,
    Add,
    Softmax,
}

impl LayerKind {
    pub(crate) fn code(self) -> u32 {
        match self {
            LayerKind::Conv => 1,
            LayerKind::Relu => 2,
            LayerKind::Maxpool => 3,
            LayerKind::Upconv => 4,
            LayerKind::Add => 5,
            LayerKind::Softmax => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Kernel size for conv/upconv, window size for pooling.
    pub kernel: usize,
    /// Stride; the upsampling factor for upconv.
    pub stride: usize,
    pub channels_in: usize,
    pub channels_out: usize,
    /// Source layer; `None` reads the previous layer (or the network input).
    pub input: Option<usize>,
    /// Second operand of an `add` layer.
    pub skip_source: Option<usize>,
}

impl LayerSpec {
    fn conv(kernel: usize, cin: usize, cout: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel,
            stride: 1,
            channels_in: cin,
            channels_out: cout,
            input: None,
            skip_source: None,
        }
    }

    fn elementwise(kind: LayerKind, channels: usize) -> Self {
        Self {
            kind,
            kernel: 0,
            stride: 1,
            channels_in: channels,
            channels_out: channels,
            input: None,
            skip_source: None,
        }
    }

    fn pool(channels: usize) -> Self {
        Self {
            kernel: 2,
            stride: 2,
            ..Self::elementwise(LayerKind::Maxpool, channels)
        }
    }

    fn up(factor: usize, channels: usize) -> Self {
        Self {
            kernel: 2 * factor - factor % 2,
            stride: factor,
            ..Self::elementwise(LayerKind::Upconv, channels)
        }
    }

    fn from(mut self, source: usize) -> Self {
        self.input = Some(source);
        self
    }

    pub fn conv_geom(&self) -> ConvGeom {
        ConvGeom {
            kernel: self.kernel,
            stride: self.stride,
            cin: self.channels_in,
            cout: self.channels_out,
            padding: Padding::Same,
        }
    }

    pub fn up_geom(&self) -> UpGeom {
        UpGeom {
            factor: self.stride,
            cin: self.channels_in,
            cout: self.channels_out,
        }
    }

    /// `(weight count, bias count)`.
    pub fn param_counts(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv => (self.conv_geom().weight_len(), self.channels_out),
            LayerKind::Upconv => (self.up_geom().weight_len(), self.channels_out),
            _ => (0, 0),
        }
    }
}

/// Where a layer reads a tensor from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Input,
    Layer(usize),
}

/// Validated layer graph for a fixed square input size.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    input_size: usize,
    layers: Vec<LayerSpec>,
    shapes: Vec<(usize, usize, usize)>,
}

impl Architecture {
    pub fn new(input_size: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let bad = |i: usize, why: String| Error::ShapeMismatch {
            op: "architecture",
            detail: format!("layer {i}: {why}"),
        };
        if input_size == 0 || layers.is_empty() {
            return Err(bad(0, "empty network".into()));
        }
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(layers.len());
        for (i, spec) in layers.iter().enumerate() {
            let src = match spec.input {
                Some(j) if j >= i => return Err(bad(i, format!("reads later layer {j}"))),
                Some(j) => shapes[j],
                None if i == 0 => (input_size, input_size, 1),
                None => shapes[i - 1],
            };
            let (h, w, d) = src;
            if d != spec.channels_in {
                return Err(bad(i, format!("expects {} channels, receives {d}", spec.channels_in)));
            }
            let out = match spec.kind {
                LayerKind::Conv => {
                    if spec.kernel == 0 || spec.stride == 0 {
                        return Err(bad(i, "zero kernel or stride".into()));
                    }
                    let (oh, ow) = spec.conv_geom().output_shape(h, w);
                    (oh, ow, spec.channels_out)
                }
                LayerKind::Relu | LayerKind::Softmax => {
                    if spec.channels_out != d {
                        return Err(bad(i, "elementwise layer changes channels".into()));
                    }
                    src
                }
                LayerKind::Maxpool => {
                    if spec.stride == 0 || h % spec.stride != 0 || w % spec.stride != 0 || spec.kernel != spec.stride {
                        return Err(bad(i, format!("cannot pool {h}x{w} by {}", spec.stride)));
                    }
                    (h / spec.stride, w / spec.stride, d)
                }
                LayerKind::Upconv => {
                    let f = spec.stride;
                    if f == 0 || spec.kernel != 2 * f - f % 2 {
                        return Err(bad(i, format!("kernel {} does not match factor {f}", spec.kernel)));
                    }
                    (h * f, w * f, spec.channels_out)
                }
                LayerKind::Add => {
                    let j = spec
                        .skip_source
                        .filter(|&j| j < i)
                        .ok_or_else(|| bad(i, "add needs an earlier skip source".into()))?;
                    if shapes[j] != src {
                        return Err(bad(i, format!("adds {:?} to {src:?}", shapes[j])));
                    }
                    src
                }
            };
            shapes.push(out);
        }
        let last = layers.last().unwrap();
        let final_shape = *shapes.last().unwrap();
        if last.kind != LayerKind::Softmax || final_shape != (input_size, input_size, 2) {
            return Err(bad(
                layers.len() - 1,
                format!("network must end in a 2-channel softmax at input resolution, got {final_shape:?}"),
            ));
        }
        Ok(Self {
            input_size,
            layers,
            shapes,
        })
    }

    /// The miniature FCN-8s for a square input whose side is divisible by 8.
    pub fn mini_fcn8s(input_size: usize) -> Result<Self> {
        if input_size == 0 || !input_size.is_multiple_of(8) {
            return Err(Error::param(
                "inputSize",
                format!("{input_size} is not a positive multiple of 8"),
            ));
        }
        use LayerKind::*;
        let relu = |c| LayerSpec::elementwise(Relu, c);
        let layers = vec![
            LayerSpec::conv(3, 1, 16), // 0
            relu(16),
            LayerSpec::conv(3, 16, 16),
            relu(16),
            LayerSpec::pool(16), // 4: S1 at /2
            LayerSpec::conv(3, 16, 32),
            relu(32),
            LayerSpec::conv(3, 32, 32),
            relu(32),
            LayerSpec::pool(32), // 9: S2 at /4
            LayerSpec::conv(3, 32, 64),
            relu(64),
            LayerSpec::conv(3, 64, 64),
            relu(64),
            LayerSpec::pool(64), // 14: S3 at /8
            LayerSpec::conv(3, 64, 64),
            relu(64),
            LayerSpec::conv(1, 64, 2),         // 17: score S3
            LayerSpec::up(2, 2),               // 18
            LayerSpec::conv(1, 32, 2).from(9), // 19: score S2
            LayerSpec {
                skip_source: Some(18),
                ..LayerSpec::elementwise(Add, 2)
            }, // 20
            LayerSpec::up(2, 2),               // 21
            LayerSpec::conv(1, 16, 2).from(4), // 22: score S1
            LayerSpec {
                skip_source: Some(21),
                ..LayerSpec::elementwise(Add, 2)
            }, // 23
            LayerSpec::up(2, 2),               // 24
            LayerSpec::elementwise(Softmax, 2),
        ];
        Self::new(input_size, layers)
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn output_shape(&self, layer: usize) -> (usize, usize, usize) {
        self.shapes[layer]
    }

    fn source(&self, i: usize) -> Source {
        match self.layers[i].input {
            Some(j) => Source::Layer(j),
            None if i == 0 => Source::Input,
            None => Source::Layer(i - 1),
        }
    }

    /// SHA-256 over a canonical description of the input size and layers.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"lvseg-fcn/1;");
        h.update((self.input_size as u64).to_le_bytes());
        for l in &self.layers {
            h.update(l.kind.code().to_le_bytes());
            for v in [l.kernel, l.stride, l.channels_in, l.channels_out] {
                h.update((v as u64).to_le_bytes());
            }
            for v in [l.input, l.skip_source] {
                h.update(v.map_or(u64::MAX, |v| v as u64).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Weights and biases of one layer; empty for parameter-free layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        Self {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// A network's architecture with one [`LayerParams`] per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub architecture: Architecture,
    pub layers: Vec<LayerParams>,
}

/// Per-layer outputs of a forward pass, kept for backpropagation.
pub struct ForwardCache {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    pool_routes: Vec<Option<Vec<usize>>>,
}

impl ForwardCache {
    /// Pre-softmax scores.
    pub fn logits(&self) -> &Tensor {
        &self.outputs[self.outputs.len() - 2]
    }

    pub fn probabilities(&self) -> &Tensor {
        self.outputs.last().unwrap()
    }
}

impl NetworkParams {
    /// He-normal convolution weights, bilinear upconv weights, zero biases.
    pub fn init(architecture: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(architecture, &mut rng)
    }

    pub(crate) fn init_with(architecture: Architecture, rng: &mut ChaCha8Rng) -> Self {
        let layers = architecture
            .layers
            .iter()
            .map(|spec| match spec.kind {
                LayerKind::Conv => {
                    let fan_in = (spec.kernel * spec.kernel * spec.channels_in) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                    let (nw, nb) = spec.param_counts();
                    LayerParams {
                        weights: (0..nw).map(|_| normal.sample(rng)).collect(),
                        bias: vec![0.0; nb],
                    }
                }
                LayerKind::Upconv => LayerParams {
                    weights: layers::bilinear_weights(&spec.up_geom()),
                    bias: vec![0.0; spec.channels_out],
                },
                _ => LayerParams::default(),
            })
            .collect();
        Self { architecture, layers }
    }

    /// All parameters set to zero (upconvs included).
    pub fn zeros(architecture: Architecture) -> Self {
        let layers = architecture
            .layers
            .iter()
            .map(|spec| {
                let (nw, nb) = spec.param_counts();
                LayerParams {
                    weights: vec![0.0; nw],
                    bias: vec![0.0; nb],
                }
            })
            .collect();
        Self { architecture, layers }
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.architecture.fingerprint()
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        if self.layers.len() != self.architecture.layers.len() {
            return Err(Error::ShapeMismatch {
                op: "parameters",
                detail: format!(
                    "{} parameter sets for {} layers",
                    self.layers.len(),
                    self.architecture.layers.len()
                ),
            });
        }
        for (i, (spec, p)) in self.architecture.layers.iter().zip(&self.layers).enumerate() {
            if spec.param_counts() != (p.weights.len(), p.bias.len()) {
                return Err(Error::ShapeMismatch {
                    op: "parameters",
                    detail: format!("layer {i} expects {:?} parameters", spec.param_counts()),
                });
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<LayerParams> {
        self.layers.iter().map(LayerParams::zeros_like).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardCache> {
        let arch = &self.architecture;
        let s = arch.input_size;
        if x.shape() != (s, s, 1) {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("input {:?}, network expects {s}x{s}x1", x.shape()),
            });
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(arch.layers.len());
        let mut pool_routes = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.iter().enumerate() {
            let src = match arch.source(i) {
                Source::Input => x,
                Source::Layer(j) => &outputs[j],
            };
            let p = &self.layers[i];
            let mut route = None;
            let out = match spec.kind {
                LayerKind::Conv => layers::conv2d_forward(src, &p.weights, &p.bias, &spec.conv_geom())?,
                LayerKind::Relu => layers::relu_forward(src),
                LayerKind::Maxpool => {
                    let po = layers::maxpool_forward(src, spec.kernel, spec.stride)?;
                    route = Some(po.argmax);
                    po.output
                }
                LayerKind::Upconv => layers::upconv_forward(src, &p.weights, &p.bias, &spec.up_geom())?,
                LayerKind::Add => layers::add_forward(src, &outputs[spec.skip_source.unwrap()])?,
                LayerKind::Softmax => layers::softmax(src),
            };
            outputs.push(out);
            pool_routes.push(route);
        }
        Ok(ForwardCache {
            input: x.clone(),
            outputs,
            pool_routes,
        })
    }

    /// Backpropagates a gradient on the pre-softmax scores.
    ///
    /// Returns parameter gradients and the gradient on the network input.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<(Vec<LayerParams>, Tensor)> {
        let arch = &self.architecture;
        let n = arch.layers.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut input_grad = Tensor::zeros(cache.input.h, cache.input.w, cache.input.d);
        let mut param_grads = self.zero_grads();
        let logits_layer = match arch.source(n - 1) {
            Source::Layer(j) => j,
            Source::Input => {
                return Err(Error::ShapeMismatch {
                    op: "backward",
                    detail: "softmax reads the network input".into(),
                })
            }
        };
        if grad_logits.shape() != cache.outputs[logits_layer].shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "gradient {:?} for logits {:?}",
                    grad_logits.shape(),
                    cache.outputs[logits_layer].shape()
                ),
            });
        }
        grads[logits_layer] = Some(grad_logits.clone());

        fn accumulate(grads: &mut [Option<Tensor>], input_grad: &mut Tensor, to: Source, g: Tensor) {
            let slot = match to {
                Source::Input => {
                    input_grad.add_assign(&g);
                    return;
                }
                Source::Layer(j) => &mut grads[j],
            };
            match slot {
                Some(existing) => existing.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for i in (0..=logits_layer).rev() {
            let Some(g) = grads[i].take() else { continue };
            let spec = &arch.layers[i];
            let src_id = arch.source(i);
            let src = match src_id {
                Source::Input => &cache.input,
                Source::Layer(j) => &cache.outputs[j],
            };
            let p = &self.layers[i];
            match spec.kind {
                LayerKind::Conv => {
                    let cg = layers::conv2d_backward(src, &p.weights, &g, &spec.conv_geom())?;
                    param_grads[i] = LayerParams {
                        weights: cg.weights,
                        bias: cg.bias,
                    };
                    accumulate(&mut grads, &mut input_grad, src_id, cg.input);
                }
                LayerKind::Upconv => {
                    let cg = layers::upconv_backward(src, &p.weights, &g, &spec.up_geom())?;
                    param_grads[i] = LayerParams {
                        weights: cg.weights,
                        bias: cg.bias,
                    };
                    accumulate(&mut grads, &mut input_grad, src_id, cg.input);
                }
                LayerKind::Relu => {
                    let gx = layers::relu_backward(src, &g);
                    accumulate(&mut grads, &mut input_grad, src_id, gx);
                }
                LayerKind::Maxpool => {
                    let route = cache.pool_routes[i].as_ref().expect("pool layer records its routes");
                    let gx = layers::maxpool_backward(&g, route, src.shape())?;
                    accumulate(&mut grads, &mut input_grad, src_id, gx);
                }
                LayerKind::Add => {
                    let skip = spec.skip_source.unwrap();
                    accumulate(&mut grads, &mut input_grad, Source::Layer(skip), g.clone());
                    accumulate(&mut grads, &mut input_grad, src_id, g);
                }
                LayerKind::Softmax => {
                    return Err(Error::ShapeMismatch {
                        op: "backward",
                        detail: format!("softmax at layer {i} is not the output layer"),
                    })
                }
            }
        }
        Ok((param_grads, input_grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mini_architecture_shapes() {
        let a = Architecture::mini_fcn8s(64).unwrap();
        assert_eq!(a.output_shape(4), (32, 32, 16));
        assert_eq!(a.output_shape(9), (16, 16, 32));
        assert_eq!(a.output_shape(14), (8, 8, 64));
        assert_eq!(a.output_shape(17), (8, 8, 2));
        assert_eq!(a.output_shape(20), (16, 16, 2));
        assert_eq!(a.output_shape(23), (32, 32, 2));
        assert_eq!(a.output_shape(25), (64, 64, 2));
        assert!(Architecture::mini_fcn8s(60).is_err());
        assert_ne!(a.fingerprint(), Architecture::mini_fcn8s(32).unwrap().fingerprint());
    }

    #[test]
    fn rejects_miswired_skip() {
        let a = Architecture::mini_fcn8s(32).unwrap();
        let mut layers = a.layers().to_vec();
        layers[20].skip_source = Some(17); // 8x8 scores added to 16x16
        assert!(Architecture::new(32, layers).is_err());
    }

    #[test]
    fn zero_params_give_even_odds() {
        let p = NetworkParams::zeros(Architecture::mini_fcn8s(16).unwrap());
        let x = Tensor::new(16, 16, 1, (0..256).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let c = p.forward(&x).unwrap();
        assert!(c.probabilities().data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn probabilities_are_normalized_and_deterministic() {
        let p = NetworkParams::init(Architecture::mini_fcn8s(16).unwrap(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::new(16, 16, 1, (0..256).map(|_| rng.random::<f64>()).collect()).unwrap();
        let a = p.forward(&x).unwrap();
        for px in a.probabilities().data.chunks(2) {
            assert!((px[0] + px[1] - 1.0).abs() < 1e-12);
            assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let b = NetworkParams::init(Architecture::mini_fcn8s(16).unwrap(), 3)
            .forward(&x)
            .unwrap();
        assert_eq!(a.probabilities(), b.probabilities());
        assert!(p.forward(&Tensor::zeros(8, 8, 1)).is_err());
    }

    #[test]
    fn pre_pool_activations_are_translation_covariant() {
        let p = NetworkParams::init(Architecture::mini_fcn8s(32).unwrap(), 5);
        let spike = |r: usize, c: usize| {
            let mut t = Tensor::zeros(32, 32, 1);
            *t.at_mut(r, c, 0) = 1.0;
            t
        };
        let delta = 3;
        let a = p.forward(&spike(12, 12)).unwrap();
        let b = p.forward(&spike(12 + delta, 12 + delta)).unwrap();
        let (ta, tb) = (&a.outputs[3], &b.outputs[3]);
        for r in 4..24 {
            for c in 4..24 {
                for ch in 0..16 {
                    assert_eq!(ta.at(r, c, ch), tb.at(r + delta, c + delta, ch));
                }
            }
        }
    }
}
