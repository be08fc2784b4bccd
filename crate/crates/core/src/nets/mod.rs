//! Shape learner and U-Net segmenter.
//!
//! Both networks keep their weights as named `f32` tensors. A forward pass
//! binds them onto a tape (in `f32` or `f64`) and walks the layer list.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::Dims;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize, pad: usize },
    /// Upsampling by `stride` with kernel size equal to the stride.
    ConvTranspose { stride: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl LayerSpec {
    fn conv(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv { stride, pad: k / 2 },
            cin,
            cout,
            k,
        }
    }

    fn up(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::ConvTranspose { stride: 2 },
            cin,
            cout,
            k: 2,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.k;
        match self.kind {
            LayerKind::Conv { .. } => vec![self.cout, self.cin, k, k, k],
            LayerKind::ConvTranspose { .. } => vec![self.cin, self.cout, k, k, k],
        }
    }

    /// Number of input taps feeding one output voxel.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { .. } => self.cin * self.k.pow(3),
            LayerKind::ConvTranspose { stride } => self.cin * (self.k / stride).max(1).pow(3),
        }
    }

    fn apply<'t, T: Element>(&self, x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.kind {
            LayerKind::Conv { stride, pad } => x.conv3d(w, b, stride, pad),
            LayerKind::ConvTranspose { stride } => x.conv_transpose3d(w, b, stride, 0),
        }
    }
}

/// Kaiming-normal weights and zero biases, in layer order.
pub fn init_weights(layers: &[LayerSpec], seed: u64) -> Vec<Parameter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(2 * layers.len());
    for l in layers {
        let std = (2.0 / l.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let shape = l.weight_shape();
        let n = shape.iter().product();
        let w = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
        params.push(Parameter {
            name: format!("{}.weight", l.name),
            value: Tensor::from_vec(shape, w).expect("shape"),
        });
        params.push(Parameter {
            name: format!("{}.bias", l.name),
            value: Tensor::zeros(vec![l.cout]),
        });
    }
    params
}

fn check_params(kind: &str, layers: &[LayerSpec], params: &[Parameter]) -> Result<()> {
    if params.len() != 2 * layers.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{kind} expects {} tensors, found {}",
            2 * layers.len(),
            params.len()
        )));
    }
    for (l, pair) in layers.iter().zip(params.chunks(2)) {
        let want = [(format!("{}.weight", l.name), l.weight_shape()), (format!("{}.bias", l.name), vec![l.cout])];
        for ((name, shape), p) in want.iter().zip(pair) {
            if &p.name != name || p.value.shape() != &shape[..] {
                return Err(Error::CorruptCheckpoint(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
    }
    Ok(())
}

fn check_input(op: &'static str, shape: &[usize], factor: usize) -> Result<()> {
    if shape.len() != 5 || shape[1] != 1 {
        return Err(Error::shape(op, format!("expected (N, 1, D, H, W), got {shape:?}")));
    }
    if shape[2..].iter().any(|&d| d == 0 || d % factor != 0) {
        return Err(Error::shape(op, format!("spatial extents {:?} not divisible by {factor}", &shape[2..])));
    }
    Ok(())
}

pub trait Network: Sized {
    /// Type tag stored in checkpoints.
    const KIND: &'static str;

    fn layers(&self) -> Vec<LayerSpec>;
    fn params(&self) -> &[Parameter];
    fn params_mut(&mut self) -> &mut [Parameter];
    /// Configuration as a small list of numbers, for checkpoints.
    fn config_values(&self) -> Vec<f32>;
    fn from_parts(config: &[f32], params: Vec<Parameter>) -> Result<Self>;

    /// Places every parameter on `tape`, converted to `T`.
    fn bind<'t, T: Element>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Vec<Var<'t, T>> {
        self.params().iter().map(|p| tape.leaf(p.value.cast(), requires_grad)).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

fn config_usize(kind: &str, config: &[f32], n: usize) -> Result<Vec<usize>> {
    if config.len() != n || config.iter().any(|v| !(v.fract() == 0.0 && *v >= 1.0 && *v <= 4096.0)) {
        return Err(Error::CorruptCheckpoint(format!("bad {kind} config {config:?}")));
    }
    Ok(config.iter().map(|&v| v as usize).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeNetConfig {
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for ShapeNetConfig {
    fn default() -> Self {
        ShapeNetConfig {
            levels: 4,
            base_channels: 8,
        }
    }
}

impl ShapeNetConfig {
    fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 || self.base_channels == 0 {
            return Err(Error::InvalidArgument(format!("invalid shape net config {self:?}")));
        }
        Ok(())
    }

    /// One stride-1 and one stride-2 conv per level (channels doubling from
    /// `base_channels`), then a stride-2 conv down to a single channel.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut c = 1;
        for l in 0..self.levels - 1 {
            let next = self.base_channels << l;
            out.push(LayerSpec::conv(format!("level{l}.conv"), c, next, 3, 1));
            out.push(LayerSpec::conv(format!("level{l}.down"), next, next, 3, 2));
            c = next;
        }
        out.push(LayerSpec::conv("signature", c, 1, 3, 2));
        out
    }

    pub fn signature_dims(&self, input: Dims) -> Result<Dims> {
        let f = 1 << self.levels;
        if input.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::shape("shape_forward", format!("extents {input:?} not divisible by {f}")));
        }
        Ok(input.map(|d| d / f))
    }
}

/// Maps a soft or binary label map to a low-resolution one-channel signature.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeLearner {
    pub config: ShapeNetConfig,
    params: Vec<Parameter>,
}

impl ShapeLearner {
    pub fn new(config: ShapeNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_weights(&config.layers(), seed);
        Ok(ShapeLearner { config, params })
    }

    pub fn forward<'t, T: Element>(&self, m: Var<'t, T>, params: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        check_input("shape_forward", &m.shape(), 1 << self.config.levels)?;
        let layers = self.config.layers();
        if params.len() != 2 * layers.len() {
            return Err(Error::InvalidArgument(format!("{} bound params, expected {}", params.len(), 2 * layers.len())));
        }
        let mut x = m;
        for (i, l) in layers.iter().enumerate() {
            x = l.apply(x, params[2 * i], params[2 * i + 1])?;
            if i + 1 < layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }

    /// Signature of a `(1, 1, D, H, W)` map without recording gradients.
    pub fn signature(&self, m: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let x = tape.constant(m.clone());
        Ok(self.forward(x, &params)?.value())
    }
}

impl Network for ShapeLearner {
    const KIND: &'static str = "shape_learner";

    fn layers(&self) -> Vec<LayerSpec> {
        self.config.layers()
    }

    fn params(&self) -> &[Parameter] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    fn config_values(&self) -> Vec<f32> {
        vec![self.config.levels as f32, self.config.base_channels as f32]
    }

    fn from_parts(config: &[f32], params: Vec<Parameter>) -> Result<Self> {
        let c = config_usize(Self::KIND, config, 2)?;
        let config = ShapeNetConfig {
            levels: c[0],
            base_channels: c[1],
        };
        config.validate().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        check_params(Self::KIND, &config.layers(), &params)?;
        Ok(ShapeLearner { config, params })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegNetConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            depth: 3,
            base_channels: 8,
        }
    }
}

impl SegNetConfig {
    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 6 || self.base_channels == 0 {
            return Err(Error::InvalidArgument(format!("invalid segmenter config {self:?}")));
        }
        Ok(())
    }

    /// Layer order: `enc{l}`, `down{l}` for each level, `bottleneck`, then
    /// `up{l}`, `dec{l}` from the deepest level back, then `head`.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let c = |l: usize| self.base_channels << l;
        let mut out = Vec::new();
        for l in 0..self.depth {
            let cin = if l == 0 { 1 } else { c(l) };
            out.push(LayerSpec::conv(format!("enc{l}"), cin, c(l), 3, 1));
            out.push(LayerSpec::conv(format!("down{l}"), c(l), c(l + 1), 3, 2));
        }
        out.push(LayerSpec::conv("bottleneck", c(self.depth), c(self.depth), 3, 1));
        for l in (0..self.depth).rev() {
            out.push(LayerSpec::up(format!("up{l}"), c(l + 1), c(l)));
            out.push(LayerSpec::conv(format!("dec{l}"), 2 * c(l), c(l), 3, 1));
        }
        out.push(LayerSpec::conv("head", c(0), 1, 1, 1));
        out
    }
}

/// 3D U-Net with one sigmoid output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub config: SegNetConfig,
    params: Vec<Parameter>,
}

impl SegNet {
    pub fn new(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_weights(&config.layers(), seed);
        Ok(SegNet { config, params })
    }

    /// Per-voxel foreground probabilities, same shape as `image`.
    pub fn forward<'t, T: Element>(&self, image: Var<'t, T>, params: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        check_input("seg_forward", &image.shape(), 1 << self.config.depth)?;
        let layers = self.config.layers();
        if params.len() != 2 * layers.len() {
            return Err(Error::InvalidArgument(format!("{} bound params, expected {}", params.len(), 2 * layers.len())));
        }
        let mut next = 0;
        let mut layer = |x: Var<'t, T>| {
            let i = next;
            next += 1;
            layers[i].apply(x, params[2 * i], params[2 * i + 1])
        };
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = image;
        for _ in 0..self.config.depth {
            let s = layer(x)?.relu()?;
            skips.push(s);
            x = layer(s)?.relu()?;
        }
        x = layer(x)?.relu()?;
        for s in skips.into_iter().rev() {
            let up = layer(x)?.relu()?;
            x = layer(up.concat_channels(s)?)?.relu()?;
        }
        layer(x)?.sigmoid()
    }

    /// Prediction for a `(1, 1, D, H, W)` image without recording gradients.
    pub fn predict(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let x = tape.constant(image.clone());
        Ok(self.forward(x, &params)?.value())
    }
}

impl Network for SegNet {
    const KIND: &'static str = "seg_net";

    fn layers(&self) -> Vec<LayerSpec> {
        self.config.layers()
    }

    fn params(&self) -> &[Parameter] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    fn config_values(&self) -> Vec<f32> {
        vec![self.config.depth as f32, self.config.base_channels as f32]
    }

    fn from_parts(config: &[f32], params: Vec<Parameter>) -> Result<Self> {
        let c = config_usize(Self::KIND, config, 2)?;
        let config = SegNetConfig {
            depth: c[0],
            base_channels: c[1],
        };
        config.validate().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        check_params(Self::KIND, &config.layers(), &params)?;
        Ok(SegNet { config, params })
    }
}
