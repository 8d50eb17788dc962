//! A small fully connected feature extractor with exact reverse-mode
//! gradients and a compact binary weights format.
//!
//! ```text
//! FNET: "FNET" u16 version, u16 layer count,
//!       per layer: u32 out, u32 in, u8 activation (0 none, 1 relu),
//!                  out*in f32 weights (row-major), out f32 bias
//!       u8 output_norm flag
//! ```

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numkit::{dot, DenseVector, Rng, NORM_EPS};

const MAGIC: &[u8; 4] = b"FNET";
const VERSION: u16 = 1;

static REVISION: AtomicU64 = AtomicU64::new(1);

fn next_revision() -> u64 {
    REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    out_dim: usize,
    in_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    /// `weights` is row-major `out_dim × in_dim`.
    pub fn new(
        out_dim: usize,
        in_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        if weights.len() != out_dim * in_dim {
            return Err(Error::dims(out_dim * in_dim, weights.len()));
        }
        if bias.len() != out_dim {
            return Err(Error::dims(out_dim, bias.len()));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Layer { out_dim, in_dim, weights, bias, activation })
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), rounded to `f32` so that a
    /// saved net reloads bit-identically. Bias starts at zero.
    pub fn xavier(out_dim: usize, in_dim: usize, activation: Activation, rng: &mut Rng) -> Result<Self> {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..out_dim * in_dim).map(|_| f64::from(rng.uniform_range(-limit, limit) as f32)).collect();
        Layer::new(out_dim, in_dim, weights, vec![0.0; out_dim], activation)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.in_dim).zip(&self.bias).map(|(row, b)| dot(row, x) + b));
    }
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    layers: Vec<Layer>,
    output_norm: bool,
    revision: u64,
}

impl PartialEq for FeatureNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.output_norm == other.output_norm
    }
}

/// Everything `backward_*` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    norm: f64,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    /// Pre-activation of each layer.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }

    /// Norm of the last activation before output normalization.
    pub fn pre_norm_magnitude(&self) -> f64 {
        self.norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(net: &FeatureNet) -> Self {
        ParamGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += scale * y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

impl FeatureNet {
    pub fn new(layers: Vec<Layer>, output_norm: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layers"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::invalid(format!(
                    "layer {}: input dim {} does not match layer {} output dim {}",
                    i + 1,
                    pair[1].in_dim,
                    i,
                    pair[0].out_dim
                )));
            }
        }
        Ok(FeatureNet { layers, output_norm, revision: next_revision() })
    }

    /// Relu hidden layers, a linear output layer and L2 output normalization.
    pub fn mlp(d_in: usize, hidden: &[usize], d_out: usize, rng: &mut Rng) -> Result<Self> {
        let mut dims = vec![d_in];
        dims.extend_from_slice(hidden);
        dims.push(d_out);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Layer::xavier(w[1], w[0], if i == last { Activation::Identity } else { Activation::Relu }, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureNet::new(layers, true)
    }

    /// `d_in → 64 relu → 32 relu → d_feat linear → L2 norm`.
    pub fn default_architecture(d_in: usize, d_feat: usize, rng: &mut Rng) -> Result<Self> {
        FeatureNet::mlp(d_in, &[64, 32], d_feat, rng)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_norm(&self) -> bool {
        self.output_norm
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Parameter `index` of `layer`, counting weights row-major then bias.
    pub fn parameter(&self, layer: usize, index: usize) -> f64 {
        let l = &self.layers[layer];
        if index < l.weights.len() {
            l.weights[index]
        } else {
            l.bias[index - l.weights.len()]
        }
    }

    pub fn set_parameter(&mut self, layer: usize, index: usize, value: f64) {
        let l = &mut self.layers[layer];
        if index < l.weights.len() {
            l.weights[index] = value;
        } else {
            let j = index - l.weights.len();
            l.bias[j] = value;
        }
        self.revision = next_revision();
    }

    /// Plain SGD step `θ ← θ − lr·g`. A zero rate leaves the net untouched.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dims(self.layers.len(), grads.layers.len()));
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            if g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len() {
                return Err(Error::dims(l.num_parameters(), g.weights.len() + g.bias.len()));
            }
            l.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= lr * d);
            l.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= lr * d);
        }
        if self.layers.iter().any(|l| l.weights.iter().chain(&l.bias).any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite network parameter after update".into()));
        }
        self.revision = next_revision();
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::dims(self.input_dim(), input.len()));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(DenseVector, ForwardCache)> {
        self.check_input(input)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = post.last().map_or(input, |v| v.as_slice());
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.affine(x, &mut z);
            let a = match layer.activation {
                Activation::Identity => z.clone(),
                Activation::Relu => z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            };
            pre.push(z);
            post.push(a);
        }
        let mut out = post.last().unwrap().clone();
        let norm = dot(&out, &out).sqrt();
        if self.output_norm {
            let scale = norm.max(NORM_EPS);
            out.iter_mut().for_each(|v| *v /= scale);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        let cache = ForwardCache { revision: self.revision, input: input.to_vec(), pre, post, norm };
        Ok((DenseVector::from_finite(out), cache))
    }

    /// Forward pass without keeping intermediates.
    pub fn features(&self, input: &[f64]) -> Result<DenseVector> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers {
            layer.affine(&x, &mut z);
            if layer.activation == Activation::Relu {
                z.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.0 });
            }
            std::mem::swap(&mut x, &mut z);
        }
        if self.output_norm {
            let scale = dot(&x, &x).sqrt().max(NORM_EPS);
            x.iter_mut().for_each(|v| *v /= scale);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(DenseVector::from_finite(x))
    }

    /// `features` over many inputs in parallel, in input order.
    pub fn features_batch(&self, inputs: &[DenseVector]) -> Result<Vec<DenseVector>> {
        inputs.par_iter().map(|x| self.features(x)).collect()
    }

    fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        want_params: bool,
    ) -> Result<(Vec<f64>, Option<ParamGrads>)> {
        if cache.revision != self.revision {
            return Err(Error::StaleCache { cache: cache.revision, net: self.revision });
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::dims(self.output_dim(), upstream.len()));
        }
        let mut g = upstream.to_vec();
        if self.output_norm {
            let last = cache.post.last().unwrap();
            if cache.norm >= NORM_EPS {
                let proj: f64 = last.iter().zip(&g).map(|(h, gi)| h * gi).sum::<f64>() / cache.norm;
                for (gi, h) in g.iter_mut().zip(last) {
                    *gi = (*gi - h / cache.norm * proj) / cache.norm;
                }
            } else {
                g.iter_mut().for_each(|gi| *gi /= NORM_EPS);
            }
        }
        let mut grads = want_params.then(|| ParamGrads::zeros_like(self));
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (gi, z) in g.iter_mut().zip(&cache.pre[i]) {
                    if *z <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            let x = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            if let Some(grads) = grads.as_mut() {
                let lg = &mut grads.layers[i];
                for (o, &go) in g.iter().enumerate() {
                    lg.bias[o] = go;
                    if go != 0.0 {
                        let row = &mut lg.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        row.iter_mut().zip(x).for_each(|(w, xi)| *w = go * xi);
                    }
                }
            }
            let mut gx = vec![0.0; layer.in_dim];
            for (row, &go) in layer.weights.chunks_exact(layer.in_dim).zip(&g) {
                if go != 0.0 {
                    gx.iter_mut().zip(row).for_each(|(a, w)| *a += go * w);
                }
            }
            g = gx;
        }
        Ok((g, grads))
    }

    /// Gradient of `⟨upstream, forward(input)⟩` wrt the input.
    pub fn backward_input(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
        Ok(self.backward(cache, upstream, false)?.0)
    }

    /// Gradient of `⟨upstream, forward(input)⟩` wrt every parameter.
    pub fn backward_params(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<ParamGrads> {
        Ok(self.backward(cache, upstream, true)?.1.unwrap())
    }

    /// Input and parameter gradients from a single reverse sweep.
    pub fn backward_all(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(Vec<f64>, ParamGrads)> {
        let (gx, gp) = self.backward(cache, upstream, true)?;
        Ok((gx, gp.unwrap()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u16(u16::try_from(self.layers.len()).map_err(|_| Error::format("too many layers for FNET"))?);
        for (i, l) in self.layers.iter().enumerate() {
            let dim =
                |v: usize| u32::try_from(v).map_err(|_| Error::format(format!("layer {i}: dimension {v} too large")));
            w.u32(dim(l.out_dim)?);
            w.u32(dim(l.in_dim)?);
            w.u8(l.activation.code());
            l.weights.iter().chain(&l.bias).for_each(|&v| w.f32(v));
        }
        w.u8(u8::from(self.output_norm));
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "weights file");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let count = r.u16("layer count")? as usize;
        if count == 0 {
            return Err(Error::format("weights file: no layers"));
        }
        let mut layers: Vec<Layer> = Vec::with_capacity(count);
        for i in 0..count {
            let out_dim = r.u32(&format!("layer {i} output dim"))? as usize;
            let in_dim = r.u32(&format!("layer {i} input dim"))? as usize;
            if out_dim == 0 || in_dim == 0 {
                return Err(Error::format(format!(
                    "weights file: layer {i} has a zero dimension ({out_dim}x{in_dim})"
                )));
            }
            if let Some(prev) = layers.last() {
                if prev.out_dim != in_dim {
                    return Err(Error::format(format!(
                        "weights file: layer {i} declares input dim {in_dim} but layer {} outputs {}",
                        i - 1,
                        prev.out_dim
                    )));
                }
            }
            let code = r.u8(&format!("layer {i} activation"))?;
            let activation = Activation::from_code(code)
                .ok_or_else(|| Error::format(format!("weights file: layer {i} has unknown activation code {code}")))?;
            let n = out_dim.checked_mul(in_dim).ok_or_else(|| Error::format(format!("layer {i}: shape overflow")))?;
            let weights = r.f32s(n, &format!("layer {i} weights"))?;
            let bias = r.f32s(out_dim, &format!("layer {i} bias"))?;
            layers.push(Layer::new(out_dim, in_dim, weights, bias, activation)?);
        }
        let output_norm = match r.u8("output_norm flag")? {
            0 => false,
            1 => true,
            f => return Err(Error::format(format!("weights file: bad output_norm flag {f}"))),
        };
        r.finish()?;
        FeatureNet::new(layers, output_norm)
    }
}

pub fn save_weights(net: &FeatureNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, net.to_bytes()?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<FeatureNet> {
    FeatureNet::from_bytes(&fs::read(path)?)
}
