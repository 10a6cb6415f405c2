//! U-Net generator and patch-level discriminator.
//!
//! The generator is an encoder/decoder where decoder level `l` sees the
//! concatenation of encoder activation `l` and the decoder output from level
//! `l + 1`. Noise enters through dropout kept active at inference time.
//! The discriminator scores `(condition, candidate)` pairs with a grid of
//! logits, each cell looking at a bounded patch of the input.

use std::collections::BTreeSet;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, dropout_mask, leaky_relu, leaky_relu_backward, relu, relu_backward,
    split_channels, tanh_backward, Conv2d, ConvCache, ConvTCache, ConvTranspose2d, InstanceNorm,
    NormCache, Param,
};
use crate::types::Frame;

const MAX_FILTER_MULT: usize = 8;

fn filter_mult(level: usize) -> usize {
    (1usize << level.min(3)).min(MAX_FILTER_MULT)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    /// Decoder levels with dropout, counted from the bottleneck (0 = innermost).
    pub dropout_layers: BTreeSet<usize>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self::with_depth(64, 8)
    }
}

impl GeneratorSpec {
    /// Dropout on decoder levels `1..=depth-5`, the arrangement of the
    /// standard 8-level network scaled to other depths.
    pub fn with_depth(base_filters: usize, depth: usize) -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            base_filters,
            depth,
            dropout_layers: (1..=depth.saturating_sub(5)).collect(),
        }
    }

    /// Filters produced by encoder level `level` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_filters * filter_mult(level - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.base_filters == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("invalid generator spec {self:?}")));
        }
        if let Some(l) = self.dropout_layers.iter().find(|l| **l >= self.depth) {
            return Err(Error::Config(format!(
                "dropout level {l} beyond depth {}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Input sides must halve cleanly `depth` times.
    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let unit = 1usize << self.depth;
        if height < unit || width < unit || height % unit != 0 || width % unit != 0 {
            return Err(Error::BadResolution {
                height,
                width,
                depth: self.depth,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub base_filters: usize,
    pub n_layers: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            in_channels: 6,
            base_filters: 64,
            n_layers: 3,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.base_filters == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!("invalid discriminator spec {self:?}")));
        }
        Ok(())
    }

    /// Side length of the realism map for a square input side `n`, if any.
    pub fn output_side(&self, n: usize) -> Option<usize> {
        let mut n = n;
        for _ in 0..self.n_layers {
            n /= 2;
        }
        // two stride-1 kernel-4 pad-1 convolutions each remove one pixel
        n.checked_sub(2).filter(|v| *v > 0)
    }

    /// Side of the input patch seen by one output cell.
    pub fn receptive_field(&self) -> usize {
        // walk back from one output cell: two stride-1 layers then n stride-2 layers
        let mut rf = 1;
        for _ in 0..2 {
            rf += 3;
        }
        for _ in 0..self.n_layers {
            rf = (rf - 1) * 2 + 4;
        }
        rf
    }

    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let ok = |n: usize| self.output_side(n).is_some() && n % (1 << self.n_layers) == 0;
        if !(ok(height) && ok(width)) {
            return Err(Error::BadResolution {
                height,
                width,
                depth: self.n_layers,
            });
        }
        Ok(())
    }
}

/// `H x W x 3` frame in `[-1, 1]` to a `3 x H x W` tensor.
pub fn frame_to_tensor(frame: &Frame) -> Array3<f64> {
    let px = frame.pixels();
    let (h, w, c) = px.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| px[[y, x, ch]] as f64)
}

/// Inverse of [`frame_to_tensor`]. Values are clamped to `[-1, 1]` only to
/// absorb the final float-to-f32 rounding.
pub fn tensor_to_frame(t: &Array3<f64>, camera: u16, index: i64) -> Result<Frame> {
    let (c, h, w) = t.dim();
    let px = Array3::from_shape_fn((h, w, c), |(y, x, ch)| (t[[ch, y, x]] as f32).clamp(-1.0, 1.0));
    Frame::new(px, camera, index)
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub dropout: bool,
    /// Encoder level (1-based, below the bottleneck) whose skip is replaced by zeros.
    pub disabled_skip: Option<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            dropout: true,
            disabled_skip: None,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    conv: Conv2d,
    norm: Option<InstanceNorm>,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: ConvTranspose2d,
    norm: Option<InstanceNorm>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevel>,
}

struct EncoderTape {
    /// Activation fed into the leaky rectifier (absent at level 1).
    pre: Option<Array3<f64>>,
    conv: ConvCache,
    norm: Option<NormCache>,
}

struct DecoderTape {
    /// Rectifier input: the skip/decoder concatenation.
    input: Array3<f64>,
    skip_channels: usize,
    up: ConvTCache,
    norm: Option<NormCache>,
    dropout: Option<Array3<f64>>,
    /// Tanh output at the outermost level.
    output: Option<Array3<f64>>,
}

/// Intermediate state of one generator forward pass.
pub struct GeneratorTape {
    encoder: Vec<EncoderTape>,
    decoder: Vec<DecoderTape>,
}

impl Generator {
    pub fn new<R: Rng>(spec: GeneratorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let d = spec.depth;
        let mut encoder = Vec::with_capacity(d);
        for l in 1..=d {
            let cin = if l == 1 { spec.in_channels } else { spec.channels(l - 1) };
            let cout = spec.channels(l);
            let has_norm = l > 1 && l < d;
            let name = format!("enc{l}");
            let conv = Conv2d::new(&name, cin, cout, 4, 2, 1, !has_norm, rng);
            let norm = has_norm.then(|| InstanceNorm::new(&format!("{name}.norm"), cout, rng));
            encoder.push(EncoderLevel { conv, norm });
        }
        let mut decoder = Vec::with_capacity(d);
        for l in 1..=d {
            let cin = if l == d { spec.channels(d) } else { 2 * spec.channels(l) };
            let cout = if l == 1 { spec.out_channels } else { spec.channels(l - 1) };
            let has_norm = l > 1;
            let name = format!("dec{l}");
            let up = ConvTranspose2d::new(&name, cin, cout, !has_norm, rng);
            let norm = has_norm.then(|| InstanceNorm::new(&format!("{name}.norm"), cout, rng));
            decoder.push(DecoderLevel { up, norm });
        }
        Ok(Self {
            spec,
            encoder,
            decoder,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn forward<R: Rng>(
        &self,
        x: &Array3<f64>,
        rng: &mut R,
        opts: ForwardOptions,
    ) -> Result<(Array3<f64>, GeneratorTape)> {
        let (c, h, w) = x.dim();
        if c != self.spec.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "generator expects {} channels, got {c}",
                self.spec.in_channels
            )));
        }
        self.spec.check_resolution(h, w)?;
        let d = self.spec.depth;

        let mut acts: Vec<Array3<f64>> = Vec::with_capacity(d);
        let mut enc_tapes = Vec::with_capacity(d);
        for (i, level) in self.encoder.iter().enumerate() {
            let (pre, input) = if i == 0 {
                (None, x.clone())
            } else {
                let prev = acts[i - 1].clone();
                let a = leaky_relu(&prev);
                (Some(prev), a)
            };
            let (y, conv) = level.conv.forward(&input);
            let (y, norm) = match &level.norm {
                Some(n) => {
                    let (y, cache) = n.forward(&y);
                    (y, Some(cache))
                }
                None => (y, None),
            };
            acts.push(y);
            enc_tapes.push(EncoderTape { pre, conv, norm });
        }

        let mut dec_tapes: Vec<DecoderTape> = Vec::with_capacity(d);
        let mut upper: Option<Array3<f64>> = None;
        for l in (1..=d).rev() {
            let level = &self.decoder[l - 1];
            let (input, skip_channels) = match upper.take() {
                None => (acts[l - 1].clone(), 0),
                Some(up) => {
                    let skip = if opts.disabled_skip == Some(l) {
                        Array3::zeros(acts[l - 1].raw_dim())
                    } else {
                        acts[l - 1].clone()
                    };
                    let sc = skip.dim().0;
                    (concat_channels(&skip, &up), sc)
                }
            };
            let (mut y, up_cache) = level.up.forward(&relu(&input));
            let norm = level.norm.as_ref().map(|n| {
                let (out, cache) = n.forward(&y);
                y = out;
                cache
            });
            let dec_index = d - l;
            let dropout = (opts.dropout && self.spec.dropout_layers.contains(&dec_index)).then(|| {
                let mask = dropout_mask(y.dim(), rng);
                y *= &mask;
                mask
            });
            let output = (l == 1).then(|| {
                y.mapv_inplace(f64::tanh);
                y.clone()
            });
            dec_tapes.push(DecoderTape {
                input,
                skip_channels,
                up: up_cache,
                norm,
                dropout,
                output,
            });
            upper = Some(y);
        }
        dec_tapes.reverse();
        Ok((
            upper.expect("depth >= 2"),
            GeneratorTape {
                encoder: enc_tapes,
                decoder: dec_tapes,
            },
        ))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the output image) and
    /// accumulates parameter gradients.
    pub fn backward(&mut self, tape: &GeneratorTape, d_out: &Array3<f64>) {
        let d = self.spec.depth;
        let mut skip_grads: Vec<Option<Array3<f64>>> = vec![None; d];
        let mut grad = d_out.clone();
        for l in 1..=d {
            let t = &tape.decoder[l - 1];
            let level = &mut self.decoder[l - 1];
            if let Some(out) = &t.output {
                grad = tanh_backward(out, &grad);
            }
            if let Some(mask) = &t.dropout {
                grad *= mask;
            }
            if let (Some(n), Some(cache)) = (&mut level.norm, &t.norm) {
                grad = n.backward(cache, &grad);
            }
            let d_input = relu_backward(&t.input, &level.up.backward(&t.up, &grad));
            if l == d {
                skip_grads[l - 1] = Some(d_input);
            } else {
                let (d_skip, d_up) = split_channels(&d_input, t.skip_channels);
                skip_grads[l - 1] = Some(d_skip);
                grad = d_up;
            }
        }

        let mut from_above: Option<Array3<f64>> = None;
        for l in (1..=d).rev() {
            let t = &tape.encoder[l - 1];
            let level = &mut self.encoder[l - 1];
            let mut g = skip_grads[l - 1].take().expect("every level has a skip gradient");
            if let Some(a) = from_above.take() {
                g += &a;
            }
            if let (Some(n), Some(cache)) = (&mut level.norm, &t.norm) {
                g = n.backward(cache, &g);
            }
            let dx = level.conv.backward(&t.conv, &g, l > 1);
            if let (Some(dx), Some(pre)) = (dx, &t.pre) {
                from_above = Some(leaky_relu_backward(pre, &dx));
            }
        }
    }

    /// Runs the generator on a frame and returns the reconstructed frame.
    pub fn generate<R: Rng>(&self, condition: &Frame, rng: &mut R, index: i64) -> Result<Frame> {
        let (y, _) = self.forward(&frame_to_tensor(condition), rng, ForwardOptions::default())?;
        tensor_to_frame(&y, condition.camera(), index)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for e in &self.encoder {
            out.push(&e.conv.weight);
            out.extend(e.conv.bias.as_ref());
            if let Some(n) = &e.norm {
                out.extend([&n.gamma, &n.beta]);
            }
        }
        for dl in &self.decoder {
            out.push(&dl.up.weight);
            out.extend(dl.up.bias.as_ref());
            if let Some(n) = &dl.norm {
                out.extend([&n.gamma, &n.beta]);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for e in &mut self.encoder {
            out.push(&mut e.conv.weight);
            out.extend(e.conv.bias.as_mut());
            if let Some(n) = &mut e.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        for dl in &mut self.decoder {
            out.push(&mut dl.up.weight);
            out.extend(dl.up.bias.as_mut());
            if let Some(n) = &mut dl.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }
}

#[derive(Clone, Debug)]
struct DiscLayer {
    conv: Conv2d,
    activate: bool,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    layers: Vec<DiscLayer>,
}

struct DiscLayerTape {
    conv: ConvCache,
    /// Input to the leaky rectifier.
    pre_act: Option<Array3<f64>>,
}

pub struct DiscriminatorTape {
    layers: Vec<DiscLayerTape>,
    condition_channels: usize,
}

impl Discriminator {
    pub fn new<R: Rng>(spec: DiscriminatorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let nf = spec.base_filters;
        let mut layers = vec![DiscLayer {
            conv: Conv2d::new("disc0", spec.in_channels, nf, 4, 2, 1, true, rng),
            activate: true,
        }];
        let mut prev = nf;
        for n in 1..=spec.n_layers {
            let stride = if n < spec.n_layers { 2 } else { 1 };
            let cout = nf * filter_mult(n);
            let name = format!("disc{n}");
            // unnormalized: per-image statistics would couple every cell to the whole input
            layers.push(DiscLayer {
                conv: Conv2d::new(&name, prev, cout, 4, stride, 1, true, rng),
                activate: true,
            });
            prev = cout;
        }
        layers.push(DiscLayer {
            conv: Conv2d::new("disc_out", prev, 1, 4, 1, 1, true, rng),
            activate: false,
        });
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Logit map for a `(condition, candidate)` pair.
    pub fn forward(
        &self,
        condition: &Array3<f64>,
        candidate: &Array3<f64>,
    ) -> Result<(ndarray::Array2<f64>, DiscriminatorTape)> {
        if condition.dim() != candidate.dim() {
            return Err(Error::DimensionMismatch(format!(
                "condition {:?} vs candidate {:?}",
                condition.dim(),
                candidate.dim()
            )));
        }
        let (c, h, w) = condition.dim();
        if 2 * c != self.spec.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "discriminator expects {} channels, got {}",
                self.spec.in_channels,
                2 * c
            )));
        }
        self.spec.check_resolution(h, w)?;
        let mut x = concat_channels(condition, candidate);
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (mut y, conv) = layer.conv.forward(&x);
            let pre_act = layer.activate.then(|| {
                let pre = y.clone();
                y = leaky_relu(&pre);
                pre
            });
            tapes.push(DiscLayerTape { conv, pre_act });
            x = y;
        }
        let (_, oh, ow) = x.dim();
        let map = x.into_shape_with_order((oh, ow)).unwrap();
        Ok((
            map,
            DiscriminatorTape {
                layers: tapes,
                condition_channels: c,
            },
        ))
    }

    /// Backpropagates a gradient on the logit map. Parameter gradients are
    /// accumulated; the gradient w.r.t. the candidate input is returned.
    pub fn backward(&mut self, tape: &DiscriminatorTape, d_map: &ndarray::Array2<f64>) -> Array3<f64> {
        let (h, w) = d_map.dim();
        let mut g = d_map.clone().into_shape_with_order((1, h, w)).unwrap();
        let n = self.layers.len();
        for i in (0..n).rev() {
            let t = &tape.layers[i];
            let layer = &mut self.layers[i];
            if let Some(pre) = &t.pre_act {
                g = leaky_relu_backward(pre, &g);
            }
            g = layer.conv.backward(&t.conv, &g, true).expect("dx requested");
        }
        split_channels(&g, tape.condition_channels).1
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.conv.weight);
            out.extend(l.conv.bias.as_ref());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.conv.weight);
            out.extend(l.conv.bias.as_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }
}
