// SPDX-License-Identifier: Apache-2.0

//! Layer specs, parameter storage and the two network builders.
//!
//! A [`Network`] is a straight chain of [`LayerSpec`]s. The discriminator
//! additionally marks two layers whose (flattened) outputs are the code
//! layer `f(x)` with `K` units and the wide layer `h(x)` with `M > K` units.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv3x3 { in_ch: usize, out_ch: usize, stride: usize, pad: usize },
    /// Network-in-network layer: a 1×1 convolution.
    Nin1x1 { in_ch: usize, out_ch: usize },
    Dense { in_units: usize, out_units: usize },
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    AvgPoolGlobal,
    /// Per-example target shape.
    Reshape { shape: Vec<usize> },
    Upsample2x,
    /// Batch-statistics normalization with a learned per-channel affine.
    BatchStatsNorm { channels: usize },
}

impl LayerSpec {
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv3x3 { in_ch, out_ch, .. } => vec![vec![out_ch, in_ch, 3, 3], vec![out_ch, 1, 1]],
            LayerSpec::Nin1x1 { in_ch, out_ch } => vec![vec![out_ch, in_ch, 1, 1], vec![out_ch, 1, 1]],
            LayerSpec::Dense { in_units, out_units } => vec![vec![in_units, out_units], vec![out_units]],
            LayerSpec::BatchStatsNorm { channels } => vec![vec![1, channels, 1, 1], vec![1, channels, 1, 1]],
            _ => Vec::new(),
        }
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |ch: usize| -> Result<(usize, usize)> {
            match input {
                [c, h, w] if *c == ch => Ok((*h, *w)),
                _ => Err(dim_err!("{self:?} expects {ch}×H×W input, got {input:?}")),
            }
        };
        match self {
            LayerSpec::Conv3x3 { in_ch, out_ch, stride, pad } => {
                let (h, w) = spatial(*in_ch)?;
                if *stride == 0 || h + 2 * pad < 3 || w + 2 * pad < 3 {
                    return Err(dim_err!("{self:?} does not fit {h}×{w} input"));
                }
                Ok(vec![*out_ch, (h + 2 * pad - 3) / stride + 1, (w + 2 * pad - 3) / stride + 1])
            }
            LayerSpec::Nin1x1 { in_ch, out_ch } => {
                let (h, w) = spatial(*in_ch)?;
                Ok(vec![*out_ch, h, w])
            }
            LayerSpec::Dense { in_units, out_units } => {
                let n: usize = input.iter().product();
                if n != *in_units {
                    return Err(dim_err!("{self:?} got {n} input units"));
                }
                Ok(vec![*out_units])
            }
            LayerSpec::AvgPoolGlobal => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => Err(dim_err!("avg_pool_global expects C×H×W, got {input:?}")),
            },
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(dim_err!("cannot reshape {input:?} to {shape:?}"));
                }
                Ok(shape.clone())
            }
            LayerSpec::Upsample2x => match input {
                [c, h, w] => Ok(vec![*c, 2 * h, 2 * w]),
                _ => Err(dim_err!("upsample2x expects C×H×W, got {input:?}")),
            },
            LayerSpec::BatchStatsNorm { channels } => {
                spatial(*channels)?;
                Ok(input.to_vec())
            }
            LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh | LayerSpec::Sigmoid => Ok(input.to_vec()),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        match self {
            LayerSpec::Conv3x3 { stride, pad, .. } => {
                let y = tape.conv2d(x, params[0], *stride, *pad)?;
                tape.add(y, params[1])
            }
            LayerSpec::Nin1x1 { .. } => {
                let y = tape.conv2d(x, params[0], 1, 0)?;
                tape.add(y, params[1])
            }
            LayerSpec::Dense { .. } => {
                let flat = tape.flatten(x)?;
                let y = tape.matmul(flat, params[0])?;
                tape.add(y, params[1])
            }
            LayerSpec::LeakyRelu { slope } => Ok(tape.leaky_relu(x, *slope)),
            LayerSpec::Tanh => Ok(tape.tanh(x)),
            LayerSpec::Sigmoid => Ok(tape.sigmoid(x)),
            LayerSpec::AvgPoolGlobal => tape.avg_pool_global(x),
            LayerSpec::Reshape { shape } => {
                let mut full = vec![tape.shape(x)[0]];
                full.extend(shape);
                tape.reshape(x, &full)
            }
            LayerSpec::Upsample2x => tape.upsample2x(x),
            LayerSpec::BatchStatsNorm { .. } => {
                let n = tape.batch_norm(x)?;
                let s = tape.mul(n, params[0])?;
                tape.add(s, params[1])
            }
        }
    }

    /// Initial parameter values: Gaussian weights, zero biases, unit norm scale.
    fn init_params(&self, rng: &mut impl Rng) -> Vec<Tensor> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let shapes = self.param_shapes();
        match self {
            LayerSpec::Conv3x3 { .. } | LayerSpec::Nin1x1 { .. } | LayerSpec::Dense { .. } => {
                let w = &shapes[0];
                let n = w.iter().product();
                let data = (0..n).map(|_| normal.sample(rng)).collect();
                vec![Tensor::new(w.clone(), data).expect("shape"), Tensor::zeros(&shapes[1])]
            }
            LayerSpec::BatchStatsNorm { .. } => vec![Tensor::full(&shapes[0], 1.0), Tensor::zeros(&shapes[1])],
            _ => Vec::new(),
        }
    }
}

/// Values produced by one forward pass, all on the same tape.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub output: Var,
    /// Code layer, flattened to `N × K`.
    pub f: Option<Var>,
    /// Wide layer, flattened to `N × M`.
    pub h: Option<Var>,
}

/// Plain-value counterpart of [`Forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Outputs {
    pub output: Tensor,
    pub f: Option<Tensor>,
    pub h: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Tensor>,
    param_ranges: Vec<Range<usize>>,
    shapes: Vec<Vec<usize>>,
    tap_f: Option<usize>,
    tap_h: Option<usize>,
}

impl Network {
    /// Validates the chain and draws fresh parameters.
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        tap_f: Option<usize>,
        tap_h: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let params = layers.iter().flat_map(|l| l.init_params(rng)).collect();
        Self::from_parts(input_shape, layers, params, tap_f, tap_h)
    }

    /// Reassembles a network from stored parameters, checking every shape.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Tensor>,
        tap_f: Option<usize>,
        tap_h: Option<usize>,
    ) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut param_ranges = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        let mut next = 0;
        for layer in &layers {
            cur = layer.output_shape(&cur)?;
            shapes.push(cur.clone());
            let expected = layer.param_shapes();
            let range = next..next + expected.len();
            for (i, shape) in range.clone().zip(&expected) {
                match params.get(i) {
                    Some(p) if p.shape() == &shape[..] => {}
                    Some(p) => return Err(dim_err!("{layer:?}: parameter shape {:?}, expected {shape:?}", p.shape())),
                    None => return Err(dim_err!("missing parameters for {layer:?}")),
                }
            }
            next = range.end;
            param_ranges.push(range);
        }
        if next != params.len() {
            return Err(dim_err!("{} parameters for layers that declare {next}", params.len()));
        }
        for tap in [tap_f, tap_h].into_iter().flatten() {
            if tap >= layers.len() {
                return Err(dim_err!("tap index {tap} past the last layer"));
            }
        }
        Ok(Self { input_shape, layers, params, param_ranges, shapes, tap_f, tap_h })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_range(&self, layer: usize) -> Range<usize> {
        self.param_ranges[layer].clone()
    }

    pub fn taps(&self) -> (Option<usize>, Option<usize>) {
        (self.tap_f, self.tap_h)
    }

    /// Per-example output shape of the last layer.
    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map_or(&self.input_shape, Vec::as_slice)
    }

    /// `K`: units in the code layer.
    pub fn f_dim(&self) -> Option<usize> {
        self.tap_f.map(|t| self.shapes[t].iter().product())
    }

    /// `M`: units in the wide layer.
    pub fn h_dim(&self) -> Option<usize> {
        self.tap_h.map(|t| self.shapes[t].iter().product())
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Forward> {
        let s = tape.shape(x);
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(dim_err!("input {:?} does not match network input N×{:?}", s, self.input_shape));
        }
        let (mut f, mut h) = (None, None);
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.apply(tape, cur, &params[self.param_ranges[i].clone()])?;
            if self.tap_f == Some(i) {
                f = Some(tape.flatten(cur)?);
            }
            if self.tap_h == Some(i) {
                h = Some(tape.flatten(cur)?);
            }
        }
        Ok(Forward { output: cur, f, h })
    }

    /// Forward pass on a throwaway tape, returning values only.
    pub fn forward_values(&self, x: &Tensor) -> Result<Outputs> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv)?;
        Ok(Outputs {
            output: tape.value(out.output).clone(),
            f: out.f.map(|v| tape.value(v).clone()),
            h: out.h.map(|v| tape.value(v).clone()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Class-labelled images; codes of `code_bits` from a dense layer.
    Retrieval,
    /// Patch pairs; codes from the pooled wide NiN layer.
    Matching,
    /// Retrieval topology with any code length, for quick experiments.
    Toy,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(Task::Retrieval),
            "matching" | "pairs" => Ok(Task::Matching),
            "toy" => Ok(Task::Toy),
            other => Err(config_err!("unknown task {other:?} (expected retrieval, matching or toy)")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Retrieval => "retrieval",
            Task::Matching => "matching",
            Task::Toy => "toy",
        })
    }
}

/// Architecture knobs shared by both builders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchConfig {
    pub task: Task,
    /// Code length for retrieval and toy; ignored for matching.
    pub code_bits: usize,
    /// Every channel count is divided by this (1 = published widths).
    pub channel_div: usize,
    /// Permit retrieval code lengths other than 16, 32 and 64.
    pub free_bits: bool,
}

impl ArchConfig {
    pub fn paper(task: Task, code_bits: usize) -> Self {
        Self { task, code_bits, channel_div: 1, free_bits: false }
    }

    /// Same topology with a quarter of the channels.
    pub fn desk(task: Task, code_bits: usize) -> Self {
        Self { channel_div: 4, ..Self::paper(task, code_bits) }
    }

    fn width(&self, published: usize) -> usize {
        (published / self.channel_div).max(1)
    }
}

fn conv_stack(in_ch: usize, first: usize, second: usize) -> Vec<LayerSpec> {
    let lrelu = LayerSpec::LeakyRelu { slope: LEAKY_SLOPE };
    let plan = [
        (in_ch, first, 1, 1),
        (first, first, 1, 1),
        (first, first, 2, 1),
        (first, second, 1, 1),
        (second, second, 1, 1),
        (second, second, 2, 1),
        (second, second, 1, 0),
    ];
    plan.iter()
        .flat_map(|&(i, o, stride, pad)| {
            [LayerSpec::Conv3x3 { in_ch: i, out_ch: o, stride, pad }, lrelu.clone()]
        })
        .collect()
}

/// Discriminator for `input_shape = [C, H, W]`.
///
/// Both variants share a seven-layer 3×3 conv stack (three narrow layers,
/// the third with stride 2, then four wide ones with a stride-2 and a final
/// unpadded layer). Retrieval continues with two NiN layers, global
/// pooling (`h`), a dense code layer (`f`) and the logit. Matching continues
/// with a wide NiN layer whose spatial map is `h` and whose pooled output
/// is `f`, then a narrower NiN-equivalent dense layer and the logit.
pub fn build_discriminator(arch: &ArchConfig, input_shape: &[usize], rng: &mut impl Rng) -> Result<Network> {
    if arch.channel_div == 0 {
        return Err(config_err!("channel_div must be at least 1"));
    }
    let [in_ch, _, _] = input_shape[..] else {
        return Err(config_err!("discriminator input must be C×H×W, got {input_shape:?}"));
    };
    let lrelu = LayerSpec::LeakyRelu { slope: LEAKY_SLOPE };
    let (layers, tap_f, tap_h) = match arch.task {
        Task::Retrieval | Task::Toy => {
            if !arch.free_bits && arch.task != Task::Toy && ![16, 32, 64].contains(&arch.code_bits) {
                return Err(config_err!("code_bits must be 16, 32 or 64 (got {})", arch.code_bits));
            }
            if arch.code_bits == 0 {
                return Err(config_err!("code_bits must be positive"));
            }
            let (a, b) = (arch.width(96), arch.width(192));
            let mut l = conv_stack(in_ch, a, b);
            l.extend([
                LayerSpec::Nin1x1 { in_ch: b, out_ch: b },
                lrelu.clone(),
                LayerSpec::Nin1x1 { in_ch: b, out_ch: b },
                lrelu,
                LayerSpec::AvgPoolGlobal,
            ]);
            let tap_h = l.len() - 1;
            l.push(LayerSpec::Dense { in_units: b, out_units: arch.code_bits });
            let tap_f = l.len() - 1;
            l.push(LayerSpec::Dense { in_units: arch.code_bits, out_units: 1 });
            (l, tap_f, tap_h)
        }
        Task::Matching => {
            let (a, b) = (arch.width(96), arch.width(128));
            let (wide, narrow) = (arch.width(256), arch.width(128));
            let mut l = conv_stack(in_ch, a, b);
            l.extend([LayerSpec::Nin1x1 { in_ch: b, out_ch: wide }, lrelu.clone()]);
            let tap_h = l.len() - 1;
            l.push(LayerSpec::AvgPoolGlobal);
            let tap_f = l.len() - 1;
            l.extend([
                LayerSpec::Dense { in_units: wide, out_units: narrow },
                lrelu,
                LayerSpec::Dense { in_units: narrow, out_units: 1 },
            ]);
            (l, tap_f, tap_h)
        }
    };
    let net = Network::new(input_shape.to_vec(), layers, Some(tap_f), Some(tap_h), rng)
        .map_err(|e| config_err!("discriminator does not fit input {input_shape:?}: {e}"))?;
    let (k, m) = (net.f_dim().expect("tap"), net.h_dim().expect("tap"));
    if m <= k {
        return Err(config_err!("wide layer has {m} units but code layer has {k}; need M > K"));
    }
    Ok(net)
}

/// Generator from `z_dim` noise to `out_shape = [C, H, W]` in `[−1, 1]`.
///
/// Dense projection to a 4×4 map, then upsample + 3×3 conv + batch-norm
/// blocks (channels halving each time) until the target size, then a 3×3
/// conv to `C` channels and `tanh`.
pub fn build_generator(z_dim: usize, out_shape: &[usize], channel_div: usize, rng: &mut impl Rng) -> Result<Network> {
    if z_dim == 0 {
        return Err(config_err!("z_dim must be at least 1"));
    }
    if channel_div == 0 {
        return Err(config_err!("channel_div must be at least 1"));
    }
    let [out_ch, h, w] = out_shape[..] else {
        return Err(config_err!("generator output must be C×H×W, got {out_shape:?}"));
    };
    if h != w || h < 4 || !(h / 4).is_power_of_two() || h % 4 != 0 {
        return Err(config_err!("generator output {h}×{w} is not reachable by doubling from 4×4"));
    }
    let lrelu = LayerSpec::LeakyRelu { slope: LEAKY_SLOPE };
    let mut ch = (128 / channel_div).max(4);
    let mut layers = vec![
        LayerSpec::Dense { in_units: z_dim, out_units: ch * 16 },
        LayerSpec::Reshape { shape: vec![ch, 4, 4] },
        LayerSpec::BatchStatsNorm { channels: ch },
        lrelu.clone(),
    ];
    let mut size = 4;
    while size < h {
        let next = (ch / 2).max(4);
        layers.extend([
            LayerSpec::Upsample2x,
            LayerSpec::Conv3x3 { in_ch: ch, out_ch: next, stride: 1, pad: 1 },
            LayerSpec::BatchStatsNorm { channels: next },
            lrelu.clone(),
        ]);
        ch = next;
        size *= 2;
    }
    layers.extend([LayerSpec::Conv3x3 { in_ch: ch, out_ch, stride: 1, pad: 1 }, LayerSpec::Tanh]);
    Network::new(vec![z_dim], layers, None, None, rng)
}
