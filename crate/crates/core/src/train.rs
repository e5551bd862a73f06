// SPDX-License-Identifier: Apache-2.0

//! Alternating GAN training with the code regularizers.
//!
//! Each step updates the discriminator on `L_D + λ_DMR·L_DMR +
//! λ_BRE·(L_ME + L_MAC)` and then the generator on feature matching over
//! `f`. Randomness comes from independent ChaCha streams keyed by
//! `(seed, purpose, index)`: initialization, the per-epoch shuffle and the
//! per-step noise. A run can therefore resume from nothing but the step
//! counter and parameters.

use std::fmt;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{Decoder, Encoder};
use crate::data::Dataset;
use crate::error::{config_err, dim_err, Error, Result};
use crate::losses::{
    loss_dmr, loss_feature_matching, loss_gan_d, loss_mac, loss_me, total_loss, LossBreakdown, LossParts,
    RegularizerConfig,
};
use crate::nn::{build_discriminator, build_generator, ArchConfig, LayerSpec, Network, Task};
use crate::quantize::{sign_tensor, softsign_var, BitMatrix, Descriptors};
use crate::tensor::{Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"BGCK";
const CHECKPOINT_VERSION: u32 = 1;
const EXTRACT_CHUNK: usize = 128;

/// Which rows of the discriminator batch feed the regularizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegTarget {
    Real,
    Fake,
    Both,
}

impl FromStr for RegTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(RegTarget::Real),
            "fake" => Ok(RegTarget::Fake),
            "both" => Ok(RegTarget::Both),
            other => Err(config_err!("reg_target must be real, fake or both, got {other:?}")),
        }
    }
}

impl fmt::Display for RegTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegTarget::Real => "real",
            RegTarget::Fake => "fake",
            RegTarget::Both => "both",
        })
    }
}

/// Channel widths: published (`paper`) or divided by four (`desk`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleProfile {
    Paper,
    Desk,
}

impl FromStr for ScaleProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ScaleProfile::Paper),
            "desk" => Ok(ScaleProfile::Desk),
            other => Err(config_err!("scale_profile must be paper or desk, got {other:?}")),
        }
    }
}

impl fmt::Display for ScaleProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleProfile::Paper => "paper",
            ScaleProfile::Desk => "desk",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub code_bits: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub z_dim: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub reg: RegularizerConfig,
    pub seed: u64,
    pub reg_target: RegTarget,
    pub scale_profile: ScaleProfile,
    /// Overrides the profile's channel divisor when nonzero.
    pub channel_div: usize,
    /// Permit retrieval code lengths other than 16, 32 and 64.
    pub free_bits: bool,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// Stop after this many steps in total (0: no cap).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Retrieval,
            code_bits: 16,
            epochs: 30,
            batch_size: 64,
            z_dim: 100,
            learning_rate: 3e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            reg: RegularizerConfig::default(),
            seed: 0,
            reg_target: RegTarget::Real,
            scale_profile: ScaleProfile::Desk,
            channel_div: 0,
            free_bits: false,
            d_steps: 1,
            checkpoint_every: 0,
            max_steps: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_err!("invalid value {value:?} for {key}"))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 21] = [
        "task",
        "code_bits",
        "epochs",
        "batch_size",
        "z_dim",
        "learning_rate",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "lambda_dmr",
        "lambda_bre",
        "gamma",
        "beta",
        "seed",
        "reg_target",
        "scale_profile",
        "channel_div",
        "free_bits",
        "d_steps",
        "checkpoint_every",
        "max_steps",
    ];

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = value.parse()?,
            "code_bits" => self.code_bits = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "z_dim" => self.z_dim = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "lambda_dmr" => self.reg.lambda_dmr = parse(key, value)?,
            "lambda_bre" => self.reg.lambda_bre = parse(key, value)?,
            "gamma" => self.reg.gamma = parse(key, value)?,
            "beta" => self.reg.beta = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "reg_target" => self.reg_target = value.parse()?,
            "scale_profile" => self.scale_profile = value.parse()?,
            "channel_div" => self.channel_div = parse(key, value)?,
            "free_bits" => self.free_bits = parse(key, value)?,
            "d_steps" => self.d_steps = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            other => return Err(config_err!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "task" => self.task.to_string(),
            "code_bits" => self.code_bits.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "z_dim" => self.z_dim.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "lambda_dmr" => self.reg.lambda_dmr.to_string(),
            "lambda_bre" => self.reg.lambda_bre.to_string(),
            "gamma" => self.reg.gamma.to_string(),
            "beta" => self.reg.beta.to_string(),
            "seed" => self.seed.to_string(),
            "reg_target" => self.reg_target.to_string(),
            "scale_profile" => self.scale_profile.to_string(),
            "channel_div" => self.channel_div.to_string(),
            "free_bits" => self.free_bits.to_string(),
            "d_steps" => self.d_steps.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "max_steps" => self.max_steps.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; unknown or repeated keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| config_err!("line {}: expected `key = value`", n + 1))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(config_err!("line {}: key {key:?} given twice", n + 1));
            }
            self.set(key, value.trim()).map_err(|e| config_err!("line {}: {}", n + 1, e))?;
            seen.push(key);
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key in canonical order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        if self.batch_size < 2 {
            return Err(config_err!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.z_dim == 0 {
            return Err(config_err!("z_dim must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(config_err!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.d_steps == 0 {
            return Err(config_err!("d_steps must be at least 1"));
        }
        Ok(())
    }

    /// Channel divisor after applying profile, task and override.
    pub fn effective_channel_div(&self) -> usize {
        if self.channel_div > 0 {
            return self.channel_div;
        }
        let base = match self.scale_profile {
            ScaleProfile::Paper => 1,
            ScaleProfile::Desk => 4,
        };
        if self.task == Task::Toy {
            base * 4
        } else {
            base
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            task: self.task,
            code_bits: self.code_bits,
            channel_div: self.effective_channel_div(),
            free_bits: self.free_bits,
        }
    }
}

/// Purposes of the independent random streams.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    InitDiscriminator = 1,
    InitGenerator = 2,
    Shuffle = 3,
    Noise = 4,
    Sample = 5,
}

/// Random stream `index` for `purpose` under `seed`.
pub fn stream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ index);
    rng
}

/// `n × z_dim` draws from `U(−1, 1)`.
pub fn sample_z(rng: &mut impl Rng, n: usize, z_dim: usize) -> Tensor {
    let data = (0..n * z_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, z_dim], data).expect("shape")
}

/// Example order for `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Stream::Shuffle, epoch));
    order
}

/// Adaptive-moment optimizer with bias correction.
///
/// The update is `p −= lr · m̂ / (√v̂ + ε)`. A zero gradient on fresh state
/// leaves every parameter exactly unchanged (`m̂ = 0`); once moments have
/// accumulated, a zero gradient still moves parameters by the decaying
/// momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { lr, beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(dim_err!("optimizer holds {} tensors, got {} params and {} grads", self.m.len(), params.len(), grads.len()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(dim_err!("gradient shape {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub gen: Network,
    pub disc: Network,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

impl Checkpoint {
    /// Layout (little-endian): magic `BGCK`, version u32, config echo
    /// (u32 length + `key = value` text), step u64, generator, discriminator,
    /// generator optimizer, discriminator optimizer, CRC32.
    ///
    /// A network is: input rank u32 and dims u32, tap_f and tap_h as u32
    /// (`u32::MAX` for none), layer count u32, per layer a kind tag u8 and
    /// its sizes, then every parameter as f64 values in layer order (shapes
    /// follow from the layer table). An optimizer is: step count u64, lr,
    /// β₁, β₂, ε as f64, then all first moments and all second moments as
    /// f64 blobs shaped like the parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        e.str(&self.config.to_text());
        e.u64(self.step);
        encode_network(&mut e, &self.gen);
        encode_network(&mut e, &self.disc);
        encode_adam(&mut e, &self.opt_g);
        encode_adam(&mut e, &self.opt_d);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let at = d.offset();
        let text = d.str()?;
        let config = TrainConfig::from_text(&text)
            .map_err(|e| Error::Format { offset: at as u64, msg: format!("config echo: {}", e) })?;
        let step = d.u64()?;
        let gen = decode_network(&mut d)?;
        let disc = decode_network(&mut d)?;
        let opt_g = decode_adam(&mut d, &gen)?;
        let opt_d = decode_adam(&mut d, &disc)?;
        d.finish()?;
        Ok(Self { config, step, gen, disc, opt_g, opt_d })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const NO_TAP: u32 = u32::MAX;

fn encode_network(e: &mut Encoder, net: &Network) {
    e.u32(net.input_shape().len() as u32);
    net.input_shape().iter().for_each(|&d| e.u32(d as u32));
    let (tf, th) = net.taps();
    e.u32(tf.map_or(NO_TAP, |t| t as u32));
    e.u32(th.map_or(NO_TAP, |t| t as u32));
    e.u32(net.layers().len() as u32);
    for layer in net.layers() {
        match layer {
            LayerSpec::Conv3x3 { in_ch, out_ch, stride, pad } => {
                e.u8(0);
                [in_ch, out_ch, stride, pad].iter().for_each(|&&v| e.u32(v as u32));
            }
            LayerSpec::Nin1x1 { in_ch, out_ch } => {
                e.u8(1);
                e.u32(*in_ch as u32);
                e.u32(*out_ch as u32);
            }
            LayerSpec::Dense { in_units, out_units } => {
                e.u8(2);
                e.u32(*in_units as u32);
                e.u32(*out_units as u32);
            }
            LayerSpec::LeakyRelu { slope } => {
                e.u8(3);
                e.f64(*slope);
            }
            LayerSpec::Tanh => e.u8(4),
            LayerSpec::Sigmoid => e.u8(5),
            LayerSpec::AvgPoolGlobal => e.u8(6),
            LayerSpec::Reshape { shape } => {
                e.u8(7);
                e.u32(shape.len() as u32);
                shape.iter().for_each(|&d| e.u32(d as u32));
            }
            LayerSpec::Upsample2x => e.u8(8),
            LayerSpec::BatchStatsNorm { channels } => {
                e.u8(9);
                e.u32(*channels as u32);
            }
        }
    }
    for p in net.params() {
        p.data().iter().for_each(|&v| e.f64(v));
    }
}

fn decode_dims(d: &mut Decoder<'_>) -> Result<Vec<usize>> {
    let n = d.u32()? as usize;
    if n > 8 {
        return Err(d.error(format!("rank {n} is not plausible")));
    }
    (0..n).map(|_| Ok(d.u32()? as usize)).collect()
}

fn decode_network(d: &mut Decoder<'_>) -> Result<Network> {
    let input = decode_dims(d)?;
    let tap = |v: u32| if v == NO_TAP { None } else { Some(v as usize) };
    let (tf, th) = (tap(d.u32()?), tap(d.u32()?));
    let n_layers = d.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let at = d.offset();
        let tag = d.u8()?;
        let mut u = || -> Result<usize> { Ok(d.u32()? as usize) };
        let layer = match tag {
            0 => LayerSpec::Conv3x3 { in_ch: u()?, out_ch: u()?, stride: u()?, pad: u()? },
            1 => LayerSpec::Nin1x1 { in_ch: u()?, out_ch: u()? },
            2 => LayerSpec::Dense { in_units: u()?, out_units: u()? },
            3 => LayerSpec::LeakyRelu { slope: d.f64()? },
            4 => LayerSpec::Tanh,
            5 => LayerSpec::Sigmoid,
            6 => LayerSpec::AvgPoolGlobal,
            7 => {
                let n = u()?;
                if n > 8 {
                    return Err(Error::Format { offset: at as u64, msg: format!("rank {n} is not plausible") });
                }
                LayerSpec::Reshape { shape: (0..n).map(|_| u()).collect::<Result<_>>()? }
            }
            8 => LayerSpec::Upsample2x,
            9 => LayerSpec::BatchStatsNorm { channels: u()? },
            tag => return Err(Error::Format { offset: at as u64, msg: format!("unknown layer tag {tag}") }),
        };
        layers.push(layer);
    }
    let mut params = Vec::new();
    for layer in &layers {
        for shape in layer.param_shapes() {
            params.push(decode_blob(d, &shape)?);
        }
    }
    let at = d.offset();
    Network::from_parts(input, layers, params, tf, th)
        .map_err(|e| Error::Format { offset: at as u64, msg: format!("inconsistent network: {}", e) })
}

fn decode_blob(d: &mut Decoder<'_>, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| d.error("parameter size overflows"))?;
    let raw = d.take(n.checked_mul(8).ok_or_else(|| d.error("parameter size overflows"))?)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(shape.to_vec(), data).map_err(|_| d.error(format!("bad parameter shape {shape:?}")))
}

fn encode_adam(e: &mut Encoder, opt: &Adam) {
    e.u64(opt.t);
    for v in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
        e.f64(v);
    }
    for t in opt.m.iter().chain(&opt.v) {
        t.data().iter().for_each(|&v| e.f64(v));
    }
}

fn decode_adam(d: &mut Decoder<'_>, net: &Network) -> Result<Adam> {
    let t = d.u64()?;
    let (lr, beta1, beta2, eps) = (d.f64()?, d.f64()?, d.f64()?, d.f64()?);
    let blobs = |d: &mut Decoder<'_>| -> Result<Vec<Tensor>> {
        net.params().iter().map(|p| decode_blob(d, p.shape())).collect()
    };
    let m = blobs(d)?;
    let v = blobs(d)?;
    Ok(Adam { lr, beta1, beta2, eps, t, m, v })
}

/// Training state plus the step logic.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    state: Checkpoint,
}

impl Trainer {
    /// Fresh networks for examples of shape `[C, H, W]`.
    pub fn new(config: TrainConfig, example_shape: [usize; 3]) -> Result<Self> {
        config.validate()?;
        let arch = config.arch();
        let disc = build_discriminator(&arch, &example_shape, &mut stream(config.seed, Stream::InitDiscriminator, 0))?;
        let gen = build_generator(
            config.z_dim,
            &example_shape,
            arch.channel_div,
            &mut stream(config.seed, Stream::InitGenerator, 0),
        )?;
        let adam = |net: &Network| {
            Adam::new(net.params(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
        };
        let (opt_g, opt_d) = (adam(&gen), adam(&disc));
        Ok(Self { state: Checkpoint { config, step: 0, gen, disc, opt_g, opt_d } })
    }

    pub fn from_checkpoint(state: Checkpoint) -> Result<Self> {
        state.config.validate()?;
        Ok(Self { state })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn generator(&self) -> &Network {
        &self.state.gen
    }

    pub fn discriminator(&self) -> &Network {
        &self.state.disc
    }

    /// One discriminator update (or `d_steps` of them) and one generator
    /// update on `real`, a normalized `N × C × H × W` batch.
    pub fn train_step(&mut self, real: &Tensor) -> Result<LossBreakdown> {
        let (seed, z_dim, d_steps) = (self.state.config.seed, self.state.config.z_dim, self.state.config.d_steps);
        let n = real.shape()[0];
        if n < 2 {
            return Err(dim_err!("batch of {n} examples; pairwise losses need at least 2"));
        }
        let mut noise = stream(seed, Stream::Noise, self.state.step);
        let mut parts = LossParts::default();
        for _ in 0..d_steps {
            let z = sample_z(&mut noise, n, z_dim);
            parts = self.d_step(real, &z)?;
        }
        let z = sample_z(&mut noise, n, z_dim);
        parts.l_g = self.g_step(real, &z)?;
        let losses = total_loss(parts, &self.state.config.reg)?;
        if let Some(term) = losses.non_finite_term() {
            return Err(Error::Numerical(format!("non-finite {term} at step {}: {losses:?}", self.state.step)));
        }
        self.state.step += 1;
        Ok(losses)
    }

    /// Discriminator update on `real` and `G(z)`; returns the loss terms.
    pub(crate) fn d_step(&mut self, real: &Tensor, z: &Tensor) -> Result<LossParts> {
        let cfg = &self.state.config;
        let fake = self.state.gen.forward_values(z)?.output;
        let disc = &self.state.disc;
        let mut tape = Tape::new();
        let params = disc.bind(&mut tape, true);
        let xr = tape.constant(real.clone());
        let xf = tape.constant(fake);
        let out_r = disc.forward(&mut tape, &params, xr)?;
        let out_f = disc.forward(&mut tape, &params, xf)?;
        let l_d = loss_gan_d(&mut tape, out_r.output, out_f.output)?;

        let taps = |o: &crate::nn::Forward| o.f.zip(o.h).ok_or_else(|| dim_err!("discriminator has no f/h taps"));
        let (f, h) = match cfg.reg_target {
            RegTarget::Real => taps(&out_r)?,
            RegTarget::Fake => taps(&out_f)?,
            RegTarget::Both => {
                let ((fr, hr), (ff, hf)) = (taps(&out_r)?, taps(&out_f)?);
                (tape.concat_rows(&[fr, ff])?, tape.concat_rows(&[hr, hf])?)
            }
        };
        let s_f = softsign_var(&mut tape, f, cfg.reg.gamma)?;
        let b_h = tape.constant(sign_tensor(tape.value(h))?);
        let l_dmr = loss_dmr(&mut tape, b_h, s_f)?;
        let l_me = loss_me(&mut tape, s_f)?;
        let l_mac = loss_mac(&mut tape, s_f, b_h, cfg.reg.beta)?;

        // Terms with a zero weight stay out of the graph so that their
        // gradients cannot leak in, even as NaN.
        let mut total = l_d;
        if cfg.reg.lambda_dmr > 0.0 {
            let t = tape.scale(l_dmr, cfg.reg.lambda_dmr);
            total = tape.add(total, t)?;
        }
        if cfg.reg.lambda_bre > 0.0 {
            let bre = tape.add(l_me, l_mac)?;
            let t = tape.scale(bre, cfg.reg.lambda_bre);
            total = tape.add(total, t)?;
        }
        let grads = tape.backward(total)?;
        let parts = LossParts {
            l_d: tape.value(l_d).item(),
            l_dmr: tape.value(l_dmr).item(),
            l_me: tape.value(l_me).item(),
            l_mac: tape.value(l_mac).item(),
            l_g: 0.0,
        };
        let g = collect_grads(&grads, &params, disc.params(), "discriminator", self.state.step)?;
        self.state.opt_d.step(self.state.disc.params_mut(), &g)?;
        Ok(parts)
    }

    /// Generator update by feature matching against `real` under the
    /// current discriminator; returns `L_G`.
    pub(crate) fn g_step(&mut self, real: &Tensor, z: &Tensor) -> Result<f64> {
        let disc = &self.state.disc;
        let gen = &self.state.gen;
        let f_real = disc.forward_values(real)?.f.ok_or_else(|| dim_err!("discriminator has no f tap"))?;
        let mut tape = Tape::new();
        let gp = gen.bind(&mut tape, true);
        let dp = disc.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let fake = gen.forward(&mut tape, &gp, zv)?.output;
        let f_fake = disc.forward(&mut tape, &dp, fake)?.f.expect("tap checked above");
        let fr = tape.constant(f_real);
        let l_g = loss_feature_matching(&mut tape, fr, f_fake)?;
        let grads = tape.backward(l_g)?;
        let g = collect_grads(&grads, &gp, gen.params(), "generator", self.state.step)?;
        let value = tape.value(l_g).item();
        self.state.opt_g.step(self.state.gen.params_mut(), &g)?;
        Ok(value)
    }

    /// Updates per epoch for a dataset with `n` examples (last partial
    /// batch dropped).
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.state.config.batch_size
    }

    /// Steps a full run over `n` examples takes, after `max_steps`.
    pub fn total_steps(&self, n: usize) -> u64 {
        let full = (self.state.config.epochs as u64).saturating_mul(self.steps_per_epoch(n) as u64);
        match self.state.config.max_steps {
            0 => full,
            cap => full.min(cap as u64),
        }
    }

    /// Example indices of the batch used at global step `step`.
    pub fn batch_rows(&self, n: usize, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch(n) as u64;
        let order = epoch_order(self.state.config.seed, step / spe, n);
        let b = self.state.config.batch_size;
        let start = (step % spe) as usize * b;
        order[start..start + b].to_vec()
    }

    /// Trains from the current step to the end of the configured run.
    /// With `out`, writes `losses.csv`, periodic `ckpt_<step>.bgck` and
    /// `final.bgck` there.
    pub fn run(&mut self, data: &Dataset, out: Option<&Path>) -> Result<Vec<(u64, LossBreakdown)>> {
        let n = data.n_examples();
        let cfg = self.state.config.clone();
        if data.shape()[..] != self.state.disc.input_shape()[..] {
            return Err(config_err!(
                "dataset examples are {:?} but the networks expect {:?}",
                data.shape(),
                self.state.disc.input_shape()
            ));
        }
        if n < cfg.batch_size {
            return Err(config_err!("dataset has {n} examples, fewer than batch_size {}", cfg.batch_size));
        }
        let mut csv = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("losses.csv"))?);
                writeln!(f, "{}", LossBreakdown::CSV_HEADER)?;
                Some(f)
            }
            None => None,
        };
        let spe = self.steps_per_epoch(n) as u64;
        let total = self.total_steps(n);
        let mut log = Vec::new();
        let mut order: Option<(u64, Vec<usize>)> = None;
        while self.state.step < total {
            let step = self.state.step;
            let epoch = step / spe;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                order = Some((epoch, epoch_order(cfg.seed, epoch, n)));
            }
            let rows = &order.as_ref().expect("set above").1;
            let start = (step % spe) as usize * cfg.batch_size;
            let batch = data.batch(&rows[start..start + cfg.batch_size])?;
            let losses = self.train_step(&batch)?;
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", losses.csv_row(step))?;
            }
            log.push((step, losses));
            if let Some(dir) = out {
                if cfg.checkpoint_every > 0 && self.state.step.is_multiple_of(cfg.checkpoint_every as u64) {
                    self.state.write(&dir.join(format!("ckpt_{:08}.bgck", self.state.step)))?;
                }
            }
        }
        if let Some(mut f) = csv {
            f.flush()?;
        }
        if let Some(dir) = out {
            self.state.write(&dir.join("final.bgck"))?;
        }
        Ok(log)
    }

    /// `n` generator samples from the sampling stream.
    pub fn sample(&self, n: usize) -> Result<Tensor> {
        let z = sample_z(&mut stream(self.state.config.seed, Stream::Sample, 0), n, self.state.config.z_dim);
        Ok(self.state.gen.forward_values(&z)?.output)
    }
}

fn collect_grads(
    grads: &crate::tensor::Gradients,
    vars: &[Var],
    params: &[Tensor],
    which: &str,
    step: u64,
) -> Result<Vec<Tensor>> {
    vars.iter()
        .zip(params)
        .enumerate()
        .map(|(i, (&v, p))| {
            let g = grads.get_or_zeros(v, p.shape());
            if g.all_finite() {
                Ok(g)
            } else {
                Err(Error::Numerical(format!("non-finite {which} gradient for parameter {i} at step {step}")))
            }
        })
        .collect()
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<(u64, LossBreakdown)>,
}

/// Builds networks for `data` and trains them for the configured run.
pub fn train(config: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data.shape())?;
    let log = trainer.run(data, out)?;
    Ok(TrainOutcome { trainer, log })
}

/// The discriminator's code layer `f` for every example, `N × K`.
pub fn code_layer(disc: &Network, data: &Dataset) -> Result<Tensor> {
    let n = data.n_examples();
    let k = disc.f_dim().ok_or_else(|| dim_err!("discriminator has no f tap"))?;
    let rows: Vec<usize> = (0..n).collect();
    let chunks: Vec<Result<Tensor>> = rows
        .par_chunks(EXTRACT_CHUNK)
        .map(|c| {
            let out = disc.forward_values(&data.batch(c)?)?;
            out.f.ok_or_else(|| dim_err!("discriminator has no f tap"))
        })
        .collect();
    let mut data_out = Vec::with_capacity(n * k);
    for c in chunks {
        data_out.extend(c?.into_data());
    }
    Tensor::new(vec![n, k], data_out)
}

/// `sign(f(x))` for every example, packed, with labels when present.
/// Pair sets yield all `a` patches followed by all `b` patches.
pub fn extract_codes(disc: &Network, data: &Dataset) -> Result<Descriptors> {
    let f = code_layer(disc, data)?;
    let codes = BitMatrix::from_real(&f)?;
    let labels = data.labels().map(|l| l.iter().map(|&v| v as i32).collect());
    Ok(Descriptors { codes, labels })
}
