// SPDX-License-Identifier: Apache-2.0

//! Datasets: the `BGDS` container, synthetic toy sets and raster helpers.
//!
//! Pixels are stored as 8-bit values and mapped to `[−1, 1]` with
//! `x / 127.5 − 1` only when a batch is assembled. Synthetic generators use
//! integer arithmetic throughout, so their payloads are byte-identical
//! across platforms for a given seed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Decoder, Encoder};
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::Tensor;

const DATASET_MAGIC: &[u8; 4] = b"BGDS";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(config_err!("unknown split {other:?}")),
        }
    }
}

/// `x / 127.5 − 1`.
#[inline]
pub fn normalize_pixel(p: u8) -> f64 {
    f64::from(p) / 127.5 - 1.0
}

/// Inverse of [`normalize_pixel`] with clamping, for dumping generator output.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Class-labelled images, `N × C × H × W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSet {
    pub split: Split,
    shape: [usize; 3],
    n_classes: u32,
    pixels: Vec<u8>,
    labels: Vec<u32>,
}

impl ImageSet {
    pub fn new(split: Split, shape: [usize; 3], n_classes: u32, pixels: Vec<u8>, labels: Vec<u32>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 {
            return Err(dim_err!("image shape {shape:?} has a zero dimension"));
        }
        if pixels.len() != per * labels.len() {
            return Err(dim_err!("{} pixels for {} images of {shape:?}", pixels.len(), labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Self { split, shape, n_classes, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn n_classes(&self) -> u32 {
        self.n_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.shape.iter().product::<usize>();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// The given rows, in order, as a new set.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let pixels = rows.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.split, self.shape, self.n_classes, pixels, labels)
    }

    /// Halves height and width with a 2×2 box filter.
    pub fn downsample(&self) -> Result<Self> {
        let [c, h, w] = self.shape;
        let pixels = downsample(&self.pixels, self.len() * c, h, w)?;
        Self::new(self.split, [c, h / 2, w / 2], self.n_classes, pixels, self.labels.clone())
    }
}

/// Patch pairs with match flags; both sides are `N × C × H × W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPairSet {
    pub split: Split,
    shape: [usize; 3],
    a: Vec<u8>,
    b: Vec<u8>,
    matches: Vec<bool>,
}

impl PatchPairSet {
    pub fn new(split: Split, shape: [usize; 3], a: Vec<u8>, b: Vec<u8>, matches: Vec<bool>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 {
            return Err(dim_err!("patch shape {shape:?} has a zero dimension"));
        }
        if a.len() != per * matches.len() || b.len() != a.len() {
            return Err(dim_err!("patch buffers do not hold {} pairs of {shape:?}", matches.len()));
        }
        Ok(Self { split, shape, a, b, matches })
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn matches(&self) -> &[bool] {
        &self.matches
    }

    pub fn patch_a(&self, i: usize) -> &[u8] {
        let per = self.shape.iter().product::<usize>();
        &self.a[i * per..(i + 1) * per]
    }

    pub fn patch_b(&self, i: usize) -> &[u8] {
        let per = self.shape.iter().product::<usize>();
        &self.b[i * per..(i + 1) * per]
    }

    /// Patch `i` of the flattened list `a_0 … a_{N−1}, b_0 … b_{N−1}`.
    pub fn patch(&self, i: usize) -> &[u8] {
        if i < self.len() {
            self.patch_a(i)
        } else {
            self.patch_b(i - self.len())
        }
    }

    pub fn downsample(&self) -> Result<Self> {
        let [c, h, w] = self.shape;
        let a = downsample(&self.a, self.len() * c, h, w)?;
        let b = downsample(&self.b, self.len() * c, h, w)?;
        Self::new(self.split, [c, h / 2, w / 2], a, b, self.matches.clone())
    }
}

/// Contents of a `BGDS` file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Dataset {
    Images(ImageSet),
    Pairs(PatchPairSet),
}

impl Dataset {
    pub fn kind(&self) -> &'static str {
        match self {
            Dataset::Images(_) => "image",
            Dataset::Pairs(_) => "pairs",
        }
    }

    pub fn split(&self) -> Split {
        match self {
            Dataset::Images(s) => s.split,
            Dataset::Pairs(s) => s.split,
        }
    }

    /// Per-example `[C, H, W]`.
    pub fn shape(&self) -> [usize; 3] {
        match self {
            Dataset::Images(s) => s.shape,
            Dataset::Pairs(s) => s.shape,
        }
    }

    /// Number of individual images usable as real training examples; for
    /// pair sets both sides count.
    pub fn n_examples(&self) -> usize {
        match self {
            Dataset::Images(s) => s.len(),
            Dataset::Pairs(s) => 2 * s.len(),
        }
    }

    pub fn example(&self, i: usize) -> &[u8] {
        match self {
            Dataset::Images(s) => s.image(i),
            Dataset::Pairs(s) => s.patch(i),
        }
    }

    /// Labels per example, if the set has them.
    pub fn labels(&self) -> Option<&[u32]> {
        match self {
            Dataset::Images(s) => Some(s.labels()),
            Dataset::Pairs(_) => None,
        }
    }

    /// Normalized `N × C × H × W` batch of the given examples.
    pub fn batch(&self, rows: &[usize]) -> Result<Tensor> {
        let [c, h, w] = self.shape();
        let mut data = Vec::with_capacity(rows.len() * c * h * w);
        for &r in rows {
            if r >= self.n_examples() {
                return Err(dim_err!("example {r} out of range ({} examples)", self.n_examples()));
            }
            data.extend(self.example(r).iter().map(|&p| normalize_pixel(p)));
        }
        Tensor::new(vec![rows.len(), c, h, w], data)
    }

    /// Layout (little-endian): magic `BGDS`, version u32, kind u8 (0 image,
    /// 1 pairs), split u8 (0 train, 1 test), n u64, c u32, h u32, w u32,
    /// n_classes u32 (0 for pairs), then for images `n·c·h·w` pixel bytes and
    /// `n` u32 labels, for pairs the `a` pixels, the `b` pixels and `n` match
    /// bytes (0/1); CRC32 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(DATASET_MAGIC, DATASET_VERSION);
        let (kind, n, n_classes) = match self {
            Dataset::Images(s) => (0u8, s.len(), s.n_classes),
            Dataset::Pairs(s) => (1u8, s.len(), 0),
        };
        e.u8(kind);
        e.u8(self.split().tag());
        e.u64(n as u64);
        for d in self.shape() {
            e.u32(d as u32);
        }
        e.u32(n_classes);
        match self {
            Dataset::Images(s) => {
                e.bytes(&s.pixels);
                s.labels.iter().for_each(|&l| e.u32(l));
            }
            Dataset::Pairs(s) => {
                e.bytes(&s.a);
                e.bytes(&s.b);
                s.matches.iter().for_each(|&m| e.u8(m as u8));
            }
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let kind = d.u8()?;
        let split = match d.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(d.error(format!("split tag {other} is not 0 or 1"))),
        };
        let n_at = d.offset();
        let n = d.u64()?;
        let shape = [d.u32()? as usize, d.u32()? as usize, d.u32()? as usize];
        let n_classes = d.u32()?;
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(d.error(format!("zero dimension in {shape:?}")));
        }
        let per_row = match kind {
            0 => per as u128 + 4,
            1 => 2 * per as u128 + 1,
            other => return Err(d.error(format!("unknown kind tag {other}"))),
        };
        let remaining = (bytes.len() - 4 - d.offset()) as u128;
        if (n as u128) * per_row != remaining {
            return Err(Error::Format {
                offset: n_at as u64,
                msg: format!("payload of {remaining} bytes does not match {n} rows of {shape:?}"),
            });
        }
        let n = n as usize;
        let set = match kind {
            0 => {
                let pixels = d.take(n * per)?.to_vec();
                let labels = (0..n).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
                Dataset::Images(ImageSet::new(split, shape, n_classes, pixels, labels)?)
            }
            _ => {
                let a = d.take(n * per)?.to_vec();
                let b = d.take(n * per)?.to_vec();
                let matches = d
                    .take(n)?
                    .iter()
                    .map(|&m| match m {
                        0 => Ok(false),
                        1 => Ok(true),
                        other => Err(Error::Data(format!("match flag {other} is not 0 or 1"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Dataset::Pairs(PatchPairSet::new(split, shape, a, b, matches)?)
            }
        };
        d.finish()?;
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// 2×2 box filter over `planes` planes of `h × w` bytes; ties round to even.
pub fn downsample(pixels: &[u8], planes: usize, h: usize, w: usize) -> Result<Vec<u8>> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(dim_err!("cannot box-filter odd size {h}×{w}"));
    }
    if pixels.len() != planes * h * w {
        return Err(dim_err!("{} bytes are not {planes} planes of {h}×{w}", pixels.len()));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for plane in pixels.chunks_exact(h * w) {
        for y in 0..ho {
            for x in 0..wo {
                let at = |dy: usize, dx: usize| u32::from(plane[(2 * y + dy) * w + 2 * x + dx]);
                let sum = at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1);
                let (q, r) = (sum / 4, sum % 4);
                let v = match r {
                    0 | 1 => q,
                    3 => q + 1,
                    _ => q + (q & 1),
                };
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

/// Family names of the toy retrieval classes, indexed by `class % 4`.
pub const TOY_FAMILIES: [&str; 4] = ["axis bars", "diagonal bars", "blobs", "checker"];

const TOY_CHANNELS: usize = 3;
const TOY_NOISE: i32 = 24;

/// Toy stand-in for a natural-image retrieval set.
///
/// Class `c` belongs to family `c % 4` (axis-aligned bars, diagonal bars,
/// discs, checkerboard) with geometry varied by `c / 4`. Colors, phase,
/// orientation and placement are random per image and independent of the
/// class, so classes differ by structure rather than mean color.
pub fn synth_toy_retrieval(seed: u64, n_per_class: usize, n_classes: u32, hw: usize) -> Result<ImageSet> {
    if n_classes < 2 {
        return Err(config_err!("need at least 2 classes, got {n_classes}"));
    }
    if hw < 4 {
        return Err(config_err!("image size {hw} is too small"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = TOY_CHANNELS * hw * hw;
    let mut pixels = Vec::with_capacity(per * n_per_class * n_classes as usize);
    let mut labels = Vec::with_capacity(n_per_class * n_classes as usize);
    for c in 0..n_classes {
        for _ in 0..n_per_class {
            let mask = toy_mask(&mut rng, c as usize % 4, c as usize / 4, hw);
            let fg: [i32; 3] = std::array::from_fn(|_| rng.random_range(150..=255));
            let bg: [i32; 3] = std::array::from_fn(|_| rng.random_range(0..=100));
            for ch in 0..TOY_CHANNELS {
                for &m in &mask {
                    let base = if m { fg[ch] } else { bg[ch] };
                    let v = base + rng.random_range(-TOY_NOISE..=TOY_NOISE);
                    pixels.push(v.clamp(0, 255) as u8);
                }
            }
            labels.push(c);
        }
    }
    ImageSet::new(Split::Train, [TOY_CHANNELS, hw, hw], n_classes, pixels, labels)
}

/// Foreground mask of one toy image.
fn toy_mask(rng: &mut ChaCha8Rng, family: usize, variant: usize, hw: usize) -> Vec<bool> {
    let n = hw as i64;
    let mut mask = vec![false; hw * hw];
    match family {
        0 | 1 => {
            let half = 1 + variant as i64 + rng.random_range(0..2);
            let phase = rng.random_range(0..2 * half);
            let flip = rng.random_bool(0.5);
            for y in 0..n {
                for x in 0..n {
                    let t = match (family, flip) {
                        (0, false) => y,
                        (0, true) => x,
                        (_, false) => x + y,
                        (_, true) => x - y + n,
                    };
                    mask[(y * n + x) as usize] = ((t + phase) / half) % 2 == 0;
                }
            }
        }
        2 => {
            let count = 1 + variant as i64 + rng.random_range(0..2);
            for _ in 0..count {
                let r = rng.random_range(n / 8 + 1..=n / 4 + 1);
                let (cy, cx) = (rng.random_range(0..n), rng.random_range(0..n));
                for y in 0..n {
                    for x in 0..n {
                        if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                            mask[(y * n + x) as usize] = true;
                        }
                    }
                }
            }
        }
        _ => {
            let cell = 2 + variant as i64 + rng.random_range(0..2);
            let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
            for y in 0..n {
                for x in 0..n {
                    mask[(y * n + x) as usize] = ((y + oy) / cell + (x + ox) / cell) % 2 == 0;
                }
            }
        }
    }
    mask
}

/// Perturbations applied to the second patch of a matched pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairJitter {
    /// Maximum translation in pixels along each axis.
    pub shift: i64,
    /// Maximum rotation as an index into a table of 5° steps (0 to 2).
    pub rotation: usize,
    /// Maximum additive brightness change.
    pub brightness: i32,
    /// Maximum per-pixel additive noise (both patches of every pair).
    pub noise: i32,
}

impl PairJitter {
    pub const NONE: Self = Self { shift: 0, rotation: 0, brightness: 0, noise: 0 };
}

impl Default for PairJitter {
    fn default() -> Self {
        Self { shift: 1, rotation: 2, brightness: 16, noise: 8 }
    }
}

/// `(cos, sin)` of 0°, 5° and 10° in units of 1/1024.
const ROTATION_TABLE: [(i64, i64); 3] = [(1024, 0), (1020, 89), (1008, 178)];

/// Toy stand-in for a local patch matching set, single channel.
pub fn synth_toy_pairs(seed: u64, n_pairs: usize, hw: usize) -> Result<PatchPairSet> {
    synth_toy_pairs_with(seed, n_pairs, hw, PairJitter::default())
}

/// [`synth_toy_pairs`] with explicit jitter. Half the pairs match; match
/// positions are shuffled.
pub fn synth_toy_pairs_with(seed: u64, n_pairs: usize, hw: usize, jitter: PairJitter) -> Result<PatchPairSet> {
    if n_pairs == 0 || !n_pairs.is_multiple_of(2) {
        return Err(config_err!("n_pairs must be positive and even, got {n_pairs}"));
    }
    if hw < 4 {
        return Err(config_err!("patch size {hw} is too small"));
    }
    if jitter.rotation >= ROTATION_TABLE.len() || jitter.shift < 0 || jitter.brightness < 0 || jitter.noise < 0 {
        return Err(config_err!("invalid jitter {jitter:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matches: Vec<bool> = (0..n_pairs).map(|i| i < n_pairs / 2).collect();
    matches.shuffle(&mut rng);
    let margin = jitter.shift as usize + 2;
    let canvas = hw + 2 * margin;
    let (mut a, mut b) = (Vec::with_capacity(n_pairs * hw * hw), Vec::with_capacity(n_pairs * hw * hw));
    for &m in &matches {
        let base = base_patch(&mut rng, canvas);
        a.extend(view(&base, canvas, hw, 0, 0, 0, 0));
        if m {
            let dy = rng.random_range(-jitter.shift..=jitter.shift);
            let dx = rng.random_range(-jitter.shift..=jitter.shift);
            let rot = rng.random_range(0..=jitter.rotation) as i64 * if rng.random_bool(0.5) { 1 } else { -1 };
            let gain = rng.random_range(-jitter.brightness..=jitter.brightness);
            b.extend(view(&base, canvas, hw, dy, dx, rot, gain));
        } else {
            let other = base_patch(&mut rng, canvas);
            b.extend(view(&other, canvas, hw, 0, 0, 0, 0));
        }
        let len = a.len();
        for p in a[len - hw * hw..].iter_mut().chain(b[len - hw * hw..].iter_mut()) {
            *p = (i32::from(*p) + rng.random_range(-jitter.noise..=jitter.noise)).clamp(0, 255) as u8;
        }
    }
    PatchPairSet::new(Split::Train, [1, hw, hw], a, b, matches)
}

/// Random scene of rectangles, discs and bars on a flat background.
fn base_patch(rng: &mut ChaCha8Rng, size: usize) -> Vec<i32> {
    let n = size as i64;
    let mut img = vec![rng.random_range(40..=200); size * size];
    for _ in 0..rng.random_range(3..=5) {
        let v = rng.random_range(0..=255);
        let (cy, cx) = (rng.random_range(0..n), rng.random_range(0..n));
        let r = rng.random_range(2..=n / 3 + 2);
        let shape = rng.random_range(0..3);
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y - cy, x - cx);
                let inside = match shape {
                    0 => dy.abs() <= r && dx.abs() <= r / 2 + 1,
                    1 => dy * dy + dx * dx <= r * r,
                    _ => (dy - dx).abs() <= 1 && dy.abs() <= r,
                };
                if inside {
                    img[(y * n + x) as usize] = v;
                }
            }
        }
    }
    img
}

/// Central `hw × hw` view of a canvas after translation, rotation about the
/// canvas center (nearest neighbor, integer fixed point) and a gain offset.
fn view(canvas: &[i32], size: usize, hw: usize, dy: i64, dx: i64, rot: i64, gain: i32) -> Vec<u8> {
    let n = size as i64;
    let off = ((size - hw) / 2) as i64;
    let (cos, sin) = ROTATION_TABLE[rot.unsigned_abs() as usize];
    let sin = sin * rot.signum();
    let c2 = n - 1;
    let mut out = Vec::with_capacity(hw * hw);
    for y in 0..hw as i64 {
        for x in 0..hw as i64 {
            // Doubled coordinates relative to the center keep half-pixels exact.
            let (py, px) = (2 * (y + off + dy) - c2, 2 * (x + off + dx) - c2);
            let sy = cos * py - sin * px;
            let sx = sin * py + cos * px;
            let to_index = |v: i64| ((v + c2 * 1024 + 1024).div_euclid(2048)).clamp(0, n - 1);
            let v = canvas[(to_index(sy) * n + to_index(sx)) as usize] + gain;
            out.push(v.clamp(0, 255) as u8);
        }
    }
    out
}

/// Reads a binary PGM (`P5`) or PPM (`P6`) file with maxval 255 into
/// planar `C × H × W` bytes.
pub fn read_netpbm(bytes: &[u8]) -> Result<([usize; 3], Vec<u8>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { offset: pos as u64, msg: "truncated netpbm header".into() });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format { offset: 0, msg: format!("unsupported netpbm magic {other:?}") }),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?.parse().map_err(|_| Error::Format { offset: 0, msg: format!("bad netpbm {what}") })
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(Error::Format { offset: 0, msg: format!("unsupported netpbm {w}×{h} maxval {maxval}") });
    }
    let start = pos + 1;
    let need = w * h * channels;
    if bytes.len() < start + need {
        return Err(Error::Format { offset: bytes.len() as u64, msg: "truncated netpbm raster".into() });
    }
    let raster = &bytes[start..start + need];
    let mut planar = vec![0u8; need];
    for (i, px) in raster.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planar[c * w * h + i] = v;
        }
    }
    Ok(([channels, h, w], planar))
}

/// Encodes planar `C × H × W` bytes (C = 1 or 3) as binary PGM/PPM.
pub fn write_netpbm(shape: [usize; 3], planar: &[u8]) -> Result<Vec<u8>> {
    let [c, h, w] = shape;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(dim_err!("netpbm needs 1 or 3 channels, got {c}")),
    };
    if planar.len() != c * h * w {
        return Err(dim_err!("{} bytes for a {c}×{h}×{w} raster", planar.len()));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        out.extend((0..c).map(|ch| planar[ch * h * w + i]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_images(seed: u64) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 7;
        let pixels = (0..n * 2 * 3 * 5).map(|_| rng.random()).collect();
        let labels = (0..n).map(|_| rng.random_range(0..4)).collect();
        ImageSet::new(Split::Test, [2, 3, 5], 4, pixels, labels).unwrap()
    }

    #[test]
    fn container_round_trip() {
        let d = Dataset::Images(random_images(1));
        let bytes = d.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
        let p = Dataset::Pairs(synth_toy_pairs(2, 6, 8).unwrap());
        assert_eq!(Dataset::from_bytes(&p.to_bytes()).unwrap(), p);
    }

    #[test]
    fn truncated_container_is_format_error() {
        let bytes = Dataset::Images(random_images(3)).to_bytes();
        for cut in [0, 5, 11, 30, bytes.len() - 1] {
            assert!(matches!(Dataset::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn corrupted_crc_is_named() {
        let mut bytes = Dataset::Images(random_images(4)).to_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 0xff;
        let err = Dataset::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("CRC"), "{err}");
    }

    #[test]
    fn inconsistent_header_is_rejected() {
        let d = Dataset::Images(random_images(5));
        let mut e = Encoder::new(DATASET_MAGIC, DATASET_VERSION);
        let full = d.to_bytes();
        // Re-frame the same body with an inflated row count.
        e.bytes(&full[8..10]);
        e.u64(8);
        e.bytes(&full[18..full.len() - 4]);
        assert!(matches!(Dataset::from_bytes(&e.finish()), Err(Error::Format { .. })));
    }

    #[test]
    fn labels_must_be_in_range() {
        assert!(ImageSet::new(Split::Train, [1, 1, 1], 2, vec![0, 0], vec![0, 2]).is_err());
    }

    #[test]
    fn batches_are_normalized() {
        let d = Dataset::Images(random_images(6));
        let t = d.batch(&[0, 3, 6]).unwrap();
        assert_eq!(t.shape(), &[3, 2, 3, 5]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(normalize_pixel(0), -1.0);
        assert_eq!(normalize_pixel(255), 1.0);
        assert_eq!(denormalize(1.0), 255);
        assert!(d.batch(&[7]).is_err());
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(downsample(&[77; 16], 1, 4, 4).unwrap(), vec![77; 4]);
        let checker: Vec<u8> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 0 } else { 255 }).collect();
        assert_eq!(downsample(&checker, 1, 4, 4).unwrap(), vec![128; 4]);
        assert_eq!(downsample(&[0, 0, 1, 1], 1, 2, 2).unwrap(), vec![0]);
        assert_eq!(downsample(&[0, 1, 1, 1], 1, 2, 2).unwrap(), vec![1]);
        assert_eq!(downsample(&[1, 1, 2, 2], 1, 2, 2).unwrap(), vec![2]);
        assert!(matches!(downsample(&[0; 6], 1, 3, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn downsample_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (64, 64);
        let img: Vec<u8> = (0..h * w).map(|_| rng.random()).collect();
        let got = downsample(&img, 1, h, w).unwrap();
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += f64::from(img[(2 * y + dy) * w + 2 * x + dx]);
                    }
                }
                let expected = (s / 4.0).round_ties_even();
                assert_eq!(f64::from(got[y * w / 2 + x]), expected);
            }
        }
    }

    #[test]
    fn toy_retrieval_is_seeded_and_balanced() {
        let a = synth_toy_retrieval(9, 20, 4, 16).unwrap();
        assert_eq!(a, synth_toy_retrieval(9, 20, 4, 16).unwrap());
        assert_ne!(a.pixels(), synth_toy_retrieval(10, 20, 4, 16).unwrap().pixels());
        for c in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 20);
        }
        assert!(synth_toy_retrieval(9, 20, 1, 16).is_err());
    }

    #[test]
    fn toy_retrieval_is_learnable_by_pixel_knn() {
        let train = synth_toy_retrieval(11, 100, 4, 16).unwrap();
        let test = synth_toy_retrieval(12, 25, 4, 16).unwrap();
        let dist = |a: &[u8], b: &[u8]| -> i64 { a.iter().zip(b).map(|(&x, &y)| (i64::from(x) - i64::from(y)).pow(2)).sum() };
        let mut correct = 0;
        for q in 0..test.len() {
            let mut d: Vec<(i64, usize)> = (0..train.len()).map(|i| (dist(test.image(q), train.image(i)), i)).collect();
            d.sort();
            let mut votes = [0; 4];
            for &(_, i) in &d[..3] {
                votes[train.labels()[i] as usize] += 1;
            }
            let best = (0..4).max_by_key(|&c| (votes[c], std::cmp::Reverse(c))).unwrap();
            correct += usize::from(best as u32 == test.labels()[q]);
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.25, "3-NN accuracy {acc} is not above chance");
    }

    #[test]
    fn toy_pairs_properties() {
        let p = synth_toy_pairs(13, 200, 16).unwrap();
        assert_eq!(p, synth_toy_pairs(13, 200, 16).unwrap());
        assert_eq!(p.matches().iter().filter(|&&m| m).count(), 100);
        let l2 = |i: usize| -> f64 {
            p.patch_a(i).iter().zip(p.patch_b(i)).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>().sqrt()
        };
        let mean = |want: bool| {
            let v: Vec<f64> = (0..p.len()).filter(|&i| p.matches()[i] == want).map(l2).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) < mean(false), "{} vs {}", mean(true), mean(false));
        assert!(synth_toy_pairs(13, 7, 16).is_err());
    }

    #[test]
    fn zero_jitter_pairs_are_identical() {
        let p = synth_toy_pairs_with(14, 20, 16, PairJitter::NONE).unwrap();
        for i in 0..p.len() {
            if p.matches()[i] {
                assert_eq!(p.patch_a(i), p.patch_b(i));
            }
        }
    }

    #[test]
    fn rotation_table_keeps_unit_scale() {
        for (c, s) in ROTATION_TABLE {
            let norm = ((c * c + s * s) as f64).sqrt();
            assert!((norm - 1024.0).abs() < 2.0);
        }
        let canvas: Vec<i32> = (0..100).collect();
        let same = view(&canvas, 10, 6, 0, 0, 0, 0);
        let expected: Vec<u8> = (2..8).flat_map(|y| (2..8).map(move |x| (y * 10 + x) as u8)).collect();
        assert_eq!(same, expected);
    }

    #[test]
    fn netpbm_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for c in [1, 3] {
            let planar: Vec<u8> = (0..c * 4 * 5).map(|_| rng.random()).collect();
            let bytes = write_netpbm([c, 4, 5], &planar).unwrap();
            assert_eq!(read_netpbm(&bytes).unwrap(), ([c, 4, 5], planar));
        }
        let with_comment = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        assert_eq!(read_netpbm(with_comment).unwrap(), ([1, 1, 2], vec![1, 2]));
        assert!(read_netpbm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(write_netpbm([2, 1, 1], &[0, 0]).is_err());
    }
}
