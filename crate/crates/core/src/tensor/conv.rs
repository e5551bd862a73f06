// SPDX-License-Identifier: Apache-2.0

//! Spatial ops on `N×C×H×W` tensors.

use super::{gemm, Op, Tape, Tensor, Var};
use crate::error::{dim_err, Result};

/// Column buffers are capped at roughly this many elements per chunk.
const COLS_BUDGET: usize = 1 << 21;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(dim_err!("conv2d expects N×C×H×W input and F×C×k×k kernel, got {x:?} and {w:?}"));
        }
        let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
        let (f, wc, k, k2) = (w[0], w[1], w[2], w[3]);
        if wc != c || k != k2 {
            return Err(dim_err!("kernel {w:?} does not fit input channels {c}"));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be at least 1"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(dim_err!("{k}×{k} kernel does not fit {h}×{wd} input padded by {pad}"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Ok(Self { n, c, h, w: wd, f, k, stride, pad, ho, wo })
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.ckk() * self.hw_out()).max(1)).clamp(1, self.n)
    }
}

/// Unfolds samples `s0..s0+ns` into a `(C·k·k) × (ns·Ho·Wo)` matrix.
fn im2col(x: &[f64], g: &Geom, s0: usize, ns: usize, cols: &mut [f64]) {
    let hw = g.hw_out();
    let width = ns * hw;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * width..(row + 1) * width];
                for s in 0..ns {
                    let plane = &x[((s0 + s) * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let out_row = &mut dst[s * hw + oy * g.wo..][..g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `dx`.
fn col2im(cols: &[f64], g: &Geom, s0: usize, ns: usize, dx: &mut [f64]) {
    let hw = g.hw_out();
    let width = ns * hw;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * width..(row + 1) * width];
                for s in 0..ns {
                    let plane = &mut dx[((s0 + s) * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += src[s * hw + oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// 2-D cross-correlation of `x: N×C×H×W` with `w: F×C×k×k`.
    ///
    /// Output spatial size is `(H + 2·pad − k) / stride + 1`, rounded down.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = Geom::new(self.shape(x), self.shape(w), stride, pad)?;
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        let hw = g.hw_out();
        let mut out = vec![0.0; g.n * g.f * hw];
        let chunk = g.chunk();
        let mut cols = vec![0.0; g.ckk() * chunk * hw];
        let mut tmp = vec![0.0; g.f * chunk * hw];
        let mut s0 = 0;
        while s0 < g.n {
            let ns = chunk.min(g.n - s0);
            let width = ns * hw;
            im2col(xv, &g, s0, ns, &mut cols);
            gemm(g.f, g.ckk(), width, wv, (g.ckk(), 1), &cols, (width, 1), &mut tmp, 0.0);
            for s in 0..ns {
                for f in 0..g.f {
                    out[((s0 + s) * g.f + f) * hw..][..hw]
                        .copy_from_slice(&tmp[f * width + s * hw..][..hw]);
                }
            }
            s0 += ns;
        }
        let value = Tensor { shape: vec![g.n, g.f, g.ho, g.wo], data: out };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Conv2d { x, w, stride, pad }, rg))
    }

    pub(super) fn conv2d_adjoint(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        gy: &Tensor,
    ) {
        let g = Geom::new(self.shape(x), self.shape(w), stride, pad).expect("validated in forward");
        let (need_x, need_w) = (self.rg(x), self.rg(w));
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        let hw = g.hw_out();
        let chunk = g.chunk();
        let mut cols = vec![0.0; g.ckk() * chunk * hw];
        let mut dyt = vec![0.0; g.f * chunk * hw];
        let mut dw = need_w.then(|| vec![0.0; wv.len()]);
        let mut dx = need_x.then(|| vec![0.0; xv.len()]);
        let mut s0 = 0;
        while s0 < g.n {
            let ns = chunk.min(g.n - s0);
            let width = ns * hw;
            for s in 0..ns {
                for f in 0..g.f {
                    dyt[f * width + s * hw..][..hw]
                        .copy_from_slice(&gy.data[((s0 + s) * g.f + f) * hw..][..hw]);
                }
            }
            if let Some(dw) = dw.as_mut() {
                im2col(xv, &g, s0, ns, &mut cols);
                gemm(g.f, width, g.ckk(), &dyt, (width, 1), &cols, (1, width), dw, 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(g.ckk(), g.f, width, wv, (1, g.ckk()), &dyt, (width, 1), &mut cols, 0.0);
                col2im(&cols, &g, s0, ns, dx);
            }
            s0 += ns;
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, dx);
        }
    }

    /// Per-channel spatial mean: `N×C×H×W → N×C`.
    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 4 {
            return Err(dim_err!("avg_pool_global expects N×C×H×W, got {:?}", v.shape));
        }
        let (n, c, hw) = (v.shape[0], v.shape[1], v.shape[2] * v.shape[3]);
        let data = v.data.chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::AvgPoolGlobal(x), rg))
    }

    pub(super) fn avg_pool_adjoint(&self, grads: &mut [Option<Tensor>], x: Var, gy: &Tensor) {
        let s = self.shape(x);
        let hw = s[2] * s[3];
        let scale = 1.0 / hw as f64;
        let mut dx = Vec::with_capacity(gy.len() * hw);
        for &gi in &gy.data {
            dx.extend(std::iter::repeat_n(gi * scale, hw));
        }
        self.accumulate(grads, x, dx);
    }

    /// Nearest-neighbour upsampling by two in both spatial dims.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 4 {
            return Err(dim_err!("upsample2x expects N×C×H×W, got {:?}", v.shape));
        }
        let (h, w) = (v.shape[2], v.shape[3]);
        let mut data = Vec::with_capacity(v.len() * 4);
        for plane in v.data.chunks_exact(h * w) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data.push(plane[(y / 2) * w + xx / 2]);
                }
            }
        }
        let shape = vec![v.shape[0], v.shape[1], 2 * h, 2 * w];
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Upsample2x(x), rg))
    }

    pub(super) fn upsample_adjoint(&self, grads: &mut [Option<Tensor>], x: Var, gy: &Tensor) {
        let s = self.shape(x);
        let (h, w) = (s[2], s[3]);
        let mut dx = vec![0.0; s.iter().product()];
        for (plane, gp) in dx.chunks_exact_mut(h * w).zip(gy.data.chunks_exact(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    plane[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                }
            }
        }
        self.accumulate(grads, x, dx);
    }

    /// Normalizes each channel by its batch mean and (biased) variance.
    ///
    /// Accepts `N×C` or `N×C×H×W`; statistics pool the batch and spatial
    /// axes. No affine part: scale and shift are separate broadcast ops.
    pub fn batch_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (n, c, hw) = match v.shape[..] {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(dim_err!("batch_norm expects N×C or N×C×H×W, got {:?}", v.shape)),
        };
        let m = (n * hw) as f64;
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; v.len()];
        for ch in 0..c {
            let planes = (0..n).map(|s| &v.data[(s * c + ch) * hw..][..hw]);
            let mean = planes.clone().flatten().sum::<f64>() / m;
            let var = planes.flatten().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / m;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    out[i] = (v.data[i] - mean) * is;
                }
            }
        }
        let value = Tensor { shape: v.shape.clone(), data: out };
        let rg = self.rg(x);
        Ok(self.push(value, Op::BatchNorm { x, inv_std }, rg))
    }

    pub(super) fn batch_norm_adjoint(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        xhat: &Tensor,
        inv_std: &[f64],
        gy: &Tensor,
    ) {
        let s = &xhat.shape;
        let (n, c) = (s[0], s[1]);
        let hw = xhat.len() / (n * c);
        let m = (n * hw) as f64;
        let mut dx = vec![0.0; xhat.len()];
        for ch in 0..c {
            let idx = (0..n).flat_map(|s| {
                let off = (s * c + ch) * hw;
                off..off + hw
            });
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for i in idx.clone() {
                sum_g += gy.data[i];
                sum_gx += gy.data[i] * xhat.data[i];
            }
            for i in idx {
                dx[i] = inv_std[ch] / m * (m * gy.data[i] - sum_g - xhat.data[i] * sum_gx);
            }
        }
        self.accumulate(grads, x, dx);
    }
}
