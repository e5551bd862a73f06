// SPDX-License-Identifier: Apache-2.0

//! Minibatch losses: adversarial, feature matching and the code regularizers.
//!
//! Pairwise terms sum over ordered pairs `k ≠ j`, so every unordered pair is
//! counted twice and the plain averages divide by `N(N − 1)`. The high
//! dimensional codes `b_h` only ever enter through a stop-gradient.

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Regularizer weights and shape parameters. Defaults are the published
/// settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerConfig {
    pub lambda_dmr: f64,
    pub lambda_bre: f64,
    /// Softsign smoothing.
    pub gamma: f64,
    /// Spread of the pair weights in the weighted decorrelation term.
    pub beta: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self { lambda_dmr: 0.05, lambda_bre: 0.01, gamma: 0.001, beta: 0.5 }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_dmr", self.lambda_dmr), ("lambda_bre", self.lambda_bre)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(config_err!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.beta > 0.0) {
            return Err(config_err!("beta must be positive, got {}", self.beta));
        }
        Ok(())
    }
}

/// Every scalar of one discriminator/generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_dmr: f64,
    pub l_me: f64,
    pub l_mac: f64,
    pub l_total: f64,
    pub l_g: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_d,l_dmr,l_me,l_mac,l_total,l_g";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.l_d, self.l_dmr, self.l_me, self.l_mac, self.l_total, self.l_g
        )
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_d", self.l_d),
            ("l_dmr", self.l_dmr),
            ("l_me", self.l_me),
            ("l_mac", self.l_mac),
            ("l_total", self.l_total),
            ("l_g", self.l_g),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Individual loss values before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_d: f64,
    pub l_dmr: f64,
    pub l_me: f64,
    pub l_mac: f64,
    pub l_g: f64,
}

/// `L = L_D + λ_DMR·L_DMR + λ_BRE·(L_ME + L_MAC)`.
pub fn total_loss(parts: LossParts, cfg: &RegularizerConfig) -> Result<LossBreakdown> {
    if cfg.lambda_dmr < 0.0 || cfg.lambda_bre < 0.0 {
        return Err(config_err!("regularizer weights must be non-negative"));
    }
    let l_total = parts.l_d + cfg.lambda_dmr * parts.l_dmr + cfg.lambda_bre * (parts.l_me + parts.l_mac);
    Ok(LossBreakdown {
        l_d: parts.l_d,
        l_dmr: parts.l_dmr,
        l_me: parts.l_me,
        l_mac: parts.l_mac,
        l_total,
        l_g: parts.l_g,
    })
}

/// `N × N` matrix of ones with a zero diagonal.
pub fn off_diagonal_mask(n: usize) -> Tensor {
    let mut t = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        t.data_mut()[i * n + i] = 0.0;
    }
    t
}

fn batch_dims(tape: &Tape, v: Var, what: &str) -> Result<(usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 2 {
        return Err(dim_err!("{what} must be N×D, got {s:?}"));
    }
    if s[0] < 2 {
        return Err(contract_err!("{what} needs at least two rows for pairwise terms, got {}", s[0]));
    }
    Ok((s[0], s[1]))
}

fn check_bipolar(t: &Tensor) -> Result<()> {
    if t.data().iter().all(|&v| v == 1.0 || v == -1.0) {
        Ok(())
    } else {
        Err(contract_err!("b_h entries must be ±1"))
    }
}

/// Normalized Gram matrix `X Xᵀ / D` on the tape.
fn gram(tape: &mut Tape, x: Var) -> Result<Var> {
    let d = tape.shape(x)[1] as f64;
    let xt = tape.transpose(x)?;
    let g = tape.matmul(x, xt)?;
    Ok(tape.scale(g, 1.0 / d))
}

/// Distance matching: mean over ordered pairs of
/// `|b_h,k·b_h,j / M − s_f,k·s_f,j / K|`. Differentiable in `s_f` only.
pub fn loss_dmr(tape: &mut Tape, b_h: Var, s_f: Var) -> Result<Var> {
    let (n, _) = batch_dims(tape, s_f, "s_f")?;
    let (nh, _) = batch_dims(tape, b_h, "b_h")?;
    if n != nh {
        return Err(dim_err!("b_h has {nh} rows but s_f has {n}"));
    }
    check_bipolar(tape.value(b_h))?;
    let b_h = tape.stop_gradient(b_h);
    let target = gram(tape, b_h)?;
    let soft = gram(tape, s_f)?;
    let diff = tape.sub(target, soft)?;
    let dist = tape.abs(diff);
    let mask = tape.constant(off_diagonal_mask(n));
    let masked = tape.mul(dist, mask)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / (n * (n - 1)) as f64))
}

/// Bit balance: `(1/K) Σ_k (mean_n s_f[n, k])²`.
pub fn loss_me(tape: &mut Tape, s_f: Var) -> Result<Var> {
    if tape.shape(s_f).len() != 2 {
        return Err(dim_err!("s_f must be N×K, got {:?}", tape.shape(s_f)));
    }
    let mean = tape.mean_rows(s_f);
    let sq = tape.square(mean);
    Ok(tape.mean(sq))
}

/// Unweighted decorrelation: mean over ordered pairs of `|s_f,k·s_f,j| / K`.
pub fn loss_ac(tape: &mut Tape, s_f: Var) -> Result<Var> {
    let (n, _) = batch_dims(tape, s_f, "s_f")?;
    let g = gram(tape, s_f)?;
    let a = tape.abs(g);
    let mask = tape.constant(off_diagonal_mask(n));
    let masked = tape.mul(a, mask)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / (n * (n - 1)) as f64))
}

/// Pair weights `α_kj = exp(−|b_h,k·b_h,j| / (β·M))` for `k ≠ j` (zero on the
/// diagonal) and their sum `Z`.
pub fn alpha_weights(b_h: &Tensor, beta: f64) -> Result<(Tensor, f64)> {
    if !(beta > 0.0) {
        return Err(config_err!("beta must be positive, got {beta}"));
    }
    if b_h.shape().len() != 2 {
        return Err(dim_err!("b_h must be N×M, got {:?}", b_h.shape()));
    }
    let (n, m) = (b_h.shape()[0], b_h.shape()[1]);
    let mut alpha = Tensor::zeros(&[n, n]);
    let mut z = 0.0;
    for k in 0..n {
        for j in 0..n {
            if k == j {
                continue;
            }
            let dot: f64 = b_h.row(k).iter().zip(b_h.row(j)).map(|(a, b)| a * b).sum();
            let a = (-dot.abs() / (beta * m as f64)).exp();
            alpha.data_mut()[k * n + j] = a;
            z += a;
        }
    }
    Ok((alpha, z))
}

/// Weighted decorrelation: `Σ_{k≠j} (α_kj / Z) |s_f,k·s_f,j| / K`.
///
/// The weights are rescaled by `exp(min|b_h·b_h′| / (β·M))` before
/// normalizing, which cancels in `α / Z`, keeps the largest weight at
/// exactly one and avoids underflow for small `β`. With all dots equal the
/// weights equal the off-diagonal mask and the result is bitwise [`loss_ac`].
pub fn loss_mac(tape: &mut Tape, s_f: Var, b_h: Var, beta: f64) -> Result<Var> {
    let (n, _) = batch_dims(tape, s_f, "s_f")?;
    let (nh, _) = batch_dims(tape, b_h, "b_h")?;
    if n != nh {
        return Err(dim_err!("b_h has {nh} rows but s_f has {n}"));
    }
    check_bipolar(tape.value(b_h))?;
    if !(beta > 0.0) {
        return Err(config_err!("beta must be positive, got {beta}"));
    }
    let bh = tape.value(b_h);
    let m = bh.shape()[1] as f64;
    let mut dots = Tensor::zeros(&[n, n]);
    for k in 0..n {
        for j in 0..n {
            let d: f64 = bh.row(k).iter().zip(bh.row(j)).map(|(a, b)| a * b).sum();
            dots.data_mut()[k * n + j] = d.abs();
        }
    }
    let min = (0..n * n).filter(|i| i / n != i % n).map(|i| dots.data()[i]).fold(f64::INFINITY, f64::min);
    let mut w = off_diagonal_mask(n);
    let mut z = 0.0;
    for i in 0..n * n {
        if i / n != i % n {
            w.data_mut()[i] = (-(dots.data()[i] - min) / (beta * m)).exp();
            z += w.data()[i];
        }
    }
    let weights = tape.constant(w);
    let g = gram(tape, s_f)?;
    let a = tape.abs(g);
    let weighted = tape.mul(a, weights)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / z))
}

/// `‖mean(f_real) − mean(f_fake)‖²` over the batch axis.
pub fn loss_feature_matching(tape: &mut Tape, f_real: Var, f_fake: Var) -> Result<Var> {
    let (sr, sf) = (tape.shape(f_real), tape.shape(f_fake));
    if sr != sf {
        return Err(dim_err!("feature shapes differ: {sr:?} vs {sf:?}"));
    }
    let mr = tape.mean_rows(f_real);
    let mf = tape.mean_rows(f_fake);
    let d = tape.sub(mr, mf)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

/// Binary cross-entropy on logits with real → 1 and fake → 0, summed over
/// the two halves: `mean softplus(−real) + mean softplus(fake)`.
pub fn loss_gan_d(tape: &mut Tape, logits_real: Var, logits_fake: Var) -> Result<Var> {
    let neg = tape.scale(logits_real, -1.0);
    let lr = tape.softplus(neg);
    let lf = tape.softplus(logits_fake);
    let mr = tape.mean(lr);
    let mf = tape.mean(lf);
    tape.add(mr, mf)
}
