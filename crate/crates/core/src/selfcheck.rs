// SPDX-License-Identifier: Apache-2.0

//! Correctness suites shared by the `selfcheck` subcommand and the
//! acceptance harness: finite-difference gradients, loop oracles, reduction
//! identities and the stop-gradient contract.
//!
//! The oracles in [`oracle`] are written from the defining sums with plain
//! loops and share no code with the tape implementations they audit.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::synth_toy_retrieval;
use crate::error::Result;
use crate::eval::{average_precision, fpr_at_tpr};
use crate::gradcheck::{check_with, GradReport, Stencil, DEFAULT_STEP};
use crate::losses::{
    loss_ac, loss_dmr, loss_feature_matching, loss_gan_d, loss_mac, loss_me, total_loss, LossParts,
    RegularizerConfig,
};
use crate::nn::{build_discriminator, ArchConfig, Task};
use crate::quantize::{hamming_from_dot, hamming_words, sign_tensor, softsign_var, BitMatrix};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{TrainConfig, Trainer};

/// Relative error bound for analytic vs central-difference gradients.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Coordinates compared per gradient check.
pub const GRAD_MIN_POINTS: usize = 100;
/// Absolute bound for implementation vs loop oracle.
pub const ORACLE_TOL: f64 = 1e-12;
/// Bound on `|L_MAC − L_AC|` at `β = 1e9`.
pub const LARGE_BETA_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} [{}] {}: {}", self.suite, self.name, self.detail)
    }
}

fn outcome(suite: &'static str, name: impl Into<String>, passed: bool, detail: String) -> Outcome {
    Outcome { suite, name: name.into(), passed, detail }
}

/// Loop oracles for the pairwise losses and evaluation metrics.
pub mod oracle {
    use crate::tensor::Tensor;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn dmr(bh: &Tensor, sf: &Tensor) -> f64 {
        let (n, m, k) = (bh.shape()[0], bh.shape()[1] as f64, sf.shape()[1] as f64);
        let mut acc = 0.0;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    acc += (dot(bh.row(a), bh.row(b)) / m - dot(sf.row(a), sf.row(b)) / k).abs();
                }
            }
        }
        acc / (n * (n - 1)) as f64
    }

    pub fn ac(sf: &Tensor) -> f64 {
        let (n, k) = (sf.shape()[0], sf.shape()[1] as f64);
        let mut acc = 0.0;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    acc += dot(sf.row(a), sf.row(b)).abs() / k;
                }
            }
        }
        acc / (n * (n - 1)) as f64
    }

    pub fn mac(sf: &Tensor, bh: &Tensor, beta: f64) -> f64 {
        let (n, m, k) = (sf.shape()[0], bh.shape()[1] as f64, sf.shape()[1] as f64);
        let alpha = |a: usize, b: usize| (-dot(bh.row(a), bh.row(b)).abs() / (beta * m)).exp();
        let mut z = 0.0;
        let mut acc = 0.0;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    z += alpha(a, b);
                    acc += alpha(a, b) * dot(sf.row(a), sf.row(b)).abs() / k;
                }
            }
        }
        acc / z
    }

    pub fn hamming(a: &[i8], b: &[i8]) -> u32 {
        a.iter().zip(b).filter(|(x, y)| x != y).count() as u32
    }

    /// AP@k straight from the definition; `ranked` is the full ranking.
    pub fn average_precision(q: i32, ranked: &[i32], k: usize) -> f64 {
        let r = ranked.iter().filter(|&&l| l == q).count();
        if r == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 1..=k.min(ranked.len()) {
            if ranked[i - 1] == q {
                total += ranked[..i].iter().filter(|&&l| l == q).count() as f64 / i as f64;
            }
        }
        total / r.min(k) as f64
    }

    /// `(threshold, fpr)` by trying every threshold in increasing order.
    pub fn fpr_at_tpr(m: &[u32], n: &[u32], target: f64) -> (u32, f64) {
        let max = *m.iter().chain(n).max().expect("nonempty");
        for t in 0..=max {
            let tp = m.iter().filter(|&&d| d <= t).count();
            if tp as f64 / m.len() as f64 >= target - 1e-12 {
                return (t, n.iter().filter(|&&d| d <= t).count() as f64 / n.len() as f64);
            }
        }
        unreachable!("the largest threshold accepts every match")
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Uniform in `±[0.05, 1]`, away from the kinks of `|·|` and leaky-relu.
fn rand_signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_matrix(rng, shape, 0.05, 1.0);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random_bool(0.5) {
            *v = -*v
        }
    });
    t
}

fn rand_bipolar(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    sign_tensor(&rand_matrix(rng, shape, -1.0, 1.0)).expect("finite")
}

/// Smallest distance of any pairwise `|·|` argument in the DMR and
/// decorrelation terms from its kink at zero.
fn kink_margin(bh: &Tensor, sf: &Tensor) -> f64 {
    let (n, m, k) = (sf.shape()[0], bh.shape()[1] as f64, sf.shape()[1] as f64);
    let dot = |t: &Tensor, a: usize, b: usize| -> f64 { t.row(a).iter().zip(t.row(b)).map(|(x, y)| x * y).sum() };
    let mut margin = f64::INFINITY;
    for a in 0..n {
        for b in 0..a {
            let soft = dot(sf, a, b) / k;
            margin = margin.min(soft.abs()).min((dot(bh, a, b) / m - soft).abs());
        }
    }
    margin
}

/// Random `(b_h, s_f)` whose pairwise terms stay differentiable within a
/// finite-difference probe.
fn smooth_pair(rng: &mut ChaCha8Rng, n: usize, m: usize, k: usize, draw: fn(&mut ChaCha8Rng, &[usize]) -> Tensor, map: impl Fn(&Tensor) -> Tensor) -> (Tensor, Tensor) {
    loop {
        let bh = rand_bipolar(rng, &[n, m]);
        let x = draw(rng, &[n, k]);
        if kink_margin(&bh, &map(&x)) > 2e-3 {
            return (bh, x);
        }
    }
}

/// Uniform in `±[0.03, 0.3]`, where softsign at the published γ is not
/// saturated.
fn rand_code_preactivation(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_matrix(rng, shape, 0.03, 0.3);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random_bool(0.5) {
            *v = -*v
        }
    });
    t
}

fn softsign_values(x: &Tensor, gamma: f64) -> Tensor {
    let mut t = x.clone();
    t.data_mut().iter_mut().for_each(|v| *v /= v.abs() + gamma);
    t
}

fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone().reshape(tape.shape(y))?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Repeats `case` on fresh random instances until at least
/// [`GRAD_MIN_POINTS`] coordinates have been compared.
fn grad_case(
    rng: &mut ChaCha8Rng,
    (step, stencil): (f64, Stencil),
    case: &dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Build),
) -> Result<GradReport> {
    let mut total = GradReport { max_rel_err: 0.0, worst: (0, 0), points: 0 };
    while total.points < GRAD_MIN_POINTS {
        let (inputs, build) = case(rng);
        total = total.merge(check_with(&inputs, build, step, None, stencil)?);
    }
    Ok(total)
}

fn unary(op: fn(&mut Tape, Var) -> Result<Var>, shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    move |rng| {
        let x = rand_signed(rng, shape);
        let w = rand_matrix(rng, &[4096], 0.5, 1.5);
        (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| {
            let y = op(t, v[0])?;
            if t.value(y).len() == 1 {
                return Ok(y);
            }
            let len = t.value(y).len();
            let w = Tensor::new(vec![len], w.data()[..len].to_vec())?;
            weighted_sum(t, y, &w)
        }) as Build)
    }
}

fn binary(op: fn(&mut Tape, Var, Var) -> Result<Var>, a: &'static [usize], b: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    move |rng| {
        let x = rand_signed(rng, a);
        let mut y = rand_signed(rng, b);
        // Keep divisors away from zero.
        y.data_mut().iter_mut().for_each(|v| *v += v.signum());
        let w = rand_matrix(rng, &[4096], 0.5, 1.5);
        (vec![x, y], Box::new(move |t: &mut Tape, v: &[Var]| {
            let out = op(t, v[0], v[1])?;
            let len = t.value(out).len();
            let w = Tensor::new(vec![len], w.data()[..len].to_vec())?;
            weighted_sum(t, out, &w)
        }) as Build)
    }
}

/// Gradient checks of every tape primitive and every loss.
pub fn gradient_suite(seed: u64) -> Result<Vec<Outcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Case = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Build)>;
    let mut cases: Vec<(&str, f64, Case)> = vec![
        ("add", DEFAULT_STEP, Box::new(binary(|t, a, b| t.add(a, b), &[6, 5], &[5]))),
        ("sub", DEFAULT_STEP, Box::new(binary(|t, a, b| t.sub(a, b), &[6, 5], &[6, 1]))),
        ("mul", DEFAULT_STEP, Box::new(binary(|t, a, b| t.mul(a, b), &[6, 5], &[6, 5]))),
        ("div", DEFAULT_STEP, Box::new(binary(|t, a, b| t.div(a, b), &[6, 5], &[1]))),
        ("matmul", DEFAULT_STEP, Box::new(binary(|t, a, b| t.matmul(a, b), &[6, 5], &[5, 4]))),
        ("scale", DEFAULT_STEP, Box::new(unary(|t, x| Ok(t.scale(x, -1.7)), &[100]))),
        ("add_scalar", DEFAULT_STEP, Box::new(unary(|t, x| Ok(t.add_scalar(x, 0.3)), &[100]))),
        ("leaky_relu", DEFAULT_STEP, Box::new(unary(|t, x| Ok(t.leaky_relu(x, 0.2)), &[100]))),
        ("tanh", DEFAULT_STEP, Box::new(unary(|t, x| Ok(t.tanh(x)), &[100]))),
        ("sigmoid", DEFAULT_STEP, Box::new(unary(|t, x| Ok(t.sigmoid(x)), &[100]))),
        ("abs", DEFAULT_STEP, Box::new(unary(|t, x| Ok(t.abs(x)), &[100]))),
        ("exp", DEFAULT_STEP, Box::new(unary(|t, x| Ok(t.exp(x)), &[100]))),
        ("square", DEFAULT_STEP, Box::new(unary(|t, x| Ok(t.square(x)), &[100]))),
        ("softplus", DEFAULT_STEP, Box::new(unary(|t, x| Ok(t.softplus(x)), &[100]))),
        ("sum", DEFAULT_STEP, Box::new(unary(|t, x| { let s = t.sum(x); Ok(t.square(s)) }, &[100]))),
        ("mean", DEFAULT_STEP, Box::new(unary(|t, x| { let s = t.mean(x); Ok(t.square(s)) }, &[100]))),
        ("mean_rows", DEFAULT_STEP, Box::new(unary(|t, x| { let m = t.mean_rows(x); Ok(t.square(m)) }, &[10, 10]))),
        ("transpose", DEFAULT_STEP, Box::new(unary(|t, x| t.transpose(x), &[10, 10]))),
        ("reshape", DEFAULT_STEP, Box::new(unary(|t, x| t.reshape(x, &[4, 25]), &[10, 10]))),
        ("flatten", DEFAULT_STEP, Box::new(unary(|t, x| t.flatten(x), &[4, 5, 5]))),
        ("slice_rows", DEFAULT_STEP, Box::new(unary(|t, x| { let s = t.slice_rows(x, 2, 5)?; Ok(t.square(s)) }, &[10, 10]))),
        ("concat_rows", DEFAULT_STEP, Box::new(binary(|t, a, b| t.concat_rows(&[a, b]), &[6, 10], &[4, 10]))),
        ("avg_pool_global", DEFAULT_STEP, Box::new(unary(|t, x| t.avg_pool_global(x), &[4, 25, 2, 2]))),
        ("upsample2x", DEFAULT_STEP, Box::new(unary(|t, x| t.upsample2x(x), &[2, 2, 5, 5]))),
        ("batch_norm", DEFAULT_STEP, Box::new(unary(|t, x| t.batch_norm(x), &[4, 2, 4, 4]))),
        ("conv2d", DEFAULT_STEP, Box::new(binary(|t, x, w| t.conv2d(x, w, 1, 1), &[2, 2, 5, 5], &[3, 2, 3, 3]))),
        ("conv2d_strided", DEFAULT_STEP, Box::new(binary(|t, x, w| t.conv2d(x, w, 2, 0), &[2, 2, 7, 7], &[3, 2, 3, 3]))),
        ("softsign", DEFAULT_STEP, Box::new(unary(|t, x| softsign_var(t, x, 0.05), &[100]))),
    ];
    cases.push(("softsign (γ = 0.001)", DEFAULT_STEP, Box::new(|rng: &mut ChaCha8Rng| {
        let x = rand_code_preactivation(rng, &[100]);
        let w = rand_matrix(rng, &[100], 0.5, 1.5);
        (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| {
            let y = softsign_var(t, v[0], 0.001)?;
            weighted_sum(t, y, &w)
        }) as Build)
    })));
    cases.push(("L_DMR", DEFAULT_STEP, Box::new(|rng: &mut ChaCha8Rng| {
        let (bh, sf) = smooth_pair(rng, 8, 24, 16, rand_signed, Tensor::clone);
        (vec![sf], Box::new(move |t: &mut Tape, v: &[Var]| {
            let b = t.constant(bh.clone());
            loss_dmr(t, b, v[0])
        }) as Build)
    })));
    cases.push(("L_ME", DEFAULT_STEP, Box::new(|rng: &mut ChaCha8Rng| {
        (vec![rand_signed(rng, &[8, 16])], Box::new(|t: &mut Tape, v: &[Var]| loss_me(t, v[0])) as Build)
    })));
    cases.push(("L_AC", DEFAULT_STEP, Box::new(|rng: &mut ChaCha8Rng| {
        let (_, sf) = smooth_pair(rng, 8, 24, 16, rand_signed, Tensor::clone);
        (vec![sf], Box::new(|t: &mut Tape, v: &[Var]| loss_ac(t, v[0])) as Build)
    })));
    cases.push(("L_MAC", DEFAULT_STEP, Box::new(|rng: &mut ChaCha8Rng| {
        let (bh, sf) = smooth_pair(rng, 8, 24, 16, rand_signed, Tensor::clone);
        (vec![sf], Box::new(move |t: &mut Tape, v: &[Var]| {
            let b = t.constant(bh.clone());
            loss_mac(t, v[0], b, 0.5)
        }) as Build)
    })));
    cases.push(("L_G", DEFAULT_STEP, Box::new(|rng: &mut ChaCha8Rng| {
        (
            vec![rand_signed(rng, &[8, 8]), rand_signed(rng, &[8, 8])],
            Box::new(|t: &mut Tape, v: &[Var]| loss_feature_matching(t, v[0], v[1])) as Build,
        )
    })));
    cases.push(("L_D", DEFAULT_STEP, Box::new(|rng: &mut ChaCha8Rng| {
        (
            vec![rand_matrix(rng, &[50, 1], -4.0, 4.0), rand_matrix(rng, &[50, 1], -4.0, 4.0)],
            Box::new(|t: &mut Tape, v: &[Var]| loss_gan_d(t, v[0], v[1])) as Build,
        )
    })));
    // λ-scaled coordinates are small; the higher-order stencil allows a step
    // where roundoff stays well below the tolerance.
    cases.push(("L_total", 1e-3, Box::new(|rng: &mut ChaCha8Rng| {
        let cfg = RegularizerConfig::default();
        let (bh, f) = smooth_pair(rng, 8, 24, 16, rand_code_preactivation, |x| softsign_values(x, cfg.gamma));
        (
            vec![f, rand_matrix(rng, &[4, 1], -2.0, 2.0), rand_matrix(rng, &[4, 1], -2.0, 2.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let s = softsign_var(t, v[0], cfg.gamma)?;
                let b = t.constant(bh.clone());
                let l_d = loss_gan_d(t, v[1], v[2])?;
                let dmr = loss_dmr(t, b, s)?;
                let me = loss_me(t, s)?;
                let mac = loss_mac(t, s, b, cfg.beta)?;
                let bre = t.add(me, mac)?;
                let a = t.scale(dmr, cfg.lambda_dmr);
                let c = t.scale(bre, cfg.lambda_bre);
                let r = t.add(a, c)?;
                t.add(l_d, r)
            }) as Build,
        )
    })));
    let mut out = Vec::with_capacity(cases.len());
    for (name, step, case) in &cases {
        let stencil = if *name == "L_total" { Stencil::FivePoint } else { Stencil::Central };
        let r = grad_case(&mut rng, (*step, stencil), case.as_ref())?;
        let passed = r.max_rel_err < GRAD_REL_TOL && r.points >= GRAD_MIN_POINTS;
        out.push(outcome(
            "gradients",
            *name,
            passed,
            format!("max rel err {:.2e} over {} points", r.max_rel_err, r.points),
        ));
    }
    Ok(out)
}

fn eval_loss(bh: &Tensor, sf: &Tensor, f: impl Fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let b = tape.constant(bh.clone());
    let s = tape.constant(sf.clone());
    let l = f(&mut tape, b, s)?;
    Ok(tape.value(l).item())
}

/// Implementations against the loop oracles.
pub fn oracle_suite(seed: u64) -> Result<Vec<Outcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut mismatches = 0;
    for _ in 0..10_000 {
        let m = rng.random_range(1..=200usize);
        let a: Vec<i8> = (0..m).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
        let b: Vec<i8> = (0..m).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
        let dot: i64 = a.iter().zip(&b).map(|(&x, &y)| x as i64 * y as i64).sum();
        let pa = BitMatrix::from_bipolar(&a, m)?;
        let pb = BitMatrix::from_bipolar(&b, m)?;
        let from_dot = hamming_from_dot(dot, m as u32)?;
        let popcount = hamming_words(pa.row(0), pb.row(0));
        if from_dot != popcount || popcount != oracle::hamming(&a, &b) {
            mismatches += 1;
        }
    }
    out.push(outcome("oracles", "hamming_from_dot vs popcount-XOR", mismatches == 0, format!("{mismatches} mismatches in 10000 pairs")));

    let (mut e_dmr, mut e_ac, mut e_mac): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for trial in 0..200 {
        let n = 2 + trial % 7;
        let bh = rand_bipolar(&mut rng, &[n, 1 + trial % 40]);
        let sf = rand_matrix(&mut rng, &[n, 1 + trial % 17], -1.0, 1.0);
        let beta = [0.5, 0.1, 2.0][trial % 3];
        e_dmr = e_dmr.max((eval_loss(&bh, &sf, loss_dmr)? - oracle::dmr(&bh, &sf)).abs());
        e_ac = e_ac.max((eval_loss(&bh, &sf, |t, _, s| loss_ac(t, s))? - oracle::ac(&sf)).abs());
        e_mac = e_mac.max((eval_loss(&bh, &sf, |t, b, s| loss_mac(t, s, b, beta))? - oracle::mac(&sf, &bh, beta)).abs());
    }
    for (name, e) in [("loss_dmr", e_dmr), ("loss_ac", e_ac), ("loss_mac", e_mac)] {
        out.push(outcome("oracles", format!("{name} vs pairwise loops"), e <= ORACLE_TOL, format!("max abs err {e:.2e}, N ≤ 8")));
    }

    let mut e_ap: f64 = 0.0;
    let mut e_fpr: f64 = 0.0;
    let mut threshold_mismatch = 0;
    for _ in 0..500 {
        let len = rng.random_range(1..=50);
        let ranked: Vec<i32> = (0..len).map(|_| rng.random_range(0..4)).collect();
        let k = rng.random_range(1..=60);
        let q = rng.random_range(0..4);
        e_ap = e_ap.max((average_precision(q, &ranked, k)? - oracle::average_precision(q, &ranked, k)).abs());
        let m: Vec<u32> = (0..rng.random_range(1..=25)).map(|_| rng.random_range(0..33)).collect();
        let n: Vec<u32> = (0..rng.random_range(1..=25)).map(|_| rng.random_range(0..33)).collect();
        let r = fpr_at_tpr(&m, &n, 0.95)?;
        let (t, fpr) = oracle::fpr_at_tpr(&m, &n, 0.95);
        threshold_mismatch += usize::from(t != r.threshold);
        e_fpr = e_fpr.max((r.fpr - fpr).abs());
    }
    out.push(outcome("oracles", "average_precision vs brute force", e_ap <= ORACLE_TOL, format!("max abs err {e_ap:.2e}, ≤ 50 items")));
    out.push(outcome(
        "oracles",
        "FPR@95 vs brute force",
        e_fpr <= ORACLE_TOL && threshold_mismatch == 0,
        format!("max abs err {e_fpr:.2e}, {threshold_mismatch} threshold mismatches"),
    ));
    Ok(out)
}

/// `L_MAC = L_AC` for equal dots, the large-β limit and `L_total = L_D`
/// with both weights zero.
pub fn reduction_suite(seed: u64) -> Result<Vec<Outcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Identical rows and mutually orthogonal Hadamard rows both give equal
    // pairwise dots.
    let identical = Tensor::new(vec![6, 12], rand_bipolar(&mut rng, &[1, 12]).data().repeat(6))?;
    let hadamard = Tensor::from_rows(&[
        vec![1., 1., 1., 1., 1., 1., 1., 1.],
        vec![1., -1., 1., -1., 1., -1., 1., -1.],
        vec![1., 1., -1., -1., 1., 1., -1., -1.],
        vec![1., -1., -1., 1., 1., -1., -1., 1.],
        vec![1., 1., 1., 1., -1., -1., -1., -1.],
        vec![1., -1., 1., -1., -1., 1., -1., 1.],
    ])?;
    let mut exact = true;
    for bh in [&identical, &hadamard] {
        for _ in 0..20 {
            let sf = rand_matrix(&mut rng, &[6, 10], -1.0, 1.0);
            let mac = eval_loss(bh, &sf, |t, b, s| loss_mac(t, s, b, 0.5))?;
            let ac = eval_loss(bh, &sf, |t, _, s| loss_ac(t, s))?;
            exact &= mac == ac;
        }
    }
    out.push(outcome("reductions", "L_MAC == L_AC for equal pairwise dots", exact, "40 batches, bitwise".into()));

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let bh = rand_bipolar(&mut rng, &[8, 32]);
        let sf = rand_matrix(&mut rng, &[8, 16], -1.0, 1.0);
        let mac = eval_loss(&bh, &sf, |t, b, s| loss_mac(t, s, b, 1e9))?;
        let ac = eval_loss(&bh, &sf, |t, _, s| loss_ac(t, s))?;
        worst = worst.max((mac - ac).abs());
    }
    out.push(outcome("reductions", "L_MAC → L_AC at β = 1e9", worst < LARGE_BETA_TOL, format!("max |diff| {worst:.2e}")));

    let parts = LossParts { l_d: rng.random(), l_dmr: rng.random(), l_me: rng.random(), l_mac: rng.random(), l_g: 0.0 };
    let zero = RegularizerConfig { lambda_dmr: 0.0, lambda_bre: 0.0, ..RegularizerConfig::default() };
    let b = total_loss(parts, &zero)?;
    let mut identity = b.l_total == b.l_d;

    // The same identity through a real training step.
    let data = crate::data::Dataset::Images(synth_toy_retrieval(seed, 8, 2, 16)?);
    let cfg = TrainConfig {
        task: Task::Toy,
        code_bits: 8,
        channel_div: 4,
        batch_size: 16,
        z_dim: 8,
        seed,
        reg: zero,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, data.shape())?;
    let batch = data.batch(&(0..16).collect::<Vec<_>>())?;
    for _ in 0..2 {
        let l = trainer.train_step(&batch)?;
        identity &= l.l_total == l.l_d;
    }
    out.push(outcome("reductions", "L_total == L_D at λ_DMR = λ_BRE = 0", identity, "loss algebra and two training steps, bitwise".into()));
    Ok(out)
}

/// Gradient reaching discriminator parameters through `b_h` only.
///
/// `b_h` is built as `sign(h) + (h − stopgrad(h))`: its value is exactly
/// the sign code, while its derivative with respect to `h` is the identity,
/// so any gradient the losses pass back into `b_h` would reach the
/// parameters. `s_f` enters as a constant, leaving `b_h` the only live path.
/// Returns the squared norms `(through the losses, through a control
/// expression that uses b_h without a stop-gradient)`.
pub fn b_h_gradient_norms(seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchConfig { channel_div: 16, free_bits: true, ..ArchConfig::desk(Task::Retrieval, 8) };
    let disc = build_discriminator(&arch, &[3, 16, 16], &mut rng)?;
    let x = rand_matrix(&mut rng, &[8, 3, 16, 16], -1.0, 1.0);
    let cfg = RegularizerConfig::default();

    let run = |control: bool| -> Result<f64> {
        let mut tape = Tape::new();
        let params = disc.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let fwd = disc.forward(&mut tape, &params, xv)?;
        let (f, h) = (fwd.f.expect("f tap"), fwd.h.expect("h tap"));
        let sign = tape.constant(sign_tensor(tape.value(h))?);
        let frozen = tape.stop_gradient(h);
        let residual = tape.sub(h, frozen)?;
        let b_h = tape.add(sign, residual)?;
        let f_const = tape.constant(tape.value(f).clone());
        let s_f = softsign_var(&mut tape, f_const, cfg.gamma)?;
        let loss = if control {
            // Same alignment target without the stop-gradient.
            let bt = tape.transpose(b_h)?;
            let g = tape.matmul(b_h, bt)?;
            let sq = tape.square(g);
            tape.mean(sq)
        } else {
            let dmr = loss_dmr(&mut tape, b_h, s_f)?;
            let mac = loss_mac(&mut tape, s_f, b_h, cfg.beta)?;
            let a = tape.scale(dmr, cfg.lambda_dmr);
            let c = tape.scale(mac, cfg.lambda_bre);
            tape.add(a, c)?
        };
        let grads = tape.backward(loss)?;
        Ok(params.iter().map(|&p| grads.sq_norm(p)).sum())
    };
    Ok((run(false)?, run(true)?))
}

pub fn stop_gradient_suite(seed: u64) -> Result<Vec<Outcome>> {
    let (through_losses, control) = b_h_gradient_norms(seed)?;
    Ok(vec![outcome(
        "stop-gradient",
        "no gradient reaches D through b_h",
        through_losses == 0.0 && control > 0.0,
        format!("‖∂/∂θ‖² via b_h = {through_losses:e} (control without stop-gradient: {control:.3e})"),
    )])
}

/// Runs every suite and reports timings per suite.
pub fn run_all(seed: u64) -> Result<Vec<(Vec<Outcome>, std::time::Duration)>> {
    let suites: [fn(u64) -> Result<Vec<Outcome>>; 4] = [gradient_suite, oracle_suite, reduction_suite, stop_gradient_suite];
    suites
        .iter()
        .map(|s| {
            let t = Instant::now();
            let r = s(seed)?;
            Ok((r, t.elapsed()))
        })
        .collect()
}
