// SPDX-License-Identifier: Apache-2.0

//! Audits reverse-mode gradients of the regularized loss against finite
//! differences.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use bingan::gradcheck::{check, check_with, Stencil, DEFAULT_STEP};
use bingan::losses::{loss_dmr, loss_mac, loss_me};
use bingan::quantize::softsign_var;
use bingan::tensor::{Tape, Tensor, Var};
use bingan::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn signed(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // A single primitive: leaky-relu composed with tanh.
    let x = signed(&mut rng, 4, 6, 0.05, 1.0);
    let report = check(
        &[x],
        |t: &mut Tape, v: &[Var]| {
            let a = t.leaky_relu(v[0], 0.2);
            let b = t.tanh(a);
            Ok(t.sum(b))
        },
        DEFAULT_STEP,
        None,
    )?;
    println!("leaky_relu ∘ tanh   max rel err {:.2e} over {} coords", report.max_rel_err, report.points);

    // Regularizers on smooth codes s_f = softsign(f) against a fixed b_h.
    let f = signed(&mut rng, 6, 4, 0.03, 0.3);
    let b_h = signed(&mut rng, 6, 12, 0.5, 1.0);
    let b_h = Tensor::new(vec![6, 12], b_h.data().iter().map(|v| v.signum()).collect())?;
    let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let s = softsign_var(t, v[0], 0.05)?;
        let bh = t.constant(b_h.clone());
        let dmr = loss_dmr(t, bh, s)?;
        let me = loss_me(t, s)?;
        let mac = loss_mac(t, s, bh, 0.5)?;
        let reg = t.add(me, mac)?;
        let dmr = t.scale(dmr, 0.05);
        let reg = t.scale(reg, 0.01);
        t.add(dmr, reg)
    };
    let central = check(std::slice::from_ref(&f), build, DEFAULT_STEP, None)?;
    let five = check_with(&[f], build, 1e-3, None, Stencil::FivePoint)?;
    println!("λ·(L_DMR, L_ME + L_MAC) central    {:.2e}", central.max_rel_err);
    println!("λ·(L_DMR, L_ME + L_MAC) five-point {:.2e}", five.max_rel_err);
    Ok(())
}
