// SPDX-License-Identifier: Apache-2.0

//! Evaluates the distance-matching and bit-entropy terms on hand-built codes,
//! showing what each one penalizes.

use bingan::losses::{alpha_weights, loss_ac, loss_dmr, loss_mac, loss_me};
use bingan::tensor::{Tape, Tensor};
use bingan::Result;

fn eval(f: impl FnOnce(&mut Tape) -> Result<bingan::tensor::Var>) -> Result<f64> {
    let mut t = Tape::new();
    let v = f(&mut t)?;
    Ok(t.value(v).item())
}

fn main() -> Result<()> {
    // Four examples, 8-unit high-dimensional signs and 4-bit codes.
    let b_h = Tensor::from_rows(&[
        vec![1., 1., 1., 1., -1., -1., -1., -1.],
        vec![1., 1., 1., 1., -1., -1., -1., 1.],
        vec![-1., -1., 1., 1., 1., 1., -1., -1.],
        vec![-1., -1., -1., -1., 1., 1., 1., 1.],
    ])?;
    // Codes that preserve the neighbourhood structure of b_h ...
    let faithful = Tensor::from_rows(&[
        vec![1., 1., -1., -1.],
        vec![1., 1., -1., -1.],
        vec![-1., 1., 1., -1.],
        vec![-1., -1., 1., 1.],
    ])?;
    // ... and codes where every bit is stuck at +1.
    let collapsed = Tensor::full(&[4, 4], 1.0);

    for (name, s_f) in [("faithful", &faithful), ("collapsed", &collapsed)] {
        let dmr = eval(|t| {
            let (bh, sf) = (t.constant(b_h.clone()), t.constant(s_f.clone()));
            loss_dmr(t, bh, sf)
        })?;
        let me = eval(|t| {
            let sf = t.constant(s_f.clone());
            loss_me(t, sf)
        })?;
        let ac = eval(|t| {
            let sf = t.constant(s_f.clone());
            loss_ac(t, sf)
        })?;
        let mac = eval(|t| {
            let (bh, sf) = (t.constant(b_h.clone()), t.constant(s_f.clone()));
            loss_mac(t, sf, bh, 0.5)
        })?;
        println!("{name:>9}: L_DMR {dmr:.4}  L_ME {me:.4}  L_AC {ac:.4}  L_MAC {mac:.4}");
    }

    let (alpha, z) = alpha_weights(&b_h, 0.5)?;
    println!("pair weights α (β = 0.5), Z = {z:.4}:");
    for i in 0..4 {
        let row: Vec<String> = (0..4).map(|j| format!("{:.3}", alpha.at2(i, j))).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
