// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference checks against [`Tape::backward`].
//!
//! The numerical side only ever evaluates the forward graph, so it shares no
//! code with the adjoints it audits.

use crate::error::{contract_err, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor in `|analytic − numeric| / (|numeric| + FLOOR)`.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    /// Largest relative error over every checked coordinate.
    pub max_rel_err: f64,
    /// `(input index, coordinate)` where the largest error occurred.
    pub worst: (usize, usize),
    /// Number of coordinates compared.
    pub points: usize,
}

impl GradReport {
    pub fn merge(self, other: GradReport) -> GradReport {
        let worst = if other.max_rel_err > self.max_rel_err { other } else { self };
        GradReport { points: self.points + other.points, ..worst }
    }
}

fn eval<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(contract_err!("gradient check needs a scalar output, got {:?}", v.shape()));
    }
    Ok(v.item())
}

/// Finite-difference formula used for the numeric side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(L(x+h) − L(x−h)) / 2h`, truncation error `O(h²)`.
    Central,
    /// `(8(L(x+h) − L(x−h)) − (L(x+2h) − L(x−2h))) / 12h`, truncation
    /// error `O(h⁴)`; permits larger steps where roundoff dominates.
    FivePoint,
}

/// Compares analytic and numeric gradients of `build` w.r.t. all inputs.
///
/// `max_coords` caps the coordinates checked per input; when set, an evenly
/// strided subset is used.
pub fn check<F>(inputs: &[Tensor], build: F, step: f64, max_coords: Option<usize>) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with(inputs, build, step, max_coords, Stencil::Central)
}

pub fn check_with<F>(
    inputs: &[Tensor],
    build: F,
    step: f64,
    max_coords: Option<usize>,
    stencil: Stencil,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport { max_rel_err: 0.0, worst: (0, 0), points: 0 };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, (&v, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(v, input.shape());
        let n = input.len();
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        for j in (0..n).step_by(stride) {
            let orig = input.data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                probe[i].data_mut()[j] = orig + offset;
                let v = eval(&probe, &build);
                probe[i].data_mut()[j] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::Central => (at(step)? - at(-step)?) / (2.0 * step),
                Stencil::FivePoint => {
                    let near = at(step)? - at(-step)?;
                    let far = at(2.0 * step)? - at(-2.0 * step)?;
                    (8.0 * near - far) / (12.0 * step)
                }
            };
            let err = (analytic.data()[j] - numeric).abs() / (numeric.abs() + REL_FLOOR);
            if !err.is_finite() || err > report.max_rel_err {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (i, j);
            }
            report.points += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_sum(t: &mut Tape, v: &[Var]) -> Result<Var> {
        let sq = t.mul(v[0], v[0])?;
        let cube = t.mul(sq, v[0])?;
        Ok(t.sum(cube))
    }

    fn inputs() -> Vec<Tensor> {
        vec![Tensor::new(vec![4], vec![0.5, -1.25, 2.0, 0.75]).unwrap()]
    }

    #[test]
    fn central_error_matches_truncation_term() {
        // Central difference of x³ overshoots by exactly h².
        let h = 1e-2;
        let r = check(&inputs(), cube_sum, h, None).unwrap();
        assert_eq!(r.points, 4);
        let expected = (h * h) / (3.0 * 0.5f64.powi(2) + h * h + REL_FLOOR);
        assert!((r.max_rel_err - expected).abs() < 1e-9, "{r:?}");
        assert_eq!(r.worst, (0, 0));
    }

    #[test]
    fn five_point_is_exact_on_cubics() {
        let r = check_with(&inputs(), cube_sum, 1e-1, None, Stencil::FivePoint).unwrap();
        assert!(r.max_rel_err < 1e-12, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_adjoint() {
        // stop_gradient hides the x dependence from the tape, not from the stencil.
        let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let c = t.stop_gradient(v[0]);
            let y = t.mul(c, v[0])?;
            Ok(t.sum(y))
        };
        let r = check(&inputs(), build, DEFAULT_STEP, None).unwrap();
        assert!((r.max_rel_err - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn strided_subset_and_scalar_contract() {
        let big = vec![Tensor::new(vec![10], (0..10).map(|i| i as f64 * 0.1).collect()).unwrap()];
        let r = check(&big, cube_sum, DEFAULT_STEP, Some(4)).unwrap();
        assert_eq!(r.points, 4);
        let vector_out = |_: &mut Tape, v: &[Var]| -> Result<Var> { Ok(v[0]) };
        assert!(check(&big, vector_out, DEFAULT_STEP, None).is_err());
    }
}
