// SPDX-License-Identifier: Apache-2.0

//! Numpy-style broadcasting for binary element-wise ops.
//!
//! Shapes are right-aligned; each aligned pair of dims must be equal or one
//! of them must be 1. Bias vectors (`[C]` against `[N, C]`), per-channel
//! params (`[1, C, 1, 1]`) and per-row scalars (`[N, 1]`) are the cases the
//! network code relies on.

use super::Tensor;
use crate::error::{dim_err, Result};

fn output_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Linear offset into an operand for every linear index of the output.
fn offsets(out: &[usize], operand: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - operand.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        if i >= pad {
            let d = operand[i - pad];
            strides[i] = if d == 1 { 0 } else { acc };
            acc *= d;
        }
    }
    let total: usize = out.iter().product();
    let mut idx = vec![0; rank];
    let mut result = Vec::with_capacity(total);
    let mut off = 0;
    for _ in 0..total {
        result.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    result
}

pub(super) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    let shape = output_shape(&a.shape, &b.shape)?;
    let (oa, ob) = (offsets(&shape, &a.shape), offsets(&shape, &b.shape));
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(a.data[i], b.data[j])).collect();
    Ok(Tensor { shape, data })
}

/// Gradients for both operands; broadcast dims are reduced by summation.
pub(super) fn adjoint(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
    partials: impl Fn(f64, f64) -> (f64, f64),
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    if a.shape == b.shape {
        for i in 0..g.len() {
            let (pa, pb) = partials(a.data[i], b.data[i]);
            if let Some(ga) = ga.as_mut() {
                ga[i] += g.data[i] * pa;
            }
            if let Some(gb) = gb.as_mut() {
                gb[i] += g.data[i] * pb;
            }
        }
        return (ga, gb);
    }
    let (oa, ob) = (offsets(&g.shape, &a.shape), offsets(&g.shape, &b.shape));
    for (o, (&i, &j)) in oa.iter().zip(&ob).enumerate() {
        let (pa, pb) = partials(a.data[i], b.data[j]);
        if let Some(ga) = ga.as_mut() {
            ga[i] += g.data[o] * pa;
        }
        if let Some(gb) = gb.as_mut() {
            gb[j] += g.data[o] * pb;
        }
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_broadcast() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3], vec![10., 20., 30.]).unwrap();
        let c = zip(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    fn channel_broadcast() {
        let a = Tensor::full(&[2, 2, 1, 2], 1.0);
        let b = Tensor::new(vec![1, 2, 1, 1], vec![3., 5.]).unwrap();
        let c = zip(&a, &b, |x, y| x * y).unwrap();
        assert_eq!(c.data(), &[3., 3., 5., 5., 3., 3., 5., 5.]);
    }

    #[test]
    fn incompatible() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(zip(&a, &b, |x, y| x + y).is_err());
    }
}
