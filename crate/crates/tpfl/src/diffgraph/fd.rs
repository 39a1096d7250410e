//! Central finite-difference gradient oracle.
//!
//! This is the independent check that the reverse-mode sweep is computing
//! the right thing: perturb one coordinate at a time, re-evaluate the scalar
//! loss, and difference. It is O(2·n) loss evaluations per input tensor, so
//! it only appears in tests, on small problems.

use crate::diffgraph::tensor::Tensor;
use crate::error::Result;

/// Step size for central differences. With f64 and unit-scale inputs this
/// balances truncation error (O(h²) ≈ 1e-8) against round-off (≈ 1e-12/h).
pub const FD_STEP: f64 = 1e-4;

/// Floor used when turning an absolute gradient difference into a relative
/// one, so near-zero gradients do not blow up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Numerical gradient of `f` with respect to every entry of every input,
/// by central differences with step `h`.
pub fn fd_gradient(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let n = inputs[ti].len();
        let mut g = vec![0.0; n];
        for j in 0..n {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let plus = f(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let minus = f(&work)?;
            work[ti].data_mut()[j] = orig;
            g[j] = (plus - minus) / (2.0 * h);
        }
        grads.push(Tensor::new(inputs[ti].shape().to_vec(), g)?);
    }
    Ok(grads)
}

/// Worst relative disagreement between an analytic and a numeric gradient:
/// max over entries of |a − n| / max(|a|, |n|, floor).
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    debug_assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_hand_derivative_of_quadratic() {
        // f(x) = Σ x², so df/dx = 2x.
        let x = Tensor::new(vec![3], vec![1.0, -0.5, 2.0]).unwrap();
        let mut f = |v: &[Tensor]| Ok(v[0].data().iter().map(|a| a * a).sum());
        let g = fd_gradient(&mut f, &[x.clone()], FD_STEP).unwrap();
        let exact = x.scale(2.0);
        assert!(max_rel_err(&exact, &g[0]) < 1e-7);
    }

    #[test]
    fn fd_leaves_inputs_unchanged() {
        let x = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
        let inputs = [x.clone()];
        let mut f = |v: &[Tensor]| Ok(v[0].data().iter().sum());
        fd_gradient(&mut f, &inputs, FD_STEP).unwrap();
        assert!(inputs[0].bit_eq(&x));
    }

    #[test]
    fn rel_err_uses_floor_near_zero() {
        let a = Tensor::new(vec![1], vec![0.0]).unwrap();
        let n = Tensor::new(vec![1], vec![1e-12]).unwrap();
        // Without the floor this would be 1.0; with it, 1e-12/1e-8 = 1e-4.
        assert!((max_rel_err(&a, &n) - 1e-4).abs() < 1e-15);
    }
}
