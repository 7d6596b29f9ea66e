//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), out)
}

/// `max |analytic − numeric| / max(1, |analytic|)` over all elements.
pub fn rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    rel_error_slices(analytic.data(), numeric.data())
}

pub fn rel_error_slices(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let e = (a - n).abs() / a.abs().max(1.0);
            if e.is_nan() {
                f64::INFINITY
            } else {
                e
            }
        })
        .fold(0.0, f64::max)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every listed parameter. The parameters are made trainable on a private
/// copy of `store`. Returns the worst relative error.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    ids: &[ParamId],
    h: f64,
    fault: Option<OpKind>,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut live = store.clone();
    live.zero_grads();
    for &id in ids {
        live.set_trainable(id, true);
    }
    let mut tape = Tape::with_fault(fault);
    let loss = f(&mut tape, &live)?;
    tape.backward_into(loss, &mut live)?;

    let mut probe = live.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let zeros = vec![0.0; live.get(id).numel()];
        let analytic = live.get(id).grad().map_or(zeros, <[f64]>::to_vec);
        let base = live.get(id).clone();
        let numeric = finite_diff_grad(
            |w| {
                probe.get_mut(id).data_mut().copy_from_slice(w.data());
                let mut t = Tape::new();
                f(&mut t, &probe).map_or(f64::NAN, |l| t.value(l).item())
            },
            &base,
            h,
        )?;
        probe.get_mut(id).data_mut().copy_from_slice(base.data());
        worst = worst.max(rel_error_slices(&analytic, numeric.data()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, -7.5]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.item() * t.item(), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|t| t.item(), &x, 0.0).is_err());
    }

    #[test]
    fn nan_counts_as_failure() {
        assert!(rel_error_slices(&[f64::NAN], &[0.0]).is_infinite());
        assert_eq!(rel_error_slices(&[2.0], &[2.0]), 0.0);
        assert!((rel_error_slices(&[0.5], &[0.4]) - 0.1).abs() < 1e-12);
    }
}
