use super::{Element, Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-8)`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, h: f64) -> Result<f64, TensorError>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    let value = tape.value(y).item()?;
    if !value.is_finite() {
        return Err(TensorError::NonFinite {
            context: "function value at the check point".into(),
        });
    }
    tape.backward(y)?;
    let analytic = tape.grad(x).expect("leaf requires grad").clone();

    let eval = |p: Tensor<T>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item()?.to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                context: "function value at a perturbed point".into(),
            });
        }
        Ok(v)
    };

    let step = T::from_f64_lossy(h);
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i].to_f64().unwrap_or(f64::NAN);
        if !a.is_finite() {
            return Err(TensorError::NonFinite {
                context: format!("analytic gradient at coordinate {i}"),
            });
        }
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_checks_exactly() {
        let p = Tensor::<f64>::new([4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = grad_check(|t, x| t.sum(x), &p, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_on_four_logits() {
        let p = Tensor::<f64>::new([4], vec![0.5, -0.25, 1.5, 0.1]).unwrap();
        let err = grad_check(|t, x| t.cross_entropy(x, &[2]), &p, 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        // y = sum(x²) with a vjp that forgets the factor 2.
        let p = Tensor::<f64>::new([3], vec![0.7, -0.4, 1.1]).unwrap();
        let err = grad_check(
            |t, x| {
                let v = t.value(x);
                let sq = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * a).collect())?;
                let y = t.custom(
                    &[x],
                    sq,
                    Box::new(|inputs, _out, g| {
                        let data = inputs[0].data().iter().zip(g.data()).map(|(a, gi)| a * gi).collect();
                        vec![Tensor::new(inputs[0].shape().to_vec(), data).unwrap()]
                    }),
                );
                t.sum(y)
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn rejects_non_positive_step_and_non_finite_values() {
        let p = Tensor::<f64>::new([1], vec![1.0]).unwrap();
        assert!(grad_check(|t, x| t.sum(x), &p, 0.0).is_err());
        let bad = Tensor::<f64>::new([1], vec![f64::NAN]).unwrap();
        assert!(matches!(
            grad_check(|t, x| t.sum(x), &bad, 1e-3),
            Err(TensorError::NonFinite { .. })
        ));
    }
}
