use super::{Graph, Result, Tensor, Var};

/// Central-difference gradient of a scalar function of a flat vector.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Compare the reverse-mode gradient of `f` at `x` with central differences.
///
/// Returns `max_i |a_i − n_i| / (|a_i| + |n_i| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(h > 0.0, "step must be positive");
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |p: &[f64]| -> f64 {
        let mut g = Graph::new();
        let t = Tensor::new(x.shape(), p.to_vec()).expect("same shape");
        let v = g.constant(t);
        match f(&mut g, v) {
            Ok(l) => g.value(l).item(),
            Err(_) => f64::NAN,
        }
    };
    let numeric = central_difference(eval, x.data(), h);

    Ok(analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + 1e-8))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let mut rng = SeededRng::new(0, 0);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let err = finite_difference_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                let s = g.scale(sq, 0.5)?;
                g.sum(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec(vec![1.0, -2.0]);
        let err = finite_difference_check(
            |g, v| {
                let z = g.scale(v, 0.0)?;
                g.sum(z)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn central_difference_on_closure() {
        let grads = central_difference(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, 5.0], 1e-5);
        assert!((grads[0] - 4.0).abs() < 1e-8);
        assert!((grads[1] - 3.0).abs() < 1e-8);
    }
}
