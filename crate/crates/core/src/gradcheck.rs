//! Central finite-difference checks of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// `(f(x + eps) - f(x - eps)) / (2 eps)`, evaluating `f` at the shifted
/// argument through `eval`.
pub fn central_difference(mut eval: impl FnMut(f64) -> Result<f64, TensorError>, eps: f64) -> Result<f64, TensorError> {
    let plus = eval(eps)?;
    let minus = eval(-eps)?;
    Ok((plus - minus) / (2.0 * eps))
}

fn evaluate<T: Scalar, F>(x: &Tensor<T>, f: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone().with_requires_grad(false));
    let out = f(&mut g, v)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(TensorError::NonScalarRoot(value.shape().to_vec()));
    }
    Ok(value.data()[0].to_f64_lossy())
}

/// Max relative error between the analytic gradient of scalar `f` at `x`
/// and central differences, over every coordinate of `x`.
pub fn gradcheck<T: Scalar, F>(x: &Tensor<T>, eps: f64, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var, TensorError>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradcheck_coords(x, eps, &coords, f)
}

/// [`gradcheck`] restricted to the listed coordinates.
pub fn gradcheck_coords<T: Scalar, F>(x: &Tensor<T>, eps: f64, coords: &[usize], f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic: Vec<f64> = match g.grad(v) {
        Some(gr) => gr.iter().map(|v| v.to_f64_lossy()).collect(),
        None => vec![0.0; x.numel()],
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let numeric = central_difference(
            |shift| {
                let mut xp = x.clone();
                let base = xp.data()[i].to_f64_lossy();
                xp.data_mut()[i] = T::from_f64_lossy(base + shift);
                evaluate(&xp, &f)
            },
            eps,
        )?;
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::rng::Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::uniform(&[6], -1.0, 1.0, &mut rng);
        let err = gradcheck(&x, DEFAULT_EPS, |g, v| {
            let s = g.scale(v, 2.5);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn elu_away_from_zero() {
        let x = Tensor::<f64>::from_f64(&[6], &[-2.0, -0.7, -0.1, 0.2, 0.9, 3.0]).unwrap();
        let err = gradcheck(&x, DEFAULT_EPS, |g, v| {
            let a = g.activation(v, Activation::Elu)?;
            let sq = g.mul(a, a)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }
}
