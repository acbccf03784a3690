use super::Tensor;

/// Central-difference gradient of `f` with respect to every coordinate of
/// every tensor in `params`.
pub fn finite_difference_gradient<E>(
    mut f: impl FnMut(&[Tensor]) -> Result<f64, E>,
    params: &[Tensor],
    eps: f64,
) -> Result<Vec<Tensor>, E> {
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Tensor::zeros(params[t].shape());
        for i in 0..params[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Largest elementwise relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn bilinear_product() {
        let g = finite_difference_gradient(
            |p: &[Tensor]| Ok::<_, Infallible>(p[0].data()[0] * p[0].data()[1]),
            &[Tensor::vector(&[2.0, 3.0])],
            1e-5,
        )
        .unwrap();
        assert!((g[0].data()[0] - 3.0).abs() < 1e-8);
        assert!((g[0].data()[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_difference_gradient(
            |_: &[Tensor]| Ok::<_, Infallible>(4.2),
            &[Tensor::vector(&[1.0, -1.0, 0.5])],
            1e-5,
        )
        .unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }
}
