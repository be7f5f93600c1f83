use super::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Central-difference derivative of `f` along coordinate `i` of `x`.
pub fn central_difference<F>(f: &mut F, x: &mut Tensor, i: usize, h: f64) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    let orig = x.data()[i];
    x.data_mut()[i] = orig + h;
    let plus = f(x);
    x.data_mut()[i] = orig - h;
    let minus = f(x);
    x.data_mut()[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Largest relative error between `analytic_grad` and central differences of `f` at `x`.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, analytic_grad: &Tensor, h: f64) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    assert_eq!(x.shape(), analytic_grad.shape(), "gradient shape must match input");
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let numeric = central_difference(&mut f, &mut probe, i, h);
            relative_error(analytic_grad.data()[i], numeric)
        })
        .fold(0.0, f64::max)
}
