use crate::{Gradients, Network, NnError, Parameterized, Tensor};

/// Relative discrepancy used by every finite-difference comparison in the
/// workspace. Values that are both below `1e-7` in magnitude compare by
/// absolute difference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / scale
}

/// Central finite differences of `loss` with respect to every parameter of
/// `model`, in [`Parameterized`] order.
pub fn numeric_gradients<P, F>(model: &mut P, eps: f64, mut loss: F) -> Gradients
where
    P: Parameterized,
    F: FnMut(&P) -> f64,
{
    let shapes: Vec<Vec<usize>> = model
        .parameters()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (pi, shape) in shapes.iter().enumerate() {
        let mut g = Tensor::zeros(shape);
        for k in 0..g.len() {
            let orig = model.parameters()[pi].data()[k];
            model.parameters_mut()[pi].data_mut()[k] = orig + eps;
            let up = loss(model);
            model.parameters_mut()[pi].data_mut()[k] = orig - eps;
            let down = loss(model);
            model.parameters_mut()[pi].data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Gradients(out)
}

/// Largest [`relative_error`] between two gradient sets.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    analytic
        .0
        .iter()
        .zip(&numeric.0)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Compares backpropagation against central differences for the loss
/// `½‖net(x)‖²` over every parameter.
pub fn grad_check(net: &Network, x: &Tensor, eps: f64) -> Result<f64, NnError> {
    grad_check_with(net, x, eps, |g| g)
}

/// [`grad_check`] with a hook that may alter the analytic gradients before
/// comparison (used for negative controls).
pub fn grad_check_with<F>(net: &Network, x: &Tensor, eps: f64, tamper: F) -> Result<f64, NnError>
where
    F: FnOnce(Gradients) -> Gradients,
{
    if !(eps > 1e-8 && eps < 1e-3) {
        return Err(NnError::Shape(format!("finite-difference step {eps} outside (1e-8, 1e-3)")));
    }
    let y = net.forward(x)?;
    let analytic = tamper(net.backward(x, &y)?);
    let mut probe = net.clone();
    let numeric = numeric_gradients(&mut probe, eps, |n| {
        n.forward(x)
            .map(|y| 0.5 * y.data().iter().map(|v| v * v).sum::<f64>())
            .unwrap_or(f64::NAN)
    });
    Ok(max_relative_error(&analytic, &numeric))
}
