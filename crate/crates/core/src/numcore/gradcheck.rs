//! Central finite differences, used as an independent oracle for gradients.

use super::tensor::Tensor;

/// Central-difference gradient of `f` with respect to each tensor in `at`.
pub fn central_differences(mut f: impl FnMut(&[Tensor]) -> f64, at: &[Tensor], step: f64) -> Vec<Tensor> {
    let mut point: Vec<Tensor> = at.to_vec();
    let mut grads = Vec::with_capacity(at.len());
    for t in 0..at.len() {
        let mut g = Tensor::zeros(at[t].shape());
        for i in 0..at[t].numel() {
            let orig = point[t].data()[i];
            point[t].data_mut()[i] = orig + step;
            let up = f(&point);
            point[t].data_mut()[i] = orig - step;
            let down = f(&point);
            point[t].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let g = central_differences(|p| p[0].data().iter().map(|v| v * v).sum(), &[x], 1e-5);
        assert!(relative_error(g[0].data(), &[2.0, -4.0]) < 1e-9);
    }
}
