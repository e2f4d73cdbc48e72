use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function of one tensor:
/// `(f(x + ε·eᵢ) − f(x − ε·eᵢ)) / 2ε` for every element `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}
