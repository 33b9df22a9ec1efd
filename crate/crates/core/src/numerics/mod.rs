//! Dense tensors, a gradient tape over a fixed op set, and a central
//! finite-difference oracle for checking it.

mod tape;
mod tensor;

pub use tape::{gelu_scalar, GradTape, GradientMap, Var, DEFAULT_LAYER_NORM_EPS};
pub use tensor::{relative_error, Tensor};

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_difference_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}
