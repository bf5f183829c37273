//! Small building blocks shared by the translation and dehazing networks.

use crate::autodiff::Var;
use crate::error::{ensure, Result};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const NORM_EPS: f64 = 1e-5;

pub(crate) fn conv<'g, T: Scalar>(p: &Bound<'g, T>, name: &str, x: Var<'g, T>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    x.conv2d(w, Some(b), stride, pad)
}

/// Stride-2 transposed convolution that exactly doubles the spatial size.
pub(crate) fn upconv<'g, T: Scalar>(p: &Bound<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    x.conv_transpose2d(w, Some(b), 2, 1, 1)
}

pub(crate) fn norm<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    x.instance_norm(T::of(NORM_EPS))
}

/// Rejects non-finite network inputs.
pub(crate) fn check_input<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let dims = x.expect_rank4(what)?;
    ensure!(x.all_finite(), Domain, "{what} contains non-finite values");
    Ok(dims)
}
