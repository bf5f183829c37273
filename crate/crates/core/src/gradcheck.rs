//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Near the f64 optimum for central differences (about ε^(1/3)); at 1e-6
/// round-off in the loss (~ε·|L|/h) already reaches 1e-9.
pub const STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding do not produce spurious failures.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Name and index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((name.to_string(), index));
        }
    }
}

fn indices(rng: &mut ChaCha8Rng, len: usize, per_tensor: usize) -> Vec<usize> {
    if len <= per_tensor {
        (0..len).collect()
    } else {
        (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Compares parameter gradients of `loss` against central differences on up
/// to `per_tensor` coordinates of every parameter tensor.
pub fn check_params<F>(params: &ParamSet<f64>, per_tensor: usize, seed: u64, loss: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>>,
{
    let analytic = {
        let g = Graph::new();
        let bound = params.bind(&g, true);
        let l = loss(&g, &bound)?;
        let grads = g.backward(l)?;
        bound.gradients(&grads)
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let g = Graph::no_grad();
        let bound = p.bind(&g, false);
        Ok(loss(&g, &bound)?.value().data()[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name)?.len();
        for i in indices(&mut rng, len, per_tensor) {
            let orig = params.get(&name)?.data()[i];
            work.get_mut(&name).expect("present").data_mut()[i] = orig + STEP;
            let up = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig - STEP;
            let down = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            report.record(&name, i, analytic.get(&name)?.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Compares the gradient of `loss` with respect to `input` against central
/// differences on every coordinate.
pub fn check_input<F>(input: &Tensor<f64>, loss: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let analytic = {
        let g = Graph::new();
        let x = g.param(input.clone());
        let l = loss(&g, x)?;
        g.backward(l)?.get_or_zeros(x)
    };
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let g = Graph::no_grad();
        let x = g.constant(t.clone());
        Ok(loss(&g, x)?.value().data()[0])
    };
    let mut report = GradCheckReport::default();
    let mut work = input.clone();
    for i in 0..input.len() {
        let orig = input.data()[i];
        work.data_mut()[i] = orig + STEP;
        let up = eval(&work)?;
        work.data_mut()[i] = orig - STEP;
        let down = eval(&work)?;
        work.data_mut()[i] = orig;
        report.record("input", i, analytic.data()[i], (up - down) / (2.0 * STEP));
    }
    Ok(report)
}
