//! Central finite differences for checking tape gradients.

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for central differences at double precision.
pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|)`, with a floor on the denominator so that two
/// vanishing gradients compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Builds the graph once on tracked inputs, back-propagates, then compares
/// every input element against central differences of the same graph
/// evaluated on perturbed constants. Returns the worst relative error.
pub fn check_input_gradients(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape<'static>, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);

    let eval = |perturbed: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for (k, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .wrt(var)
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for e in 0..input.len() {
            let numeric = central_difference(
                |v| {
                    let mut perturbed = inputs.to_vec();
                    perturbed[k].data_mut()[e] = v;
                    eval(&perturbed)
                },
                input.data()[e],
                FD_STEP,
            );
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
    }
    worst
}
