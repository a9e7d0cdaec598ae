//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use super::NnError;

/// Builds the graph once to obtain analytic gradients, then perturbs every
/// entry of every input by `+-h` and compares against the central
/// difference. Returns the worst relative error, where the denominator is
/// floored at 1e-6 so near-zero gradients are compared absolutely.
pub fn finite_difference_max_rel_err(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var, NnError>,
) -> Result<f64, NnError> {
    let eval = |tensors: &[Tensor]| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).shape() != (1, 1) {
            return Err(NnError::Invalid("gradient check needs a scalar loss".into()));
        }
        Ok(tape.value(loss).get(0, 0) as f64)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_, _>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input.rows(), input.cols());
        for idx in 0..input.len() {
            let original = work[i].data()[idx];
            work[i].data_mut()[idx] = original + h as Real;
            let up = eval(&work)?;
            work[i].data_mut()[idx] = original - h as Real;
            let down = eval(&work)?;
            work[i].data_mut()[idx] = original;

            let numeric = (up - down) / (2.0 * h);
            let exact = analytic.data()[idx] as f64;
            let denom = numeric.abs().max(exact.abs()).max(1e-6);
            worst = worst.max((numeric - exact).abs() / denom);
        }
    }
    Ok(worst)
}
