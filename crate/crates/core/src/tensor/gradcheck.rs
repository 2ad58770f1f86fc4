use super::{BackwardFault, Tape, Tensor, TensorError, Var};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + h·e_i) - f(x - h·e_i)) / 2h`, returning the largest
/// relative error over all coordinates of `x`.
pub fn grad_check<G>(f: G, x: &Tensor<f64>, h: f64, fault: Option<BackwardFault>) -> Result<f64, TensorError>
where
    G: Fn(&mut Tape<'_, f64>, Var) -> Result<Var, TensorError>,
{
    let eval = |values: Vec<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.shape().to_vec(), values)?;
        let out = f(&mut tape, xv)?;
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new().with_fault(fault);
    let xv = tape.variable(x.shape().to_vec(), x.values().to_vec())?;
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.values().to_vec();
        plus[i] += h;
        let mut minus = x.values().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}
