use super::{EngineError, Result, Tape, Tensor, Var};

/// Compares the tape gradient of a scalar function against central
/// differences. Returns `max_i |a_i − n_i| / max(1, |a_i|, |n_i|)`.
///
/// `f` receives a fresh tape and the tracked input, and must return a
/// scalar node.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(EngineError::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let analytic = tape.grad_tensor(input);

    let eval = |probe: Tensor, coordinate: usize| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let out = f(&mut t, v)?;
        let value = t.value(out).item();
        if !value.is_finite() {
            return Err(EngineError::NonFinite { coordinate, value });
        }
        Ok(value)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus, i)? - eval(minus, i)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
