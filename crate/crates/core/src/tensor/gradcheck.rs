use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst relative disagreement between the tape gradient of `f` at `x` and
/// central finite differences `(f(x+εe) − f(x−εe)) / 2ε`.
///
/// `f` receives a fresh tape with `x` recorded as a leaf and must return a
/// scalar node. The relative error denominator is `max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |input: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(input.clone());
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Data(format!("non-finite gradient at element {i}")));
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
