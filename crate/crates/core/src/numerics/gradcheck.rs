use super::{Matrix, Tape, Var};
use crate::error::{param_err, Error, Result};
use crate::Scalar;

/// Compares tape gradients of `f` against central differences.
///
/// `f` builds a scalar on the tape from the parameter leaves it is handed.
/// Returns `max |analytic − fd| / (|fd| + 1e-12)` over every entry of every
/// parameter. `f` is evaluated twice at the unperturbed point first; any
/// difference means it is not a function of its inputs alone and is
/// reported as a contract error.
pub fn finite_diff_check<'m, T, F>(f: F, params: &[Matrix<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<'m, T>, &[Var]) -> Result<Var>,
{
    if !(eps >= T::of(1e-7) && eps <= T::of(1e-3)) {
        return Err(param_err(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |ps: &[Matrix<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param_owned(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.scalar(out)
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first != second {
        return Err(Error::Contract(format!(
            "function is not deterministic: {first} then {second}"
        )));
    }

    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param_owned(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|v| grads.get(*v).cloned().expect("every parameter has a gradient"))
            .collect::<Vec<_>>()
    };

    let floor = T::of(1e-12);
    let two_eps = eps + eps;
    let mut worst = T::zero();
    let mut probe = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let orig = probe[p].data()[idx];
            probe[p].data_mut()[idx] = orig + eps;
            let up = eval(&probe)?;
            probe[p].data_mut()[idx] = orig - eps;
            let down = eval(&probe)?;
            probe[p].data_mut()[idx] = orig;
            let fd = (up - down) / two_eps;
            let rel = (grad.data()[idx] - fd).abs() / (fd.abs() + floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
