//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over all entries of `|a - c| / (|a| + |c| + 1e-12)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per parameter (in order) and must
/// return a scalar node. Everything runs in double precision.
pub fn finite_diff_check<G>(f: G, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || eps.is_nan() {
        return Err(Error::Contract(format!("finite difference step {eps} must be positive")));
    }
    let run = |ps: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| tape.input(p.shape().to_vec(), p.data().to_vec(), grad))
            .collect::<Result<_>>()?;
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out)[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(out)?;
        Ok((value, vars.iter().map(|&v| g.wrt(v)).collect()))
    };

    let (_, analytic) = run(params, true)?;
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for p in 0..work.len() {
        for i in 0..work[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let (up, _) = run(&work, false)?;
            work[p].data_mut()[i] = orig - eps;
            let (down, _) = run(&work, false)?;
            work[p].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p][i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((p, i));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
