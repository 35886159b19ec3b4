use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Coordinates whose one-sided differences disagree, i.e. a kink lies
    /// within `eps` of the point.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn ensure(&self, tol: f64) -> Result<()> {
        if self.max_rel_error < tol {
            Ok(())
        } else {
            Err(Error::GradCheck {
                index: self.worst_index,
                analytic: self.worst_analytic,
                numeric: self.worst_numeric,
            })
        }
    }
}

/// Compares the tape's adjoint of `point` against central differences of the
/// scalar produced by `build`.
pub fn grad_check<T, F>(build: F, point: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-2]")));
    }
    let eval = |t: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let loss = build(&mut tape, x)?;
        Ok(tape.scalar_value(loss).f64())
    };

    let mut tape = Tape::new();
    let x = tape.leaf(&point.clone().with_requires_grad(true));
    let loss = build(&mut tape, x)?;
    let f0 = tape.scalar_value(loss).f64();
    let analytic = tape.backward(loss)?.wrt(x);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + T::lit(eps);
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - T::lit(eps);
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let h = (orig + T::lit(eps)).f64() - (orig - T::lit(eps)).f64();
        let numeric = (up - down) / h;
        let forward = (up - f0) / (h / 2.0);
        let backward = (f0 - down) / (h / 2.0);
        let scale = numeric.abs().max(1.0);
        if (forward - backward).abs() > 1e-2 * scale {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let a = analytic[i].f64();
        let err = (a - numeric).abs() / scale;
        if report.checked == 1 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
