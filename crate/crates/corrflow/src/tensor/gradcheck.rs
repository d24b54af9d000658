//! Central finite-difference gradient checker.
//!
//! Always run this in f64; finite differences drown in f32 rounding.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the analytic gradient of a scalar-valued function against
/// central finite differences (f(p+h) - f(p-h)) / 2h per entry.
///
/// `eval(point, want_grad)` returns the function value and, when
/// `want_grad`, the full gradient at `point`. Relative error uses the
/// denominator max(|analytic|, |numeric|, 1e-8). `subset` restricts
/// which entries are perturbed (the analytic gradient is still taken
/// in full).
pub fn finite_difference_check<F>(
    eval: &mut F,
    point: &[f64],
    h: f64,
    subset: Option<&[usize]>,
) -> Result<FdReport>
where
    F: FnMut(&[f64], bool) -> Result<(f64, Option<Vec<f64>>)>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite_difference_check: h must be positive"));
    }
    let (f0, grad) = eval(point, true)?;
    if !f0.is_finite() {
        return Err(Error::numeric("finite_difference_check: non-finite value at base point"));
    }
    let grad = grad.ok_or_else(|| {
        Error::contract("finite_difference_check: eval returned no gradient")
    })?;
    if grad.len() != point.len() {
        return Err(Error::contract(format!(
            "finite_difference_check: gradient has {} entries for {} parameters",
            grad.len(),
            point.len()
        )));
    }

    let all: Vec<usize>;
    let indices = match subset {
        Some(s) => s,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut p = point.to_vec();
    for &i in indices {
        p[i] = point[i] + h;
        let (fp, _) = eval(&p, false)?;
        p[i] = point[i] - h;
        let (fm, _) = eval(&p, false)?;
        p[i] = point[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(format!(
                "finite_difference_check: non-finite value while perturbing entry {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
