//! Central finite-difference oracle for analytic gradients.

use crate::error::{Error, Result};
use crate::params::ParameterStore;

/// Denominator floor of the relative error, so entries whose true gradient
/// is (near) zero are judged on an absolute scale instead of dividing by ~0.
pub const REL_ERR_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub enum ParamCheck {
    Checked {
        entries: usize,
        max_rel_err: f64,
        worst_entry: usize,
        analytic: f64,
        numeric: f64,
    },
    NotTrainable,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<(String, ParamCheck)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|(_, c)| match c {
                ParamCheck::Checked { max_rel_err, .. } => Some(*max_rel_err),
                ParamCheck::NotTrainable => None,
            })
            .fold(0.0, f64::max)
    }

    pub fn checked_entries(&self) -> usize {
        self.params
            .iter()
            .map(|(_, c)| match c {
                ParamCheck::Checked { entries, .. } => *entries,
                ParamCheck::NotTrainable => 0,
            })
            .sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn worst(&self) -> Option<(&str, &ParamCheck)> {
        self.params
            .iter()
            .filter(|(_, c)| matches!(c, ParamCheck::Checked { .. }))
            .max_by(|a, b| {
                let e = |c: &ParamCheck| match c {
                    ParamCheck::Checked { max_rel_err, .. } => *max_rel_err,
                    ParamCheck::NotTrainable => 0.0,
                };
                e(&a.1).total_cmp(&e(&b.1))
            })
            .map(|(n, c)| (n.as_str(), c))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradients already stored in `params` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every entry of every trainable parameter.
///
/// Parameter values are restored bitwise after each probe.
pub fn finite_diff_check<F>(f: F, params: &mut ParameterStore, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Usage(format!("finite difference step must be positive, got {h}")));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "objective is not deterministic: {first} then {second}"
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let name = params.get(id).name.clone();
        if !params.get(id).trainable {
            report.push((name, ParamCheck::NotTrainable));
            continue;
        }
        let n = params.get(id).value.numel();
        let mut worst = (0.0, 0, 0.0, 0.0);
        for e in 0..n {
            let orig = params.get(id).value.data()[e];
            params.get_mut(id).value.data_mut()[e] = orig + h;
            let plus = f(params);
            params.get_mut(id).value.data_mut()[e] = orig - h;
            let minus = f(params);
            params.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let analytic = params.get(id).grad[e];
            let err = relative_error(analytic, numeric);
            if err > worst.0 || e == 0 {
                worst = (err, e, analytic, numeric);
            }
        }
        report.push((
            name,
            ParamCheck::Checked {
                entries: n,
                max_rel_err: worst.0,
                worst_entry: worst.1,
                analytic: worst.2,
                numeric: worst.3,
            },
        ));
    }
    Ok(GradCheckReport { tol, params: report })
}
