//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it shares nothing with
//! the reverse pass it checks.

use super::params::{Bound, ParameterSet};
use super::tape::{Tape, Var};
use super::tensor::{Result, Tensor};

/// Worst-case discrepancies between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradReport {
    /// Largest relative error among entries with magnitude >= `small`.
    pub max_rel: f64,
    /// Largest absolute error among entries with magnitude < `small`.
    pub max_abs_small: f64,
    pub checked: usize,
}

impl GradReport {
    pub const SMALL: f64 = 1e-3;

    fn record(&mut self, analytic: f64, numeric: f64) {
        let mag = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if mag >= Self::SMALL {
            self.max_rel = self.max_rel.max(diff / mag);
        } else {
            self.max_abs_small = self.max_abs_small.max(diff);
        }
        self.checked += 1;
    }

    /// Passes when relative error is below `rel_tol` on sizable gradients and
    /// absolute error below `abs_tol` on tiny ones.
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel < rel_tol && self.max_abs_small < abs_tol
    }

    pub fn merge(&mut self, other: GradReport) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs_small = self.max_abs_small.max(other.max_abs_small);
        self.checked += other.checked;
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Check every entry of every input tensor of a scalar function.
pub fn check_inputs<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut report = GradReport::default();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&f, &plus)? - eval(&f, &minus)?) / (2.0 * h);
            report.record(analytic[i], numeric);
        }
    }
    Ok(report)
}

/// Check selected `(identifier, flat index)` entries of a parameter set.
pub fn check_params<F>(
    params: &ParameterSet,
    f: F,
    entries: &[(String, usize)],
    h: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    tape.backward(out)?;
    let value_at = |p: &ParameterSet| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind_frozen(&mut t);
        let o = f(&mut t, &b)?;
        Ok(t.value(o).item())
    };
    let mut report = GradReport::default();
    for (name, idx) in entries {
        let analytic = tape
            .grad(bound.get(name))
            .map(|g| g[*idx])
            .unwrap_or(0.0);
        let mut plus = params.clone();
        plus.get_mut(name).expect("known parameter").data_mut()[*idx] += h;
        let mut minus = params.clone();
        minus.get_mut(name).expect("known parameter").data_mut()[*idx] -= h;
        let numeric = (value_at(&plus)? - value_at(&minus)?) / (2.0 * h);
        report.record(analytic, numeric);
    }
    Ok(report)
}

/// Every `(identifier, index)` pair of a parameter set.
pub fn all_entries(params: &ParameterSet) -> Vec<(String, usize)> {
    params
        .iter()
        .flat_map(|(n, p)| (0..p.value.len()).map(move |i| (n.to_string(), i)))
        .collect()
}
