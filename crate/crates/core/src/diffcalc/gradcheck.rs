use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Max over checked entries of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries whose central difference straddles a relu kink (or a guard
    /// switch) and therefore have no well-defined derivative to compare.
    pub excluded: usize,
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// Every parameter entry is perturbed by `±step`. An entry is excluded from
/// the maximum when the two perturbed evaluations take different piecewise
/// branches than the unperturbed one (see [`Tape::branch_pattern`]).
/// Gradients in `store` are zero when this returns.
pub fn finite_diff_check<F>(store: &mut ParamStore, step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::contract(format!("finite-difference step {step} outside (0, 1e-2]")));
    }
    let eval = |store: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let loss = build(store, &mut tape)?;
        Ok((tape.value(loss).item(), tape.branch_pattern().to_vec()))
    };

    let mut tape = Tape::new();
    let loss = build(store, &mut tape)?;
    let first = tape.value(loss).item();
    let base_pattern = tape.branch_pattern().to_vec();
    let (second, _) = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    store.zero_grad();
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    store.zero_grad();

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + step;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - step;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let ((fp, pp), (fm, pm)) = (plus?, minus?);
            if pp != base_pattern || pm != base_pattern {
                report.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[id.index()][k];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), k));
                }
            }
        }
    }
    Ok(report)
}
