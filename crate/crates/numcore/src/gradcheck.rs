//! Central finite-difference checks against [`Tape::backward`].

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::Tape;
use crate::Var;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic gradients of `f` with central differences for every
/// element of the listed parameters.
///
/// `floor` keeps the relative error meaningful for near-zero gradients.
pub fn check_gradients<F>(store: &mut ParamStore, ids: &[ParamId], step: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &'t ParamStore) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.scalar(loss))
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for &id in ids {
        let n = store.get(id).numel();
        let zeros = vec![0.0; n];
        let grad = analytic.get(id).map(<[f64]>::to_vec).unwrap_or(zeros);
        for (i, &g) in grad.iter().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let denom = g.abs().max(numeric.abs()).max(floor);
            let rel = (g - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), i, g, numeric));
            }
        }
    }
    Ok(report)
}
