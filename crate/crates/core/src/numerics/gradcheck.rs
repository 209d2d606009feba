use super::{NumericsError, ParamStore, Tape, Var};

/// Gradient magnitudes below this are compared against the floor instead of
/// their own size, so entries whose true gradient is zero do not divide by
/// round-off noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Relative error above which an entry is re-measured with smaller steps.
pub const REFINE_ABOVE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares the analytic gradient of the scalar `f` against central finite
/// differences with step `h`, over every entry of every parameter.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
///
/// An entry whose error exceeds [`REFINE_ABOVE`] is re-measured with steps
/// `10h`, `h/10` and `h/100` and keeps the smallest error. Both failure modes
/// of the numeric side depend on the step: a central difference straddling a
/// ReLU kink is wrong by O(1) until the step shrinks below the distance to the
/// kink, and round-off in `f(x+h) - f(x-h)` swamps tiny gradients of a large
/// loss until the step grows. A wrong analytic gradient disagrees at every
/// step.
pub fn grad_check<F, E>(store: &mut ParamStore, f: F, h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        tape.backward(out)?.into_param_grads()
    };
    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        for i in 0..n {
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            let mut rel = f64::INFINITY;
            for step in [h, 10.0 * h, h / 10.0, h / 100.0] {
                let orig = store.value(id).data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + step;
                let plus = eval(store)?;
                store.get_mut(id).value.data_mut()[i] = orig - step;
                let minus = eval(store)?;
                store.get_mut(id).value.data_mut()[i] = orig;

                let numeric = (plus - minus) / (2.0 * step);
                let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
                rel = rel.min((a - numeric).abs() / denom);
                if rel <= REFINE_ABOVE {
                    break;
                }
            }
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
