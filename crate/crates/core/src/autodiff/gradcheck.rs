use crate::autodiff::param::{ParamId, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar(tape: &Tape, out: Var) -> Result<f64> {
    let t = tape.value(out);
    if !t.is_scalar() {
        return Err(Error::NotScalar(t.shape().to_vec()));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: "finite_difference_check",
        });
    }
    Ok(v)
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` over compared coordinates.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates left out because every probe switched some ReLU on or off.
    pub skipped_at_kinks: usize,
}

fn probe_value(tape: &Tape, out: Var) -> Result<(f64, Vec<bool>)> {
    Ok((eval_scalar(tape, out)?, tape.relu_pattern()))
}

/// Central differences over `n` coordinates. `eval(i, delta)` evaluates `f` with coordinate `i`
/// moved by `delta` and returns the value plus the ReLU pattern of that evaluation.
fn compare<E>(analytic: &[f64], base_pattern: &[bool], step: f64, skip_kinks: bool, mut eval: E) -> Result<FdReport>
where
    E: FnMut(usize, f64) -> Result<(f64, Vec<bool>)>,
{
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    for (i, &a) in analytic.iter().enumerate() {
        // A probe that switches a ReLU straddles a kink. Shrinking the step usually moves both
        // probes back onto the same linear piece; give up on the coordinate if it does not.
        let mut numeric = None;
        for h in [step, step / 10.0, step / 100.0] {
            let (up, pu) = eval(i, h)?;
            let (down, pd) = eval(i, -h)?;
            if !skip_kinks || (pu == base_pattern && pd == base_pattern) {
                numeric = Some((up - down) / (2.0 * h));
                break;
            }
        }
        match numeric {
            Some(n) => {
                report.max_rel_error = report.max_rel_error.max(relative_error(a, n));
                report.checked += 1;
            }
            None => report.skipped_at_kinks += 1,
        }
    }
    Ok(report)
}

fn check_step(step: f64) -> Result<()> {
    if !(step > 0.0) {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    Ok(())
}

fn input_report<F>(f: F, x: &Tensor, step: f64, skip_kinks: bool) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_step(step)?;
    let mut tape = Tape::new();
    let xv = tape.input(x.clone())?;
    let out = f(&mut tape, xv)?;
    let (_, pattern) = probe_value(&tape, out)?;
    let grads = tape.grad(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    compare(analytic.data(), &pattern, step, skip_kinks, |i, delta| {
        let mut probe = x.clone();
        probe.data_mut()[i] += delta;
        let mut tape = Tape::new();
        let v = tape.input(probe)?;
        let out = f(&mut tape, v)?;
        probe_value(&tape, out)
    })
}

fn param_report<F>(f: F, store: &ParamStore, step: f64, skip_kinks: bool) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_step(step)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &analytic_store)?;
    let (_, pattern) = probe_value(&tape, out)?;
    tape.backward(out, &mut analytic_store)?;

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i)))
        .collect();
    let analytic: Vec<f64> = coords.iter().map(|&(id, i)| analytic_store.grad(id).data()[i]).collect();
    let mut probe = store.clone();
    compare(&analytic, &pattern, step, skip_kinks, |k, delta| {
        let (id, i) = coords[k];
        let orig = store.value(id).data()[i];
        probe.get_mut(id).value.data_mut()[i] = orig + delta;
        let mut tape = Tape::new();
        let r = f(&mut tape, &probe).and_then(|out| probe_value(&tape, out));
        probe.get_mut(id).value.data_mut()[i] = orig;
        r
    })
}

/// Compares the reverse-mode gradient of `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(input_report(f, x, step, false)?.max_rel_error)
}

/// Like [`finite_difference_check`], but perturbs every scalar held in `store`.
///
/// `f` binds whatever parameters it needs from the store it is handed.
pub fn finite_difference_check_params<F>(f: F, store: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    Ok(param_report(f, store, step, false)?.max_rel_error)
}

/// [`finite_difference_check`] that does not compare across a ReLU kink, where a central
/// difference does not estimate the derivative. Such coordinates are re-probed with a smaller
/// step and left out if that still crosses.
pub fn finite_difference_report<F>(f: F, x: &Tensor, step: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    input_report(f, x, step, true)
}

/// [`finite_difference_check_params`] that leaves out coordinates whose probes cross a ReLU kink.
pub fn finite_difference_report_params<F>(f: F, store: &ParamStore, step: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    param_report(f, store, step, true)
}
