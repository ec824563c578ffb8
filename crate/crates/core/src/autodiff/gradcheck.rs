use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tape::{OpKind, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Gradient magnitude below which errors are measured absolutely:
    /// `rel = |a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Negates one backward rule (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let out = f(&mut tape, store)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares tape gradients of the scalar `f` with central differences over
/// every entry of every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_fault(kind);
    }
    let loss = f(&mut tape, store)?;
    if !tape.value(loss).item()?.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let analytic = tape.backward(loss)?;

    let mut work = store.clone();
    let mut params = Vec::new();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.value(&name)?.len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..n {
            let orig = store.value(&name)?.data()[k];
            work.value_mut(&name)?.data_mut()[k] = orig + opts.step;
            let plus = eval(&f, &work)?;
            work.value_mut(&name)?.data_mut()[k] = orig - opts.step;
            let minus = eval(&f, &work)?;
            work.value_mut(&name)?.data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[k]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        params.push(ParamCheck {
            name,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = params.iter().fold(0.0, |m: f64, p| m.max(p.max_rel_error));
    Ok(GradCheckReport {
        passed: max_rel_error < opts.tolerance,
        params,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn constant_function_passes() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(2, 2, 0.3));
        let report = grad_check(
            &store,
            |t, _| t.constant(Tensor::scalar(4.2)),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.params[0].max_abs_error < 1e-8);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        let res = grad_check(
            &store,
            |t, s| {
                let w = t.param(s, "w")?;
                let big = t.scale(w, 1e3)?;
                t.exp(big)
            },
            &GradCheckOptions::default(),
        );
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }
}
