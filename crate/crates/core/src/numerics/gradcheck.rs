use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::params::ParameterStore;
use super::rng::RngStream;
use super::tape::{Tape, Var};

/// Relative errors below this denominator are measured against it instead, so that
/// a gradient of exactly zero compared with round-off noise still passes.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per checked parameter.
    pub max_rel_err: BTreeMap<String, f64>,
    pub elements_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<(&String, f64)> {
        self.max_rel_err
            .iter()
            .map(|(n, &e)| (n, e))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare reverse-mode gradients of the scalar `f` against central differences
/// `(f(θ + eps) - f(θ - eps)) / 2 eps` for every element of every trainable parameter.
pub fn finite_diff_check<F>(f: F, store: &ParameterStore, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    finite_diff_check_sampled(f, store, eps, tol, None)
}

/// As [`finite_diff_check`], but checks at most `max_per_param` randomly chosen
/// elements of each parameter.
pub fn finite_diff_check_sampled<F>(
    f: F,
    store: &ParameterStore,
    eps: f64,
    tol: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::BadSpec(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = f(&mut tape, s)?;
        tape.value(v).item()
    };

    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = tape.value(loss).item()?;
    let grads = tape.backward(loss, store)?;

    let again = eval(store)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministicFunction {
            first: base,
            second: again,
        });
    }

    let mut work = store.clone();
    let mut rng = RngStream::new(store.rng_seed, "gradcheck");
    let mut report = GradCheckReport {
        max_rel_err: BTreeMap::new(),
        elements_checked: 0,
        tol,
        passed: true,
    };
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.requires_grad)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let n = store.value(&name)?.numel();
        let indices: Vec<usize> = match max_per_param {
            Some(m) if m < n => (0..m).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        let g = grads[&name].data();
        let mut worst: f64 = 0.0;
        for i in indices {
            let orig = work.value(&name)?.data()[i];
            work.value_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.value_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.value_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(g[i], numeric));
            report.elements_checked += 1;
        }
        if worst > tol {
            report.passed = false;
        }
        report.max_rel_err.insert(name, worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn sum_of_squares_is_exact_to_1e8() {
        let mut s = ParameterStore::new(1);
        s.insert("p", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let r = finite_diff_check(
            |t, s| {
                let p = t.param(s, "p")?;
                let sq = t.mul(p, p)?;
                Ok(t.sum(sq))
            },
            &s,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.max_rel_err);
    }

    #[test]
    fn dead_parameter_passes() {
        let mut s = ParameterStore::new(1);
        s.insert("p", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        s.insert("dead", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let r = finite_diff_check(
            |t, s| {
                let p = t.param(s, "p")?;
                Ok(t.sum(p))
            },
            &s,
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.max_rel_err["dead"], 0.0);
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let s = ParameterStore::new(1);
        let r = finite_diff_check(|t, _| Ok(t.constant(Tensor::scalar(0.0))), &s, 1e-2, 1e-4);
        assert!(r.is_err());
    }

    #[test]
    fn nondeterministic_function_is_detected() {
        use std::cell::Cell;
        let mut s = ParameterStore::new(1);
        s.insert("p", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
        let calls = Cell::new(0.0);
        let r = finite_diff_check(
            |t, s| {
                calls.set(calls.get() + 1.0);
                let p = t.param(s, "p")?;
                let c = t.constant(Tensor::new(&[1], vec![calls.get()]).unwrap());
                let y = t.mul(p, c)?;
                Ok(t.sum(y))
            },
            &s,
            1e-5,
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonDeterministicFunction { .. })));
    }
}
