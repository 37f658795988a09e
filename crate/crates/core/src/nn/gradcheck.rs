//! Finite-difference verification of tape gradients.
//!
//! `check` evaluates a scalar-valued graph builder twice per probed
//! element (central differences) and compares against the analytic
//! gradient from `Tape::backward`. The builder must be deterministic:
//! calling it twice on identical parameters must produce identical losses.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

/// Result of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest relative error seen across all probed elements.
    pub max_rel_err: f64,
    /// Number of elements probed.
    pub checked: usize,
}

/// Compare analytic and numeric gradients for `ids`.
///
/// At most `max_per_param` evenly spaced elements are probed per
/// parameter. `eps` scales the central-difference step per element.
pub fn check(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    max_per_param: usize,
    f: impl Fn(&Tape) -> Var,
) -> GradCheckReport {
    let analytic = {
        let tape = Tape::new(store);
        let loss = f(&tape);
        assert_eq!(tape.value(loss).len(), 1, "gradcheck needs a scalar loss");
        tape.backward(loss)
    };

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    for &id in ids {
        let n = store.value(id).len();
        let ga = analytic
            .get(id)
            .unwrap_or_else(|| panic!("no gradient for {}", store.name(id)))
            .clone();
        let stride = (n / max_per_param).max(1);
        let mut flat = 0usize;
        while flat < n {
            let orig = store.value(id).as_slice().expect("standard layout")[flat];
            let h = eps * orig.abs().max(1.0);

            store.value_mut(id).as_slice_mut().expect("standard layout")[flat] = orig + h;
            let up = eval(store, &f);
            store.value_mut(id).as_slice_mut().expect("standard layout")[flat] = orig - h;
            let down = eval(store, &f);
            store.value_mut(id).as_slice_mut().expect("standard layout")[flat] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = ga.as_slice().expect("standard layout")[flat];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
            flat += stride;
        }
    }
    GradCheckReport {
        max_rel_err,
        checked,
    }
}

fn eval(store: &ParamStore, f: &impl Fn(&Tape) -> Var) -> f64 {
    let tape = Tape::new(store);
    let loss = f(&tape);
    tape.scalar(loss)
}
