//! Central finite-difference gradient checking.
//!
//! The loss builder is re-run with each probed coordinate displaced by ±h;
//! the analytic gradient must match (f(θ+h) − f(θ−h)) / 2h within
//! `|a − n| ≤ abs_tol + rel_tol·max(|a|, |n|)`.

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::{Real, REAL_IS_F64};

/// Step size for central differences at 64-bit precision.
pub const FD_STEP: Real = 1e-5;

/// Relative tolerance: 1e-5 at 64-bit, relaxed 1e3x at 32-bit.
pub fn rel_tol() -> Real {
    if REAL_IS_F64 {
        1e-5
    } else {
        1e-2
    }
}

/// Absolute floor below which differences are ignored.
pub fn abs_tol() -> Real {
    if REAL_IS_F64 {
        1e-8
    } else {
        1e-5
    }
}

/// One mismatched coordinate.
#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub name: String,
    pub coord: usize,
    pub analytic: Real,
    pub numeric: Real,
}

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: Real,
    pub failures: Vec<GradMismatch>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: Real, n: Real) -> Real {
    (a - n).abs() / (1.0 as Real).max(a.abs()).max(n.abs())
}

/// Checks analytic gradients of `build` against central differences.
///
/// `build` must construct the full forward graph on the given tape and return
/// the scalar loss. `coords_per_param` bounds how many coordinates of each
/// parameter are probed; coordinates are chosen by a deterministic stride so
/// every region of the tensor is exercised. Pass `usize::MAX` to probe all.
pub fn check_gradients(
    store: &mut ParamStore,
    coords_per_param: usize,
    mut build: impl FnMut(&mut Tape, &ParamStore) -> Var,
) -> GradReport {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss);
    let analytic: Vec<(ParamId, Option<Vec<Real>>)> = store
        .ids()
        .map(|id| {
            let mut found = None;
            for (pid, g) in tape.param_grads(&grads) {
                if pid == id {
                    found = Some(g.data().to_vec());
                    break;
                }
            }
            (id, found)
        })
        .collect();
    drop(tape);

    let mut report = GradReport::default();
    for (id, grad) in analytic {
        if !store.trainable(id) {
            continue;
        }
        let numel = store.value(id).numel();
        let probes: Vec<usize> = if coords_per_param >= numel {
            (0..numel).collect()
        } else {
            // deterministic spread over the tensor
            let stride = numel / coords_per_param;
            (0..coords_per_param).map(|i| (i * stride + i * 7919) % numel).collect()
        };
        for coord in probes {
            let orig = store.value(id).data()[coord];
            store.value_mut(id).data_mut()[coord] = orig + FD_STEP;
            let fp = {
                let mut t = Tape::new();
                let l = build(&mut t, store);
                t.value(l).item()
            };
            store.value_mut(id).data_mut()[coord] = orig - FD_STEP;
            let fm = {
                let mut t = Tape::new();
                let l = build(&mut t, store);
                t.value(l).item()
            };
            store.value_mut(id).data_mut()[coord] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = grad.as_ref().map_or(0.0, |g| g[coord]);
            report.checked += 1;
            let re = rel_err(a, numeric);
            if re > report.max_rel_err {
                report.max_rel_err = re;
            }
            if (a - numeric).abs() > abs_tol() + rel_tol() * a.abs().max(numeric.abs()) {
                report.failures.push(GradMismatch {
                    name: store.name(id).to_string(),
                    coord,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::param::Init;
    use crate::tensor::{rng, Tensor};

    #[test]
    fn composite_graph_passes() {
        let mut r = rng::stream(&[42]);
        let mut store = ParamStore::new();
        let w = store.add("w", &[3, 3], Init::Xavier, &mut r);
        let b = store.add("b", &[3], Init::Uniform(0.5), &mut r);
        let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
        let report = check_gradients(&mut store, usize::MAX, |t, s| {
            let xv = t.input(x.clone());
            let wv = t.param(s, w);
            let bv = t.param(s, b);
            let h = t.matmul(xv, wv);
            let h = t.add_row_bias(h, bv);
            let h = t.relu(h);
            let h = t.sigmoid(h);
            t.sum(h)
        });
        assert!(report.ok(), "failures: {:?}", report.failures);
        assert!(report.checked >= 12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(w²) has gradient 2w; a builder that secretly evaluates sum(w)
        // while the tape sees sum(w²) cannot happen, so instead check that a
        // deliberately perturbed analytic value trips the comparator.
        let a: Real = 1.0;
        let n: Real = 1.2;
        assert!((a - n).abs() > abs_tol() + rel_tol() * a.abs().max(n.abs()));
    }
}
