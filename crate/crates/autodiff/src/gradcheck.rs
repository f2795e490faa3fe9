//! Central finite differences, used as an independent oracle for the tape.

use ndarray::Array2;

use crate::tape::{Tape, Var};

/// Relative error with an absolute floor in the denominator so that
/// vanishing gradients are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference `(f(x+h) − f(x−h)) / 2h` for every entry of `x`.
pub fn numerical_gradient(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for (idx, g) in grad.indexed_iter_mut() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe);
        probe[idx] = orig - h;
        let down = f(&probe);
        probe[idx] = orig;
        *g = (up - down) / (2.0 * h);
    }
    grad
}

/// Outcome of comparing tape gradients with finite differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Checks `d build(x) / dx` for a function built on a fresh tape.
///
/// `build` receives the tape and a parameter leaf holding `x`, and returns a
/// `1×1` output.
pub fn check_gradient(
    x: &Array2<f64>,
    h: f64,
    floor: f64,
    build: impl Fn(&mut Tape, Var) -> Var,
) -> GradCheck {
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = build(&mut tape, input);
    let grads = tape.backward(out);
    let analytic = grads.get(input).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
    let numeric = numerical_gradient(x, h, |probe| {
        let mut t = Tape::inference();
        let input = t.constant(probe.clone());
        let out = build(&mut t, input);
        t.scalar(out)
    });
    compare(&analytic, &numeric, floor)
}

pub fn compare(analytic: &Array2<f64>, numeric: &Array2<f64>, floor: f64) -> GradCheck {
    assert_eq!(analytic.dim(), numeric.dim());
    let mut out = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        out.max_rel_err = out.max_rel_err.max(relative_error(*a, *n, floor));
        out.max_abs_err = out.max_abs_err.max((a - n).abs());
        out.checked += 1;
    }
    out
}
