//! Central finite-difference check of reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{ParamStore, Params};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over leaves and elements of `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
    pub max_rel_error: f64,
    /// Worst relative error per leaf, in argument order.
    pub per_leaf: Vec<f64>,
    /// `(leaf, element)` of the worst entry.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f` at `point` against central
/// differences with the given step.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = point.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &leaves)?;
        let grads = tape.backward(out)?;
        leaves.iter().map(|&l| grads.wrt(l)).collect()
    };

    let eval = |pt: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = pt.iter().map(|t| tape.leaf(t.clone())).collect();
        Ok(f(&tape, &leaves)?.item())
    };

    let mut work: Vec<Tensor> = point.to_vec();
    let mut per_leaf = vec![0.0; point.len()];
    let mut worst = (0, 0);
    let mut max_rel_error: f64 = 0.0;
    for leaf in 0..point.len() {
        for e in 0..point[leaf].len() {
            let orig = point[leaf].data()[e];
            work[leaf].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[leaf].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[leaf].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let rel = relative_error(analytic[leaf].data()[e], fd);
            if rel > per_leaf[leaf] {
                per_leaf[leaf] = rel;
            }
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (leaf, e);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_leaf,
        worst,
    })
}

/// [`grad_check`] over every parameter of `store`, in name order.
pub fn grad_check_store<F>(store: &ParamStore, f: F, step: f64) -> Result<GradCheckReport>
where
    F: for<'t, 's> Fn(&Params<'t, 's>) -> Result<Var<'t>>,
{
    grad_check_store_where(store, |_| true, f, step)
}

/// [`grad_check_store`] over the parameters whose names satisfy `keep`;
/// the rest stay constant.
pub fn grad_check_store_where<F>(
    store: &ParamStore,
    keep: impl Fn(&str) -> bool,
    f: F,
    step: f64,
) -> Result<GradCheckReport>
where
    F: for<'t, 's> Fn(&Params<'t, 's>) -> Result<Var<'t>>,
{
    let (names, point): (Vec<String>, Vec<Tensor>) = store
        .iter()
        .filter(|(n, _)| keep(n))
        .map(|(n, t)| (n.clone(), t.clone()))
        .unzip();
    grad_check(
        |tape, leaves| {
            let p = Params::with_leaves(tape, store, names.iter().cloned().zip(leaves.iter().copied()));
            f(&p)
        },
        &point,
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![0.5, -1.25, 2.0, 3.5]).unwrap();
        let report = grad_check(|_, v| v[0].square()?.sum(), &[x], 1e-5).unwrap();
        assert!(report.passes(1e-8), "{report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // |x| at a kink-free point is fine; a function whose tape ignores a
        // dependency must fail.
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, v| {
                let frozen = tape.leaf(v[0].tensor());
                v[0].mul(frozen)?.sum()
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.4, "{report:?}");
    }
}
