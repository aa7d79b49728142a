//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;
use std::fmt;

use crate::autodiff::{self, Graph, NamedTensors, Var};
use crate::error::Result;
use crate::rng::RngStream;

/// Entries sampled per tensor.
pub const MAX_ENTRIES: usize = 32;

// Denominator floor for the relative error of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub h: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tol)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            let verdict = if t.max_rel_err < self.tol { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<48} n={:<3} max_rel={:.3e} max_abs={:.3e} {verdict}",
                t.name, t.checked, t.max_rel_err, t.max_abs_err
            )?;
        }
        write!(
            f,
            "gradient check {} (tol {:.1e}, h {:.1e}, {} tensors)",
            if self.passed() { "PASSED" } else { "FAILED" },
            self.tol,
            self.h,
            self.tensors.len()
        )
    }
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients against central differences on up to
/// [`MAX_ENTRIES`] entries per tensor, chosen by a stream seeded with `seed`.
pub fn check_gradients<F>(params: &NamedTensors, loss_fn: F, h: f64, tol: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let (_, analytic) = autodiff::grad(params, &loss_fn)?;
    let root = RngStream::new(seed);
    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, tensor) in params {
        let n = tensor.len();
        let mut idx: Vec<usize> = (0..n).collect();
        if n > MAX_ENTRIES {
            root.split(name).shuffle(&mut idx);
            idx.truncate(MAX_ENTRIES);
            idx.sort_unstable();
        }
        let mut check = TensorCheck {
            name: name.clone(),
            checked: idx.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in idx {
            let orig = tensor.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = autodiff::eval_loss(&work, &loss_fn)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = autodiff::eval_loss(&work, &loss_fn)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[name].data()[i];
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tol, h, tensors })
}
