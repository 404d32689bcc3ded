//! Central finite-difference validation of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, ParamGrads, Var};
use crate::params::Parameterized;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    /// `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_err > self.tol)
    }

    /// Worst relative error over the parameters whose name starts with
    /// `prefix`.
    pub fn max_rel_err_for(&self, prefix: &str) -> Option<f64> {
        let mut it = self
            .params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .peekable();
        it.peek()?;
        Some(it.map(|p| p.max_rel_err).fold(0.0, f64::max))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss`, perturbing
/// every parameter coordinate of `model` in place (and restoring it).
pub fn finite_difference_check<M, F>(
    model: &mut M,
    mut loss: F,
    analytic: &ParamGrads,
    opts: GradCheckOptions,
) -> GradCheckReport
where
    M: Parameterized,
    F: FnMut(&M) -> f64,
{
    let ids: Vec<_> = model.params().ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = model.params().get(id).len();
        let stride = match opts.max_coords_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: model.params().name(id).to_string(),
            coords_checked: 0,
            max_rel_err: 0.0,
            worst_coord: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for j in (0..n).step_by(stride) {
            let orig = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = orig + opts.step;
            let up = loss(model);
            model.params_mut().get_mut(id).data_mut()[j] = orig - opts.step;
            let down = loss(model);
            model.params_mut().get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[j]);
            let err = relative_error(a, numeric);
            check.coords_checked += 1;
            if err > check.max_rel_err || check.coords_checked == 1 {
                check.max_rel_err = check.max_rel_err.max(err);
                if err >= check.max_rel_err {
                    check.worst_coord = j;
                    check.worst_analytic = a;
                    check.worst_numeric = numeric;
                }
            }
        }
        params.push(check);
    }
    GradCheckReport {
        tol: opts.tol,
        params,
    }
}

/// Runs `build` once with gradients and then under central differences.
/// `build` must be deterministic (no training-mode dropout).
pub fn check_gradients<M, F>(model: &mut M, build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: for<'a> Fn(&'a M, &mut Graph<'a>) -> Result<Var>,
{
    let analytic = {
        let m: &M = model;
        let mut g = Graph::new(m.params());
        let l = build(m, &mut g)?;
        g.backward(l)?.into_param_grads()
    };
    let eval = |m: &M| -> f64 {
        let mut g = Graph::new(m.params());
        let l = build(m, &mut g).expect("loss rebuild");
        g.value(l).data()[0]
    };
    Ok(finite_difference_check(model, eval, &analytic, opts))
}
