//! Finite-difference checks of whole model losses.

use autodiff::{finite_difference_check, GradCheckOptions, GradCheckReport, Graph, Parameterized, Var};

use crate::error::Result;

/// Builds the loss once with gradients, then compares every parameter
/// coordinate against central differences.
pub fn check_loss<M, F>(model: &mut M, build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
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
    let mut failure = None;
    let report = finite_difference_check(
        model,
        |m| {
            let mut g = Graph::new(m.params());
            match build(m, &mut g) {
                Ok(l) => g.value(l).data()[0],
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &analytic,
        opts,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Parameter range used for whole-model gradient checks.
pub const GRADCHECK_SCALE: f64 = 1.0;

/// Redraws every parameter from uniform(−scale, scale). Gradient checks run
/// at such a point so that gradients are well above finite-difference
/// round-off.
pub fn randomize_params(ps: &mut autodiff::ParamStore, scale: f64, seed: u64) {
    let mut rng = autodiff::RngStream::new(seed);
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        for v in ps.get_mut(id).data_mut() {
            *v = rng.uniform_range(-scale, scale);
        }
    }
}
