//! Central finite-difference gradient checker.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore, Scope};
use crate::error::{Error, Result};
use crate::rng;

/// Minimum coordinates checked per parameter block (all of them when fewer).
pub const COORDS_PER_BLOCK: usize = 64;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_block: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

/// Compares analytic gradients of `loss_fn` with `(f(p+eps) - f(p-eps)) / 2eps`.
///
/// The relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
/// Blocks larger than [`COORDS_PER_BLOCK`] are subsampled with a fixed seed.
pub fn grad_check<F>(params: &ParamStore, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, Scope<'a>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    let grads = {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, Scope::trainable(params))?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, Scope::frozen(store))?;
        Ok(g.scalar(loss))
    };
    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_block: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    for id in params.ids() {
        let n = params.get(id).len();
        let coords = pick_coords(n, id);
        for c in coords {
            let orig = params.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[c]);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst_block = format!("{}[{c}]", params.name(id));
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn pick_coords(n: usize, id: ParamId) -> Vec<usize> {
    if n <= COORDS_PER_BLOCK {
        return (0..n).collect();
    }
    let mut all: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::stream(0x6772_6164, &[id.0 as u64]), &mut all);
    all.truncate(COORDS_PER_BLOCK);
    all.sort_unstable();
    all
}
