//! Finite-difference gradient checking. The tape gradient of a scalar loss is
//! compared against central differences (f(p+h) - f(p-h)) / 2h, one sampled
//! parameter coordinate at a time, and the worst relative error is reported.

use super::{lit, Scalar, Tape, ValueId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Coordinates with both gradients below this magnitude compare in absolute
/// terms; everything larger compares relative to the dominant gradient.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CoordCheck<T> {
    pub param: String,
    pub index: usize,
    pub analytic: T,
    pub numeric: T,
    pub rel_err: T,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    pub loss: T,
    pub checks: Vec<CoordCheck<T>>,
    pub max_rel_err: T,
}

impl<T: Scalar> GradCheckReport<T> {
    pub fn passed(&self, tol: T) -> bool {
        self.max_rel_err < tol
    }

    /// The coordinate with the largest relative error, if any were checked.
    pub fn worst(&self) -> Option<&CoordCheck<T>> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).expect("finite rel errors"))
    }
}

/// Samples `n` parameter coordinates, cycling through parameters grouped by
/// top-level name prefix so every module contributes coordinates even when
/// tensor sizes are wildly unbalanced.
pub fn sample_coords<T: Scalar>(
    params: &ParamStore<T>,
    n: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for i in 0..params.len() {
        let name = params.name(crate::params::ParamId(i));
        let prefix = name.split('.').next().unwrap_or(name).to_string();
        match groups.iter_mut().find(|(p, _)| *p == prefix) {
            Some((_, ids)) => ids.push(i),
            None => groups.push((prefix, vec![i])),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rounds = vec![0usize; groups.len()];
    let mut coords = Vec::with_capacity(n);
    for draw in 0..n {
        let gi = draw % groups.len();
        let ids = &groups[gi].1;
        let pi = ids[rounds[gi] % ids.len()];
        rounds[gi] += 1;
        let numel = params.get(crate::params::ParamId(pi)).numel();
        coords.push((pi, rng.gen_range(0..numel)));
    }
    coords
}

/// `forward` rebuilds the computation on a fresh tape from the current
/// parameter values and returns the scalar loss id plus the bound parameter
/// ids in store order. It is invoked once with gradients enabled and then
/// twice per coordinate for the two-sided probes.
pub fn grad_check<T, F>(
    params: &mut ParamStore<T>,
    mut forward: F,
    coords: &[(usize, usize)],
    h: T,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>, &mut Tape<T>, bool) -> Result<(ValueId, Vec<ValueId>)>,
{
    let mut tape = Tape::new();
    let (loss_id, bound) = forward(params, &mut tape, true)?;
    let loss = tape.value(loss_id)[0];
    if !loss.is_finite() {
        return Err(Error::numeric(format!("gradient check aborted: loss is {loss}")));
    }
    tape.backward(loss_id)?;
    let analytic_all = params.collect_grads(&tape, &bound)?;
    drop(tape);

    let mut eval = |params: &ParamStore<T>, what: &str| -> Result<T> {
        let mut tape = Tape::new();
        let (loss_id, _) = forward(params, &mut tape, false)?;
        let v = tape.value(loss_id)[0];
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "gradient check aborted: {what} probe produced {v}"
            )));
        }
        Ok(v)
    };

    let mut checks = Vec::with_capacity(coords.len());
    let mut max_rel_err = T::zero();
    for &(pi, idx) in coords {
        let id = crate::params::ParamId(pi);
        let numel = params.get(id).numel();
        if idx >= numel {
            return Err(Error::config(format!(
                "gradient check: coordinate {idx} out of range for {} ({numel} elements)",
                params.name(id)
            )));
        }
        let original = params.get(id).data()[idx];
        params.get_mut(id).data_mut()[idx] = original + h;
        let f_plus = eval(params, "plus")?;
        params.get_mut(id).data_mut()[idx] = original - h;
        let f_minus = eval(params, "minus")?;
        params.get_mut(id).data_mut()[idx] = original;

        let numeric = (f_plus - f_minus) / (lit::<T>(2.0) * h);
        let analytic = analytic_all[pi][idx];
        let denom = analytic.abs().max(numeric.abs()).max(lit::<T>(REL_FLOOR));
        let rel_err = (analytic - numeric).abs() / denom;
        if rel_err > max_rel_err {
            max_rel_err = rel_err;
        }
        checks.push(CoordCheck {
            param: params.name(id).to_string(),
            index: idx,
            analytic,
            numeric,
            rel_err,
        });
    }

    Ok(GradCheckReport { loss, checks, max_rel_err })
}
