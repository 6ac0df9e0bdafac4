//! Central-difference verification of the end-to-end training gradient.
//!
//! The check perturbs single parameter coordinates of the full scene loss
//! and compares (l(p+h) - l(p-h)) / 2h against the tape's gradient, all in
//! f64. Coordinates are drawn round-robin over the top-level parameter
//! groups (bu, td, tok, enc, head) so even a small sample probes every
//! stage of the network.

use crate::data::scene::{generate_scene, SceneSpec};
use crate::data::skeleton::Skeleton;
use crate::error::Result;
use crate::model::{init_params, Bound, BuMode, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tape;
use crate::train::{batch_loss, prepare_scene, PreparedScene};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest error, as "name[index]".
    pub worst: Option<String>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked == 0 || self.max_rel_err < self.tolerance
    }
}

/// Draws `n` (parameter, flat index) coordinates, cycling over the groups
/// named by the segment before the first dot.
pub fn sample_coords(params: &ParamStore<f64>, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for pi in 0..params.len() {
        let name = params.name(ParamId(pi));
        let group = name.split('.').next().unwrap_or(name);
        groups.entry(group).or_default().push(pi);
    }
    let groups: Vec<&Vec<usize>> = groups.values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let members = groups[i % groups.len()];
            let pi = members[rng.gen_range(0..members.len())];
            let len = params.get(ParamId(pi)).numel();
            (pi, rng.gen_range(0..len))
        })
        .collect()
}

/// Compares `analytic` against central differences of `loss` at `coords`.
/// The relative error denominator is floored at 1e-6 so difference noise on
/// near-zero gradients cannot fail the check.
pub fn grad_check_core(
    params: &mut ParamStore<f64>,
    analytic: &[Vec<f64>],
    coords: &[(usize, usize)],
    h: f64,
    loss: &mut dyn FnMut(&ParamStore<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    for &(pi, j) in coords {
        let orig = params.get(ParamId(pi)).data()[j];
        params.get_mut(ParamId(pi)).data_mut()[j] = orig + h;
        let lp = loss(params)?;
        params.get_mut(ParamId(pi)).data_mut()[j] = orig - h;
        let lm = loss(params)?;
        params.get_mut(ParamId(pi)).data_mut()[j] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let g = analytic[pi][j];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = Some(format!("{}[{j}]", params.name(ParamId(pi))));
        }
    }
    Ok(GradCheckReport { checked: coords.len(), max_rel_err, worst, tolerance: TOLERANCE })
}

/// Builds a two-scene synthetic batch and the model's f64 loss, then runs
/// the coordinate check over `samples` draws.
pub fn grad_check_model(cfg: &ModelConfig, samples: usize, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let skel = Skeleton::coco17();
    let spec = SceneSpec::default();
    let scenes: Vec<PreparedScene<f64>> = (0..2)
        .map(|i| {
            let gs = generate_scene(&spec, &skel, seed.wrapping_add(i))?;
            prepare_scene(cfg, &gs.image.to_tensor::<f64>(), &gs.instances)
        })
        .collect::<Result<_>>()?;
    let mut params = init_params::<f64>(cfg, seed)?;

    let analytic = {
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape, true);
        let bound = Bound::new(&params, &ids);
        let loss = batch_loss(&mut tape, &bound, cfg, &scenes, BuMode::Full)?;
        tape.backward(loss)?;
        params.collect_grads(&tape, &ids)?
    };

    let coords = sample_coords(&params, samples, seed ^ 0x5EED);
    let mut eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = p.bind(&mut tape, false);
        let bound = Bound::new(p, &ids);
        let loss = batch_loss(&mut tape, &bound, cfg, &scenes, BuMode::Full)?;
        Ok(tape.value(loss)[0])
    };
    grad_check_core(&mut params, &analytic, &coords, STEP, &mut eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let cfg = ModelConfig::preset("dpit-tiny").unwrap();
        let report = grad_check_model(&cfg, 12, 0).unwrap();
        assert_eq!(report.checked, 12);
        assert!(report.passed(), "max rel err {} at {:?}", report.max_rel_err, report.worst);
    }

    #[test]
    fn zero_samples_pass_vacuously() {
        let cfg = ModelConfig::preset("dpit-tiny").unwrap();
        let report = grad_check_model(&cfg, 0, 0).unwrap();
        assert_eq!(report.checked, 0);
        assert!(report.passed());
        assert!(report.worst.is_none());
    }

    #[test]
    fn sampling_cycles_through_every_parameter_group() {
        let cfg = ModelConfig::preset("dpit-tiny").unwrap();
        let params = init_params::<f64>(&cfg, 3).unwrap();
        let coords = sample_coords(&params, 10, 9);
        let groups: BTreeSet<&str> = coords
            .iter()
            .map(|&(pi, _)| params.name(ParamId(pi)).split('.').next().unwrap())
            .collect();
        let want: BTreeSet<&str> = ["bu", "td", "tok", "enc", "head"].into();
        assert_eq!(groups, want);
        for &(pi, j) in &coords {
            assert!(j < params.get(ParamId(pi)).numel());
        }
    }

    #[test]
    fn a_corrupted_gradient_is_caught() {
        // Same construction as grad_check_model, but one analytic entry is
        // scaled by 1.5 before the comparison.
        let cfg = ModelConfig::preset("dpit-tiny").unwrap();
        let skel = Skeleton::coco17();
        let gs = generate_scene(&SceneSpec::default(), &skel, 4).unwrap();
        let scenes =
            vec![prepare_scene(&cfg, &gs.image.to_tensor::<f64>(), &gs.instances).unwrap()];
        let mut params = init_params::<f64>(&cfg, 4).unwrap();
        let mut analytic = {
            let mut tape = Tape::new();
            let ids = params.bind(&mut tape, true);
            let bound = Bound::new(&params, &ids);
            let loss = batch_loss(&mut tape, &bound, &cfg, &scenes, BuMode::Full).unwrap();
            tape.backward(loss).unwrap();
            params.collect_grads(&tape, &ids).unwrap()
        };
        // The largest-magnitude coordinate is far above the error floor, so
        // a 1.5x corruption must show a relative error near 1/3.
        let (pi, j, _) = analytic
            .iter()
            .enumerate()
            .flat_map(|(pi, g)| g.iter().enumerate().map(move |(j, &v)| (pi, j, v.abs())))
            .max_by(|a, b| a.2.total_cmp(&b.2))
            .unwrap();
        analytic[pi][j] *= 1.5;
        let mut eval = |p: &ParamStore<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let ids = p.bind(&mut tape, false);
            let bound = Bound::new(p, &ids);
            let loss = batch_loss(&mut tape, &bound, &cfg, &scenes, BuMode::Full)?;
            Ok(tape.value(loss)[0])
        };
        let report = grad_check_core(&mut params, &analytic, &[(pi, j)], STEP, &mut eval).unwrap();
        assert!(!report.passed(), "corruption slipped through: {report:?}");
        assert!(report.max_rel_err > 0.2);
    }
}
