//! Adam optimizer and the stepped learning-rate schedule.
//!
//! The optimizer owns first/second moment buffers aligned with the parameter
//! store's canonical order, so checkpoints can serialize optimizer state by
//! parameter name. A step validates every gradient before touching any state:
//! a non-finite gradient rejects the whole step.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{lit, Scalar};
use serde::{Deserialize, Serialize};

/// Training hyperparameters. Epoch counts, drop points, batch size and the
/// augmentation ranges all live here so a run is reproducible from one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `drop_factor`.
    /// Strictly increasing, each < `epochs`.
    #[serde(default = "default_drop_epochs")]
    pub drop_epochs: Vec<usize>,
    #[serde(default = "default_drop_factor")]
    pub drop_factor: f64,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default = "default_rotation")]
    pub rotation_max_deg: f64,
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_epochs() -> usize {
    240
}
fn default_drop_epochs() -> Vec<usize> {
    vec![190, 220]
}
fn default_drop_factor() -> f64 {
    0.1
}
fn default_base_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_rotation() -> f64 {
    45.0
}
fn default_scale_range() -> (f64, f64) {
    (0.65, 1.35)
}
fn default_flip_prob() -> f64 {
    0.5
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            drop_epochs: default_drop_epochs(),
            drop_factor: default_drop_factor(),
            base_lr: default_base_lr(),
            batch_size: default_batch_size(),
            augment: default_true(),
            rotation_max_deg: default_rotation(),
            scale_range: default_scale_range(),
            flip_prob: default_flip_prob(),
            seed: 0,
            weight_decay: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// The reference 240-epoch run with drops at 190 and 220.
    pub fn reference() -> Self {
        TrainConfig::default()
    }

    /// Rescales the run to `epochs`, keeping each drop at the same fraction
    /// of the total. Drops that round onto 0 or past the end are discarded.
    pub fn scaled_to(&self, epochs: usize) -> Self {
        let mut out = self.clone();
        out.epochs = epochs;
        out.drop_epochs = if self.epochs == 0 {
            Vec::new()
        } else {
            let mut drops: Vec<usize> = self
                .drop_epochs
                .iter()
                .map(|&d| (d as f64 * epochs as f64 / self.epochs as f64).round() as usize)
                .filter(|&d| d > 0 && d < epochs)
                .collect();
            drops.dedup();
            drops
        };
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || !self.base_lr.is_finite() {
            return Err(Error::config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.drop_factor <= 0.0 || !self.drop_factor.is_finite() {
            return Err(Error::config(format!(
                "drop_factor must be positive, got {}",
                self.drop_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        for pair in self.drop_epochs.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::config(format!(
                    "drop epochs must be strictly increasing, got {:?}",
                    self.drop_epochs
                )));
            }
        }
        if let Some(&last) = self.drop_epochs.last() {
            if last >= self.epochs {
                return Err(Error::config(format!(
                    "drop epoch {last} is not below total epochs {}",
                    self.epochs
                )));
            }
        }
        if self.rotation_max_deg < 0.0 {
            return Err(Error::config("rotation_max_deg must be nonnegative"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config(format!(
                "scale_range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if let Some(wd) = self.weight_decay {
            if wd < 0.0 {
                return Err(Error::config(format!("weight_decay {wd} must be nonnegative")));
            }
        }
        if let Some(clip) = self.grad_clip {
            if clip <= 0.0 {
                return Err(Error::config(format!("grad_clip {clip} must be positive")));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `base_lr` times one `drop_factor` per
/// drop epoch at or before `epoch`. Errors outside `0..epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::config(format!(
            "epoch {epoch} out of range for a {}-epoch schedule",
            cfg.epochs
        )));
    }
    let mut lr = cfg.base_lr;
    for &drop in &cfg.drop_epochs {
        if epoch >= drop {
            lr *= cfg.drop_factor;
        }
    }
    Ok(lr)
}

/// Adam with bias correction. Moment buffers are index-aligned with the
/// parameter store the state was built from.
pub struct AdamState<T> {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, alpha: f64) -> Self {
        let m = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect::<Vec<_>>();
        let v = m.clone();
        AdamState {
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: None,
            grad_clip: None,
            t: 0,
            m,
            v,
        }
    }

    pub fn from_config(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let mut state = AdamState::new(params, cfg.base_lr);
        state.weight_decay = cfg.weight_decay;
        state.grad_clip = cfg.grad_clip;
        state
    }

    /// One update over every parameter. Rejects the whole step, leaving
    /// parameters, moments and the counter untouched, if any gradient
    /// element is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!(
                "got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (name, tensor)) in params.iter().enumerate() {
            if grads[i].len() != tensor.numel() {
                return Err(Error::shape(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    grads[i].len(),
                    tensor.numel()
                )));
            }
            if let Some(j) = grads[i].iter().position(|g| !g.is_finite()) {
                return Err(Error::numeric(format!(
                    "step rejected: non-finite gradient for {name} at flat index {j}"
                )));
            }
        }

        let scale = clip_scale(grads, self.grad_clip).unwrap_or(1.0);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        let b1 = lit::<T>(self.beta1);
        let b2 = lit::<T>(self.beta2);
        let one_m_b1 = lit::<T>(1.0 - self.beta1);
        let one_m_b2 = lit::<T>(1.0 - self.beta2);
        let inv_bc1 = lit::<T>(1.0 / bc1);
        let inv_bc2 = lit::<T>(1.0 / bc2);
        let eps = lit::<T>(self.eps);
        let alpha = lit::<T>(self.alpha);
        let scale_t = lit::<T>(scale);
        let decay = lit::<T>(self.alpha * self.weight_decay.unwrap_or(0.0));

        for i in 0..grads.len() {
            let data = params.get_mut(crate::params::ParamId(i)).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grads[i][j] * scale_t;
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                data[j] = data[j] - alpha * m_hat / (v_hat.sqrt() + eps) - decay * data[j];
            }
        }
        Ok(())
    }
}

/// Global-norm clip factor: `Some(max/norm)` when the joint gradient norm
/// exceeds `max`, `None` otherwise. Norm accumulates in f64.
pub fn clip_scale<T: Scalar>(grads: &[Vec<T>], max_norm: Option<f64>) -> Option<f64> {
    let max = max_norm?;
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.to_f64().unwrap();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    (norm > max).then(|| max / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn scalar_store(values: &[(&str, f64)]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for &(name, x) in values {
            store.add(name, Tensor::scalar(x));
        }
        store
    }

    #[test]
    fn first_step_is_a_signed_alpha_move() {
        // t=1 closed form: m_hat=g, v_hat=g^2, so the update is
        // alpha*g/(|g|+eps), which is alpha*sign(g) up to eps/|g|.
        let mut store = scalar_store(&[("a", 0.7), ("b", -1.3)]);
        let mut adam = AdamState::new(&store, 1e-3);
        adam.step(&mut store, &[vec![0.4], vec![-2.0]]).unwrap();
        let a = store.get(store.find("a").unwrap()).data()[0];
        let b = store.get(store.find("b").unwrap()).data()[0];
        assert!((a - (0.7 - 1e-3)).abs() < 1e-9, "a = {a}");
        assert!((b - (-1.3 + 1e-3)).abs() < 1e-9, "b = {b}");
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradients_leave_parameters_untouched() {
        let mut store = scalar_store(&[("w", 0.25)]);
        let mut adam = AdamState::new(&store, 1e-3);
        for _ in 0..5 {
            adam.step(&mut store, &[vec![0.0]]).unwrap();
        }
        assert_eq!(store.get(store.find("w").unwrap()).data()[0], 0.25);
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn fifty_adam_steps_shrink_a_parabola_argument() {
        // Minimize f(x) = x^2 from x=1 with alpha=0.1.
        let mut store = scalar_store(&[("x", 1.0)]);
        let mut adam = AdamState::new(&store, 0.1);
        for _ in 0..50 {
            let x = store.get(store.find("x").unwrap()).data()[0];
            adam.step(&mut store, &[vec![2.0 * x]]).unwrap();
        }
        let x = store.get(store.find("x").unwrap()).data()[0];
        assert!(x.abs() < 0.2, "after 50 steps x = {x}");
    }

    #[test]
    fn zero_betas_take_alpha_sized_steps() {
        // beta1=beta2=0 makes m_hat=g and v_hat=g^2: sign SGD with step alpha.
        let grads = [1e-3, 2.0, -500.0];
        let mut store = scalar_store(&[("a", 0.0), ("b", 0.0), ("c", 0.0)]);
        let mut adam = AdamState::new(&store, 0.05);
        adam.beta1 = 0.0;
        adam.beta2 = 0.0;
        adam.step(&mut store, &grads.iter().map(|&g| vec![g]).collect::<Vec<_>>()).unwrap();
        for (i, &g) in grads.iter().enumerate() {
            let moved = store.get(crate::params::ParamId(i)).data()[0];
            assert!(
                ((moved.abs() - 0.05) / 0.05).abs() < 1e-4,
                "grad {g} moved by {moved}, want magnitude 0.05"
            );
            assert_eq!(moved.signum(), -g.signum());
        }
    }

    #[test]
    fn non_finite_gradients_reject_the_whole_step() {
        let mut store = scalar_store(&[("ok", 1.0), ("bad", 2.0)]);
        let mut adam = AdamState::new(&store, 1e-3);
        let err = adam.step(&mut store, &[vec![0.5], vec![f64::NAN]]).unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
        assert_eq!(store.get(store.find("ok").unwrap()).data()[0], 1.0);
        assert_eq!(adam.t, 0);
        assert_eq!(adam.m[0][0], 0.0);
    }

    #[test]
    fn moment_buffers_match_parameter_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(vec![3, 4]));
        store.add("b", Tensor::zeros(vec![4]));
        let adam = AdamState::new(&store, 1e-3);
        assert_eq!(adam.m.len(), 2);
        assert_eq!(adam.m[0].len(), 12);
        assert_eq!(adam.v[1].len(), 4);
    }

    #[test]
    fn clipping_equals_feeding_prescaled_gradients() {
        // Gradient vector (3, 4) has norm 5; clip at 1 scales it to (0.6, 0.8).
        assert_eq!(clip_scale(&[vec![3.0], vec![4.0]], Some(1.0)), Some(0.2));
        assert_eq!(clip_scale(&[vec![0.3], vec![0.4]], Some(1.0)), None);

        // Clip 2.5 on norm 5 gives the dyadic scale 0.5, so the prescaled
        // run must match bit for bit.
        let mut clipped = scalar_store(&[("a", 1.0), ("b", 1.0)]);
        let mut adam_c = AdamState::new(&clipped, 1e-2);
        adam_c.grad_clip = Some(2.5);
        adam_c.step(&mut clipped, &[vec![3.0], vec![4.0]]).unwrap();

        let mut manual = scalar_store(&[("a", 1.0), ("b", 1.0)]);
        let mut adam_m = AdamState::new(&manual, 1e-2);
        adam_m.step(&mut manual, &[vec![1.5], vec![2.0]]).unwrap();

        for i in 0..2 {
            let id = crate::params::ParamId(i);
            assert_eq!(clipped.get(id).data()[0], manual.get(id).data()[0]);
            assert_eq!(adam_c.m[i][0], adam_m.m[i][0]);
            assert_eq!(adam_c.v[i][0], adam_m.v[i][0]);
        }
    }

    #[test]
    fn decoupled_weight_decay_shrinks_weights_without_gradients() {
        // p <- p - alpha*wd*p = 2 * (1 - 0.1*0.5) = 1.9
        let mut store = scalar_store(&[("w", 2.0)]);
        let mut adam = AdamState::new(&store, 0.1);
        adam.weight_decay = Some(0.5);
        adam.step(&mut store, &[vec![0.0]]).unwrap();
        let w = store.get(store.find("w").unwrap()).data()[0];
        assert!((w - 1.9).abs() < 1e-12, "w = {w}");
    }

    #[test]
    fn reference_schedule_holds_its_plateaus() {
        let cfg = TrainConfig::reference();
        cfg.validate().unwrap();
        let plateau = |lr: f64, want: f64| ((lr - want) / want).abs() < 1e-12;
        assert!(plateau(lr_at(0, &cfg).unwrap(), 1e-3));
        assert!(plateau(lr_at(189, &cfg).unwrap(), 1e-3));
        assert!(plateau(lr_at(190, &cfg).unwrap(), 1e-4));
        assert!(plateau(lr_at(219, &cfg).unwrap(), 1e-4));
        assert!(plateau(lr_at(220, &cfg).unwrap(), 1e-5));
        assert!(plateau(lr_at(239, &cfg).unwrap(), 1e-5));
        assert!(lr_at(240, &cfg).is_err());
    }

    #[test]
    fn proportional_scaling_keeps_drop_fractions() {
        let reference = TrainConfig::reference();
        // 190*48/240 = 38, 220*48/240 = 44
        let small = reference.scaled_to(48);
        assert_eq!(small.drop_epochs, vec![38, 44]);
        assert_eq!(small.epochs, 48);
        small.validate().unwrap();
        let tiny = reference.scaled_to(24);
        assert_eq!(tiny.drop_epochs, vec![19, 22]);
        let empty = reference.scaled_to(0);
        assert!(empty.drop_epochs.is_empty());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainConfig::reference();
        cfg.drop_epochs = vec![220, 190];
        assert!(cfg.validate().is_err());
        cfg.drop_epochs = vec![190, 240];
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::reference();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::reference();
        cfg.scale_range = (1.35, 0.65);
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::reference();
        cfg.flip_prob = 1.5;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_nonincreasing_and_total_in_range(
            epochs in 1usize..300,
            raw in proptest::collection::vec(1usize..300, 0..3),
            factor in 0.05f64..0.9,
        ) {
            let mut drops: Vec<usize> = raw.into_iter().filter(|&d| d < epochs).collect();
            drops.sort_unstable();
            drops.dedup();
            let cfg = TrainConfig {
                epochs,
                drop_epochs: drops,
                drop_factor: factor,
                ..TrainConfig::reference()
            };
            cfg.validate().unwrap();
            let mut prev = f64::INFINITY;
            for epoch in 0..epochs {
                let lr = lr_at(epoch, &cfg).unwrap();
                prop_assert!(lr <= prev);
                prop_assert!(lr > 0.0);
                prev = lr;
            }
            prop_assert!(lr_at(epochs, &cfg).is_err());
        }
    }
}
