//! Named parameter storage, seeded initialization, and the Adam optimizer.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

/// Ordered map of named trainable arrays. Registration order is the
/// canonical parameter order used for binding, gradients, optimizer state,
/// checkpoints, and manifests.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<ArrayD<f64>>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> usize {
        assert!(
            self.index_of(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn value(&self, index: usize) -> &Arc<ArrayD<f64>> {
        &self.values[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Mutable view of one parameter for optimizer updates.
    pub fn value_mut(&mut self, index: usize) -> &mut ArrayD<f64> {
        Arc::make_mut(&mut self.values[index])
    }

    /// Replaces a parameter's contents, keeping its shape.
    pub fn set(&mut self, index: usize, value: ArrayD<f64>) -> Result<()> {
        if value.shape() != self.values[index].shape() {
            return Err(Error::invalid(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[index],
                self.values[index].shape(),
                value.shape()
            )));
        }
        self.values[index] = Arc::new(value);
        Ok(())
    }

    /// Creates one graph leaf per parameter, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Tensor> {
        self.values.iter().map(|v| g.param(v.clone())).collect()
    }

    /// One line per parameter: name and shape, in store order.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
            out.push_str(name);
            out.push(' ');
            out.push_str(&dims.join("x"));
            out.push('\n');
        }
        out
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Normal init with standard deviation sqrt(2 / fan_in), for layers feeding
/// a ReLU.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// Uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)], for recurrent and
/// classifier layers.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Extracts per-parameter gradients from a backward pass, reordered from
/// graph slots to store order.
pub fn gather_param_grads(
    bindings: &[Tensor],
    mut grads_by_slot: Vec<Option<ArrayD<f64>>>,
) -> Vec<Option<ArrayD<f64>>> {
    bindings
        .iter()
        .map(|t| grads_by_slot[t.slot()].take())
        .collect()
}

/// Sums `part` into `total` elementwise, treating None as zero.
pub fn accumulate_grads(total: &mut Vec<Option<ArrayD<f64>>>, part: Vec<Option<ArrayD<f64>>>) {
    if total.is_empty() {
        *total = part;
        return;
    }
    assert_eq!(total.len(), part.len(), "gradient list length mismatch");
    for (t, p) in total.iter_mut().zip(part) {
        match (t.as_mut(), p) {
            (Some(acc), Some(g)) => *acc += &g,
            (None, Some(g)) => *t = Some(g),
            _ => {}
        }
    }
}

/// Scales every present gradient in place.
pub fn scale_grads(grads: &mut [Option<ArrayD<f64>>], factor: f64) {
    for g in grads.iter_mut().flatten() {
        g.mapv_inplace(|v| v * factor);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Parameters whose gradient is absent in a step
/// (None) are left untouched, moments included; this keeps structural
/// parameters that never receive gradients at their initial values.
pub struct Adam {
    config: AdamConfig,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m = (0..store.len())
            .map(|i| ArrayD::zeros(store.value(i).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            config,
            m,
            v,
            steps: vec![0; store.len()],
        }
    }

    /// Moment estimates and step counts, in store order.
    pub fn state(&self) -> (&[ArrayD<f64>], &[ArrayD<f64>], &[u64]) {
        (&self.m, &self.v, &self.steps)
    }

    /// Rebuilds an optimizer from saved state. Every moment array must match
    /// the corresponding parameter's shape.
    pub fn restore(
        store: &ParamStore,
        config: AdamConfig,
        m: Vec<ArrayD<f64>>,
        v: Vec<ArrayD<f64>>,
        steps: Vec<u64>,
    ) -> Result<Adam> {
        if m.len() != store.len() || v.len() != store.len() || steps.len() != store.len() {
            return Err(Error::invalid("optimizer state length does not match parameter count"));
        }
        for i in 0..store.len() {
            if m[i].shape() != store.value(i).shape() || v[i].shape() != store.value(i).shape() {
                return Err(Error::invalid(format!(
                    "optimizer state for {} has the wrong shape",
                    store.name(i)
                )));
            }
        }
        Ok(Adam { config, m, v, steps })
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<ArrayD<f64>>],
        lr: f64,
    ) {
        assert_eq!(grads.len(), store.len(), "gradient list length mismatch");
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, gv| *mv = beta1 * *mv + (1.0 - beta1) * gv);
            v.zip_mut_with(g, |vv, gv| *vv = beta2 * *vv + (1.0 - beta2) * gv * gv);
            let mc = 1.0 - beta1.powi(t);
            let vc = 1.0 - beta2.powi(t);
            let param = store.value_mut(i);
            ndarray::Zip::from(&mut *param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    *p -= lr * (mv / mc) / ((vv / vc).sqrt() + epsilon);
                });
        }
    }
}

/// Step-decay learning rate: the base rate multiplied by `gamma` once for
/// every milestone the 1-based epoch has reached.
pub fn lr_at_epoch(base_lr: f64, milestones: &[usize], gamma: f64, epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    base_lr * gamma.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::SeedableRng;

    #[test]
    fn store_rejects_shape_changes_and_keeps_order() {
        let mut store = ParamStore::new();
        let a = store.add("layer.weight", zeros(&[2, 3]));
        let b = store.add("layer.bias", zeros(&[3]));
        assert_eq!((a, b), (0, 1));
        assert_eq!(store.index_of("layer.bias"), Some(1));
        assert!(store.set(0, zeros(&[3, 2])).is_err());
        assert!(store.set(0, zeros(&[2, 3])).is_ok());
        assert_eq!(store.manifest(), "layer.weight 2x3\nlayer.bias 3\n");
        assert_eq!(store.total_elements(), 9);
    }

    #[test]
    fn initializers_are_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            he_normal(&mut r1, &[4, 4], 16),
            he_normal(&mut r2, &[4, 4], 16)
        );
        let mut r3 = ChaCha8Rng::seed_from_u64(4);
        assert_ne!(
            he_normal(&mut r1, &[4, 4], 16),
            he_normal(&mut r3, &[4, 4], 16)
        );
        let u = uniform_fan_in(&mut r1, &[100], 25);
        assert!(u.iter().all(|v| v.abs() <= 0.2));
    }

    #[test]
    fn adam_matches_hand_computed_step() {
        let mut store = ParamStore::new();
        store.add("w", arr1(&[1.0]).into_dyn());
        let mut opt = Adam::new(&store, AdamConfig::default());
        let g = arr1(&[0.5]).into_dyn();
        opt.step(&mut store, &[Some(g.clone())], 0.1);

        // First step: m = 0.1*0.5, v = 0.001*0.25, corrected fully, so the
        // update is lr * g / (|g| + eps) = almost exactly lr.
        let expect = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((store.value(0)[[0]] - expect).abs() < 1e-12);

        opt.step(&mut store, &[Some(g)], 0.1);
        let m = 0.9 * 0.05 + 0.1 * 0.5;
        let v = 0.999 * 0.00025 + 0.001 * 0.25;
        let mc = m / (1.0 - 0.9f64.powi(2));
        let vc = v / (1.0 - 0.999f64.powi(2));
        let expect2 = expect - 0.1 * mc / (vc.sqrt() + 1e-8);
        assert!((store.value(0)[[0]] - expect2).abs() < 1e-12);
    }

    #[test]
    fn adam_skips_missing_gradients() {
        let mut store = ParamStore::new();
        store.add("live", arr1(&[1.0]).into_dyn());
        store.add("dead", arr1(&[2.0]).into_dyn());
        let mut opt = Adam::new(&store, AdamConfig::default());
        for _ in 0..5 {
            opt.step(
                &mut store,
                &[Some(arr1(&[1.0]).into_dyn()), None],
                0.01,
            );
        }
        assert!(store.value(0)[[0]] < 1.0);
        assert_eq!(store.value(1)[[0]], 2.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", arr1(&[0.0]).into_dyn());
        let mut opt = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let x = store.value(0)[[0]];
            let g = arr1(&[2.0 * (x - 3.0)]).into_dyn();
            opt.step(&mut store, &[Some(g)], 0.05);
        }
        assert!((store.value(0)[[0]] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn lr_schedule_steps_at_milestones() {
        let base = 1e-4;
        assert_eq!(lr_at_epoch(base, &[25, 35], 0.2, 1), base);
        assert_eq!(lr_at_epoch(base, &[25, 35], 0.2, 24), base);
        assert!((lr_at_epoch(base, &[25, 35], 0.2, 25) - base * 0.2).abs() < 1e-18);
        assert!((lr_at_epoch(base, &[25, 35], 0.2, 40) - base * 0.04).abs() < 1e-18);
        assert_eq!(lr_at_epoch(base, &[], 0.2, 100), base);
    }

    #[test]
    fn grad_accumulation_treats_none_as_zero() {
        let mut total: Vec<Option<ArrayD<f64>>> = Vec::new();
        accumulate_grads(&mut total, vec![Some(arr1(&[1.0]).into_dyn()), None]);
        accumulate_grads(&mut total, vec![Some(arr1(&[2.0]).into_dyn()), None]);
        accumulate_grads(&mut total, vec![None, None]);
        assert_eq!(total[0].as_ref().unwrap()[[0]], 3.0);
        assert!(total[1].is_none());
        scale_grads(&mut total, 0.5);
        assert_eq!(total[0].as_ref().unwrap()[[0]], 1.5);
    }
}
