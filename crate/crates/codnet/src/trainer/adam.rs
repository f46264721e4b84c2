//! Adam with coupled weight decay: the decay term is folded into the
//! gradient before the moment updates (the classic, non-decoupled
//! convention), so `g ← ∂L/∂θ + wd·θ` feeds both moments.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::ParamVisit;
use crate::scalar::Scalar;

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct MomentPair<T> {
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
}

/// Adam optimizer keyed by the stable hierarchical parameter names that
/// [`ParamVisit`] reports, so state survives checkpointing by name.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    slots: BTreeMap<String, MomentPair<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Number of completed optimization steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Restore the step counter (checkpoint resume).
    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Moment tensors for checkpointing, namespaced as
    /// `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_tensors(&self) -> impl Iterator<Item = (String, &ArrayD<T>)> {
        self.slots.iter().flat_map(|(name, pair)| {
            [
                (format!("adam.m.{name}"), &pair.m),
                (format!("adam.v.{name}"), &pair.v),
            ]
        })
    }

    /// Reinstall one parameter's moments (checkpoint resume).
    pub fn restore_slot(&mut self, param_name: &str, m: ArrayD<T>, v: ArrayD<T>) {
        self.slots.insert(param_name.to_string(), MomentPair { m, v });
    }

    /// One update over every parameter the module reports. Every
    /// parameter must have a gradient in `grads`; a silent miss would
    /// mean part of the network is disconnected from the loss, so it is
    /// an error rather than a skip.
    pub fn step(
        &mut self,
        module: &mut dyn ParamVisit<T>,
        grads: &BTreeMap<String, ArrayD<T>>,
    ) -> Result<usize> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        // PyTorch's formulation: θ ← θ − (lr/bias1) · m / (√(v)/√bias2 + ε).
        let step_size = T::c(self.lr / bias1);
        let inv_sqrt_bias2 = T::c(1.0 / bias2.sqrt());
        let b1 = T::c(self.beta1);
        let b2 = T::c(self.beta2);
        let one_minus_b1 = T::c(1.0 - self.beta1);
        let one_minus_b2 = T::c(1.0 - self.beta2);
        let wd = T::c(self.weight_decay);
        let eps = T::c(self.eps);

        let mut updated = 0usize;
        let mut missing: Vec<String> = Vec::new();
        let mut shape_errors: Vec<String> = Vec::new();
        let slots = &mut self.slots;
        module.visit_params_mut("", &mut |name, param| {
            let Some(grad) = grads.get(name) else {
                missing.push(name.to_string());
                return;
            };
            if grad.shape() != param.shape() {
                shape_errors.push(format!(
                    "{name}: gradient shape {:?} vs parameter shape {:?}",
                    grad.shape(),
                    param.shape()
                ));
                return;
            }
            let pair = slots.entry(name.to_string()).or_insert_with(|| MomentPair {
                m: ArrayD::zeros(param.raw_dim()),
                v: ArrayD::zeros(param.raw_dim()),
            });
            ndarray::Zip::from(param)
                .and(&mut pair.m)
                .and(&mut pair.v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = g + wd * *p;
                    *m = b1 * *m + one_minus_b1 * g;
                    *v = b2 * *v + one_minus_b2 * g * g;
                    let denom = (*v).sqrt() * inv_sqrt_bias2 + eps;
                    *p = *p - step_size * *m / denom;
                });
            updated += 1;
        });

        if !missing.is_empty() {
            return Err(Error::InvalidInput(format!(
                "optimizer step is missing gradients for {} parameter(s): {}",
                missing.len(),
                missing.join(", ")
            )));
        }
        if !shape_errors.is_empty() {
            return Err(Error::InvalidInput(format!(
                "optimizer step got mis-shaped gradients: {}",
                shape_errors.join("; ")
            )));
        }
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    /// One named tensor, the smallest thing the optimizer can drive.
    struct OneParam {
        value: ArrayD<f64>,
    }

    impl ParamVisit<f64> for OneParam {
        fn visit_params(&self, _p: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
            f("theta", &self.value);
        }
        fn visit_params_mut(&mut self, _p: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
            f("theta", &mut self.value);
        }
    }

    fn grads_for(value: &ArrayD<f64>, scale: f64) -> BTreeMap<String, ArrayD<f64>> {
        let mut grads = BTreeMap::new();
        grads.insert("theta".to_string(), value.mapv(|v| scale * v));
        grads
    }

    #[test]
    fn first_step_moves_by_about_the_learning_rate() {
        // Minimizing f(θ) = θ²/2 (gradient = θ): the very first Adam step
        // has magnitude ≈ lr regardless of the gradient's scale.
        let mut module = OneParam {
            value: ArrayD::from_elem(IxDyn(&[3]), 2.0),
        };
        let mut optimizer = Adam::new(1e-2, 0.0);
        let before = module.value.clone();
        let grads = grads_for(&module.value, 1.0);
        let updated = optimizer.step(&mut module, &grads).unwrap();
        assert_eq!(updated, 1);
        for (b, a) in before.iter().zip(module.value.iter()) {
            let delta = b - a;
            assert!(
                (delta - 1e-2).abs() < 1e-5,
                "first step should be ≈ lr toward the minimum, got {delta}"
            );
        }
        assert_eq!(optimizer.step_count(), 1);
    }

    #[test]
    fn many_steps_reach_the_quadratic_minimum() {
        let mut module = OneParam {
            value: ArrayD::from_elem(IxDyn(&[1]), 1.5),
        };
        let mut optimizer = Adam::new(5e-2, 0.0);
        for _ in 0..400 {
            let grads = grads_for(&module.value, 1.0);
            optimizer.step(&mut module, &grads).unwrap();
        }
        assert!(
            module.value[[0]].abs() < 1e-2,
            "θ should approach 0, got {}",
            module.value[[0]]
        );
    }

    #[test]
    fn weight_decay_zero_is_inert_and_nonzero_shrinks() {
        // With zero gradients, wd=0 must leave the parameter untouched
        // while wd>0 pulls it toward zero.
        let zero_grads = |v: &ArrayD<f64>| grads_for(v, 0.0);

        let mut frozen = OneParam {
            value: ArrayD::from_elem(IxDyn(&[2]), 0.7),
        };
        let mut optimizer = Adam::new(1e-2, 0.0);
        let grads = zero_grads(&frozen.value);
        optimizer.step(&mut frozen, &grads).unwrap();
        assert!(frozen.value.iter().all(|&v| v == 0.7));

        let mut decayed = OneParam {
            value: ArrayD::from_elem(IxDyn(&[2]), 0.7),
        };
        let mut optimizer = Adam::new(1e-2, 0.1);
        for _ in 0..5 {
            let grads = zero_grads(&decayed.value);
            optimizer.step(&mut decayed, &grads).unwrap();
        }
        assert!(
            decayed.value.iter().all(|&v| v < 0.7 && v > 0.0),
            "decay alone should shrink the parameter, got {:?}",
            decayed.value
        );
    }

    #[test]
    fn missing_gradients_are_an_error() {
        let mut module = OneParam {
            value: ArrayD::from_elem(IxDyn(&[2]), 1.0),
        };
        let mut optimizer = Adam::new(1e-3, 0.0);
        let err = optimizer.step(&mut module, &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("theta"), "error names the parameter: {err}");
    }

    #[test]
    fn trajectories_are_deterministic() {
        let run = || {
            let mut module = OneParam {
                value: ArrayD::from_elem(IxDyn(&[4]), 1.25),
            };
            let mut optimizer = Adam::new(3e-3, 0.05);
            for _ in 0..10 {
                let grads = grads_for(&module.value, 2.0);
                optimizer.step(&mut module, &grads).unwrap();
            }
            module.value
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
