use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, NumericsError, ParamStore, Tensor};

/// AdamW hyperparameters. `max_grad_norm` bounds the joint L2 norm of every
/// gradient passed to one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1.0 when not clipped).
    pub clip_scale: f64,
}

/// Decoupled-weight-decay Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Resumes the bias-correction counter, e.g. after loading a checkpoint.
    /// Moments restart from zero.
    pub fn set_steps_taken(&mut self, step: u64) {
        self.step = step;
    }

    /// Clips `grads` to the configured global norm, then updates every named
    /// parameter in `params`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
    ) -> Result<StepReport, NumericsError> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| NumericsError::UnknownParam(name.into()))?;
            p.check_same_shape(g)?;
            if !g.all_finite() {
                return Err(NumericsError::NonFinite {
                    op: "optimizer_step",
                });
            }
        }
        let grad_norm = grads.global_norm();
        let clip_scale = if grad_norm > self.config.max_grad_norm && grad_norm > 0.0 {
            self.config.max_grad_norm / grad_norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gc = gv * clip_scale;
                *mv = beta1 * *mv + (1.0 - beta1) * gc;
                *vv = beta2 * *vv + (1.0 - beta2) * gc * gc;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *pv);
            }
        }
        Ok(StepReport {
            grad_norm,
            clip_scale,
        })
    }
}

/// Scales every gradient so the joint norm is at most `max_norm`; returns
/// the factor applied.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let s = max_norm / norm;
    for (_, g) in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(name: &str, v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::vector(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = store("w", vec![0.5, -0.25]);
        let mut grads = Gradients::default();
        grads.insert("w", Tensor::zeros(&[2]));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[0.5, -0.25]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = store("w", vec![1.0]);
        let mut grads = Gradients::default();
        grads.insert("w", Tensor::vector(vec![1.0]));
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(cfg);
        opt.step(&mut params, &grads).unwrap();
        // mhat = 1, vhat = 1 → Δ = η / (1 + eps)
        let moved = 1.0 - params.get("w").unwrap().data()[0];
        assert!((moved - cfg.lr / (1.0 + cfg.eps)).abs() < 1e-15);
    }

    #[test]
    fn large_norm_is_clipped_to_one() {
        let mut params = store("w", vec![0.0, 0.0]);
        let mut grads = Gradients::default();
        grads.insert("w", Tensor::vector(vec![6.0, 8.0]));
        let mut opt = AdamW::new(AdamWConfig::default());
        let report = opt.step(&mut params, &grads).unwrap();
        assert_eq!(report.grad_norm, 10.0);
        assert!((report.clip_scale - 0.1).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = store("w", vec![0.0, 0.0]);
        let mut grads = Gradients::default();
        grads.insert("w", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(NumericsError::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn clipping_never_grows_a_gradient(values in proptest::collection::vec(-50.0f64..50.0, 1..20), max in 0.01f64..5.0) {
            let mut grads = Gradients::default();
            grads.insert("a", Tensor::vector(values.clone()));
            clip_global_norm(&mut grads, max);
            for (c, o) in grads.get("a").unwrap().data().iter().zip(&values) {
                prop_assert!(c.abs() <= o.abs());
            }
            prop_assert!(grads.global_norm() <= max * (1.0 + 1e-12) || grads.global_norm() <= max);
        }
    }
}
