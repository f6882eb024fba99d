//! Adam with decoupled weight decay and a linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            warmup_steps: 3500,
            total_steps: 7000,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Linear ramp 0 → base over the warmup, then linear decay to 0 at
/// `total_steps`; steps past the end clamp to 0.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> f64 {
    if step > cfg.total_steps {
        return 0.0;
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.base_lr;
        }
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    if span == 0.0 {
        return 0.0;
    }
    cfg.base_lr * (cfg.total_steps - step) as f64 / span
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub config: OptimConfig,
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

#[derive(Debug, Clone)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: OptimConfig, param_shapes: &[Vec<usize>]) -> Self {
        let moments = param_shapes
            .iter()
            .map(|s| Moments { m: Tensor::zeros(s), v: Tensor::zeros(s) })
            .collect();
        Self { config, step: 0, moments }
    }
}

/// One Adam step over every parameter. Weight decay is decoupled: each
/// parameter is shrunk by `(1 − lr·wd)` before the moment update is applied.
pub fn adam_apply<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(TensorError::Invalid {
            op: "adam_apply",
            msg: format!(
                "{} params, {} grads, {} moment pairs",
                params.len(),
                grads.len(),
                state.moments.len()
            ),
        });
    }
    let lr = lr_at(state.step, &state.config);
    let t = state.step + 1;
    let cfg = state.config;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(cfg.epsilon);
    let decay = T::from_f64(1.0 - lr * cfg.weight_decay);

    for ((p, g), mom) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_apply",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let gd = g.data();
        // Moments advance first, then the parameter update reads them back.
        crate::par::for_each_chunk_mut(mom.m.data_mut(), 256, 4, |ci, chunk| {
            let base = ci * 256;
            for (j, m) in chunk.iter_mut().enumerate() {
                *m = b1 * *m + (one - b1) * gd[base + j];
            }
        });
        crate::par::for_each_chunk_mut(mom.v.data_mut(), 256, 4, |ci, chunk| {
            let base = ci * 256;
            for (j, v) in chunk.iter_mut().enumerate() {
                let gv = gd[base + j];
                *v = b2 * *v + (one - b2) * gv * gv;
            }
        });
        let md = mom.m.data();
        let vd = mom.v.data();
        crate::par::for_each_chunk_mut(p.data_mut(), 256, 8, |ci, chunk| {
            let base = ci * 256;
            for (j, pv) in chunk.iter_mut().enumerate() {
                let i = base + j;
                *pv *= decay;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                *pv -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        });
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(base_lr: f64, warmup: u64, total: u64) -> OptimConfig {
        OptimConfig { base_lr, warmup_steps: warmup, total_steps: total, ..Default::default() }
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let c = cfg(3e-4, 3500, 7000);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(3500, &c), 3e-4);
        assert_eq!(lr_at(7000, &c), 0.0);
        assert!((lr_at(1750, &c) - 1.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(7001, &c), 0.0);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut params = vec![Tensor::<f32>::full(&[3], 1.5)];
        let grads = vec![Tensor::<f32>::zeros(&[3])];
        let mut state = OptimState::new(
            OptimConfig { weight_decay: 0.0, warmup_steps: 0, ..Default::default() },
            &[vec![3]],
        );
        adam_apply(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params[0].data(), &[1.5, 1.5, 1.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_update_magnitude_is_one_with_unit_lr() {
        // Bias correction cancels: m̂/√v̂ = 1 for any constant gradient.
        let mut params = vec![Tensor::<f64>::zeros(&[2])];
        let grads = vec![Tensor::<f64>::full(&[2], 1.0)];
        let config = OptimConfig {
            base_lr: 1.0,
            warmup_steps: 0,
            total_steps: 1_000_000_000,
            weight_decay: 0.0,
            epsilon: 0.0,
            ..Default::default()
        };
        let mut state = OptimState::new(config, &[vec![2]]);
        adam_apply(&mut params, &grads, &mut state).unwrap();
        for &p in params[0].data() {
            assert!((p + 1.0).abs() < 1e-12, "expected -1, got {p}");
        }
    }

    #[test]
    fn identical_grads_produce_identical_updates() {
        let mut params = vec![Tensor::<f32>::full(&[2], 0.7), Tensor::<f32>::full(&[2], 0.7)];
        let g = Tensor::<f32>::full(&[2], 0.3);
        let grads = vec![g.clone(), g];
        let mut state =
            OptimState::new(OptimConfig { warmup_steps: 0, ..Default::default() }, &[vec![2], vec![2]]);
        adam_apply(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params[0].data(), params[1].data());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::<f32>::zeros(&[3])];
        let grads = vec![Tensor::<f32>::zeros(&[4])];
        let mut state = OptimState::new(OptimConfig::default(), &[vec![3]]);
        assert!(adam_apply(&mut params, &grads, &mut state).is_err());
    }
}
