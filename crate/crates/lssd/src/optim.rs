//! Adam with bias correction and the inverse-square-root warmup schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimizerState { beta1, beta2, eps, step: 0, moments: BTreeMap::new() }
    }
}

/// One bias-corrected Adam update in place; gradients are cleared afterward.
pub fn adam_step(model: &mut Seq2SeqModel, state: &mut OptimizerState, lr: f64) -> Result<()> {
    // Validate all grads before mutating anything.
    for (name, t) in &model.params {
        match &t.grad {
            None => {
                return Err(Error::ParamError { name: name.clone(), reason: "missing gradient".into() })
            }
            Some(g) => {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::ParamError {
                        name: name.clone(),
                        reason: "non-finite gradient".into(),
                    });
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    for (name, p) in model.params.iter_mut() {
        let g = p.grad.as_ref().unwrap();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; p.values.len()], vec![0.0; p.values.len()]));
        for i in 0..p.values.len() {
            let gi = g[i] as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.values[i] = (p.values[i] as f64 - lr * mhat / (vhat.sqrt() + state.eps)) as f32;
        }
        p.grad = None;
    }
    Ok(())
}

/// lr = lr_scale * embed_dim^-0.5 * min(step^-0.5, step * warmup^-1.5).
/// Rises linearly to the peak at `warmup_steps`, then decays as step^-0.5.
pub fn lr_at(step: u64, lr_scale: f64, warmup_steps: u64, embed_dim: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidArgument("schedule step must be >= 1".into()));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok(lr_scale * (embed_dim as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn tiny() -> Seq2SeqModel {
        let cfg = ModelConfig {
            vocab_size: 8,
            embed_dim: 8,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 8,
            dropout: 0.0,
        };
        init_model(&cfg, 0).unwrap()
    }

    fn set_grads(model: &mut Seq2SeqModel, value: f32) {
        for t in model.params.values_mut() {
            t.grad = Some(vec![value; t.values.len()]);
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut m = tiny();
        let before: Vec<f32> = m.params.values().flat_map(|t| t.values.clone()).collect();
        let mut opt = OptimizerState::new(0.9, 0.98, 1e-8);
        set_grads(&mut m, 0.0);
        adam_step(&mut m, &mut opt, 0.01).unwrap();
        let after: Vec<f32> = m.params.values().flat_map(|t| t.values.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // Bias-corrected m_hat = v_hat = 1, so the update is -lr (up to eps).
        let mut m = tiny();
        let before = m.params["out.bias"].values[0];
        let mut opt = OptimizerState::new(0.9, 0.98, 1e-8);
        set_grads(&mut m, 1.0);
        adam_step(&mut m, &mut opt, 0.001).unwrap();
        let after = m.params["out.bias"].values[0];
        assert!((after - (before - 0.001)).abs() < 1e-7, "{before} -> {after}");
    }

    #[test]
    fn deterministic_across_identical_models() {
        let mut a = tiny();
        let mut b = tiny();
        let mut oa = OptimizerState::new(0.9, 0.98, 1e-8);
        let mut ob = OptimizerState::new(0.9, 0.98, 1e-8);
        for step in 0..3 {
            let g = 0.1 + step as f32 * 0.05;
            set_grads(&mut a, g);
            set_grads(&mut b, g);
            adam_step(&mut a, &mut oa, 0.01).unwrap();
            adam_step(&mut b, &mut ob, 0.01).unwrap();
        }
        for (name, t) in &a.params {
            assert_eq!(t.values, b.params[name].values, "{name}");
        }
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut m = tiny();
        set_grads(&mut m, 1.0);
        m.params.get_mut("out.bias").unwrap().grad = None;
        let mut opt = OptimizerState::new(0.9, 0.98, 1e-8);
        let err = adam_step(&mut m, &mut opt, 0.01).unwrap_err();
        assert!(err.to_string().contains("out.bias"));
        assert_eq!(opt.step, 0); // nothing applied
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut m = tiny();
        set_grads(&mut m, 1.0);
        m.params.get_mut("out.bias").unwrap().grad = Some(vec![f32::NAN; 8]);
        let mut opt = OptimizerState::new(0.9, 0.98, 1e-8);
        assert!(adam_step(&mut m, &mut opt, 0.01).is_err());
    }

    #[test]
    fn grads_cleared_after_step() {
        let mut m = tiny();
        set_grads(&mut m, 1.0);
        let mut opt = OptimizerState::new(0.9, 0.98, 1e-8);
        adam_step(&mut m, &mut opt, 0.01).unwrap();
        assert!(m.params.values().all(|t| t.grad.is_none()));
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn schedule_crossover_at_warmup() {
        let w = 100u64;
        let lr_w = lr_at(w, 1.0, w, 64).unwrap();
        let s = w as f64;
        assert!((s.powf(-0.5) - s * s.powf(-1.5)).abs() < 1e-15);
        // step = 4*warmup -> half the peak
        let lr_4w = lr_at(4 * w, 1.0, w, 64).unwrap();
        assert!((lr_4w - lr_w / 2.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_monotone_after_warmup() {
        let mut prev = f64::INFINITY;
        for step in 100..500 {
            let lr = lr_at(step, 1.0, 100, 64).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn schedule_rejects_step_zero() {
        assert!(lr_at(0, 1.0, 100, 64).is_err());
    }
}
