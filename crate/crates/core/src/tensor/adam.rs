//! Adam optimizer with bias correction.

use super::Tensor;
use crate::error::{Error, Result};

/// Per-parameter Adam state. Moment buffers are allocated to match the
/// parameter list handed to `new` and must be stepped with the same list.
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Step counter; strictly increases by 1 per step.
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

pub const DEFAULT_LR: f32 = 2e-4;

impl AdamState {
    pub fn new(params: &[Tensor], lr: f32) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One Adam update over `params`, reading each parameter's accumulated
    /// gradient (a missing gradient counts as zero). Rejects non-finite
    /// gradients before touching any parameter.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam state tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::Shape(format!(
                    "adam moment buffer {} has {} elements, parameter has {}",
                    i,
                    self.m[i].len(),
                    p.numel()
                )));
            }
            if let Some(g) = p.grad().as_ref() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::TrainingDiverged(format!(
                        "non-finite gradient in parameter {i}"
                    )));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let guard = p.grad();
            let Some(grad) = guard.as_ref() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = p.data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        p.accumulate_grad(&[0.0, 0.0, 0.0]);
        let mut state = AdamState::new(std::slice::from_ref(&p), DEFAULT_LR);
        state.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(&*p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn missing_gradient_counts_as_zero() {
        let p = Tensor::param(&[2], vec![4.0, 5.0]).unwrap();
        let mut state = AdamState::new(std::slice::from_ref(&p), DEFAULT_LR);
        state.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(&*p.data(), &[4.0, 5.0]);
    }

    #[test]
    fn single_step_magnitude_is_about_lr() {
        // With a constant gradient g, bias-corrected Adam gives
        // |delta| = lr * g / (|g| + eps') on the first step.
        let g = 0.37f32;
        let p = Tensor::param(&[1], vec![2.0]).unwrap();
        p.accumulate_grad(&[g]);
        let mut state = AdamState::new(std::slice::from_ref(&p), 2e-4);
        state.step(std::slice::from_ref(&p)).unwrap();
        let delta = 2.0 - p.data()[0];
        assert!(
            (delta - 2e-4).abs() < 1e-6,
            "step magnitude {delta} should be about lr"
        );
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        p.accumulate_grad(&[f32::NAN]);
        let mut state = AdamState::new(std::slice::from_ref(&p), DEFAULT_LR);
        let err = state.step(std::slice::from_ref(&p)).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged(_)));
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let p = Tensor::param(&[4], vec![0.5, -0.25, 1.5, 3.0]).unwrap();
            let mut state = AdamState::new(std::slice::from_ref(&p), 1e-3);
            for step in 0..10 {
                p.zero_grad();
                p.accumulate_grad(&[0.1 * step as f32, -0.2, 0.33, 0.0]);
                state.step(std::slice::from_ref(&p)).unwrap();
            }
            let out = p.data().clone();
            out
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
