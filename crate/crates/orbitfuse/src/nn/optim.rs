//! Adaptive-moment optimizer with bias correction.

use crate::error::{Error, Result};
use crate::nn::params::{ParamGrads, ParamSet};

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn adam(set: &ParamSet, learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: set.zero_grads(),
            second_moment: set.zero_grads(),
        }
    }

    pub fn step(&mut self, set: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        if grads.len() != self.first_moment.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer: {} gradient tensors for {} parameters",
                grads.len(),
                self.first_moment.len()
            )));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let data = set.data_mut(crate::nn::params::ParamId(idx));
            if grad.len() != data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer: gradient length {} for parameter length {}",
                    grad.len(),
                    data.len()
                )));
            }
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_set(value: f64) -> ParamSet {
        let mut set = ParamSet::new();
        set.add("x", vec![1], vec![value]);
        set
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut set = one_param_set(1.25);
        let mut opt = OptimizerState::adam(&set, 1e-3);
        for _ in 0..10 {
            opt.step(&mut set, &vec![vec![0.0]]).unwrap();
        }
        assert_eq!(set.entries()[0].data[0], 1.25);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut set = one_param_set(0.0);
        let mut opt = OptimizerState::adam(&set, 1e-3);
        for _ in 0..200 {
            opt.step(&mut set, &vec![vec![2.5]]).unwrap();
        }
        assert!(set.entries()[0].data[0] < -0.1);

        let mut set = one_param_set(0.0);
        let mut opt = OptimizerState::adam(&set, 1e-3);
        for _ in 0..200 {
            opt.step(&mut set, &vec![vec![-2.5]]).unwrap();
        }
        assert!(set.entries()[0].data[0] > 0.1);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut set = one_param_set(0.5);
            let mut opt = OptimizerState::adam(&set, 1e-3);
            for k in 0..50 {
                opt.step(&mut set, &vec![vec![(k as f64 * 0.37).sin()]]).unwrap();
            }
            set.entries()[0].data[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut set = one_param_set(0.0);
        let mut opt = OptimizerState::adam(&set, 1e-3);
        assert!(opt.step(&mut set, &vec![vec![1.0, 2.0]]).is_err());
        assert!(opt.step(&mut set, &vec![]).is_err());
    }
}
