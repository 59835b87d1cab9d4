//! Adaptive-moment (Adam) optimizer over flat parameter tensors.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update. `params` and `grads` must list the
    /// same tensors in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer tensors",
                &[params.len()],
                &[grads.len()],
            ));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.m[i].len() != g.len() {
                return Err(Error::shape("optimizer tensor", &[p.len()], &[g.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let mut p = vec![0.5, -1.25, 3.0];
        let before = p.clone();
        let mut opt = Adam::new(1e-3);
        opt.step(vec![&mut p], &[vec![0.0; 3]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * sign(g) (up to eps).
        let mut p = vec![1.0, 1.0];
        let mut opt = Adam::new(0.1);
        opt.step(vec![&mut p], &[vec![2.0, -0.5]]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![5.0];
        let mut opt = Adam::new(0.1);
        for _ in 0..2000 {
            let g = vec![2.0 * (x[0] - 2.0)];
            opt.step(vec![&mut x], &[g]).unwrap();
        }
        assert!((x[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn mismatched_lengths_error() {
        let mut p = vec![0.0; 2];
        let mut opt = Adam::new(0.1);
        assert!(opt.step(vec![&mut p], &[vec![0.0; 3]]).is_err());
    }
}
