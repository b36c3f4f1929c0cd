//! Adam with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::TensorF;

/// Learning rate at `step` of `total`, decaying from `lr` to `min_lr` along
/// half a cosine period.
pub fn cosine_lr(step: usize, total: usize, lr: f64, min_lr: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = step.min(total) as f64 / total as f64;
    min_lr + 0.5 * (lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[TensorF], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter with its gradient at learning rate `lr`.
    pub fn step(&mut self, params: &mut [TensorF], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "AdamW::step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w = *w * decay - lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(cosine_lr(30, 100, 1e-3, 1e-5) > cosine_lr(31, 100, 1e-3, 1e-5));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // Bias correction makes the first Adam step exactly lr * g / (|g| + eps).
        let mut p = vec![TensorF::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &[&[0.3, -4.0, 0.0]], 0.1).unwrap();
        let expect = [
            1.0 - 0.1 * 0.3 / (0.3 + 1e-8),
            -2.0 + 0.1 * 4.0 / (4.0 + 1e-8),
            0.5,
        ];
        for (a, b) in p[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = vec![TensorF::new(vec![1], vec![2.0]).unwrap()];
        let mut opt = AdamW::new(&p, 0.5);
        opt.step(&mut p, &[&[0.0]], 0.1).unwrap();
        assert!((p[0].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![TensorF::new(vec![2], vec![3.0, -1.0]).unwrap()];
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = p[0].data().iter().map(|x| 2.0 * (x - 0.5)).collect();
            opt.step(&mut p, &[&g], 0.01).unwrap();
        }
        assert!(p[0].data().iter().all(|x| (x - 0.5).abs() < 1e-3));
    }
}
