//! Adam optimizer over named parameters.

use std::collections::BTreeMap;

use crate::tensor::Parameter;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: usize,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update over every parameter. Parameters without a gradient entry
    /// (never bound to the step's tape) receive a zero gradient.
    pub fn step(&mut self, params: Vec<&mut Parameter>, grads: &BTreeMap<String, Vec<f64>>) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for p in params {
            let n = p.tensor.numel();
            let (m, v) = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let zero = vec![0.0; n];
            let g = grads.get(&p.name).unwrap_or(&zero);
            debug_assert_eq!(g.len(), n, "gradient size mismatch for {}", p.name);
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.tensor.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::InitKind;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        let mut rng = Rng::new(1);
        let mut p = Parameter::init("p", vec![2], InitKind::Zero, 1, 1, &mut rng);
        let mut adam = Adam::new(0.01);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![10.0, -0.5]);
        adam.step(vec![&mut p], &grads);
        // With bias correction the first step is lr * sign(g) (up to eps).
        assert!((p.tensor.data[0] + 0.01).abs() < 1e-6);
        assert!((p.tensor.data[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn quadratic_converges() {
        // Minimize (x - 3)^2 by hand-fed gradients.
        let mut rng = Rng::new(2);
        let mut p = Parameter::init("x", vec![1], InitKind::Zero, 1, 1, &mut rng);
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let g = 2.0 * (p.tensor.data[0] - 3.0);
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), vec![g]);
            adam.step(vec![&mut p], &grads);
        }
        assert!((p.tensor.data[0] - 3.0).abs() < 1e-2, "{}", p.tensor.data[0]);
    }

    #[test]
    fn missing_gradient_means_zero_update_at_fresh_state() {
        let mut rng = Rng::new(3);
        let mut p = Parameter::init("p", vec![2], InitKind::UniformScaled, 2, 2, &mut rng);
        let before = p.tensor.data.clone();
        let mut adam = Adam::new(0.01);
        adam.step(vec![&mut p], &BTreeMap::new());
        assert_eq!(p.tensor.data, before);
    }
}
