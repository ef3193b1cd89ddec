use super::params::ParameterSet;
use super::tensor::Result;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored in `params`. Frozen
    /// rows are left untouched.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for &id in &ids {
            params.grad(id)?;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in ids {
            let p = params.get_mut(id);
            let cols = p.value.dims2().1;
            let grad = p.grad.as_ref().expect("checked above").data();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let value = p.value.data_mut();
            for i in 0..value.len() {
                if p.frozen_rows.contains(&(i / cols)) {
                    continue;
                }
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
