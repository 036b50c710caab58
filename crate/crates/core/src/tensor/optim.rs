use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction over a fixed parameter list.
#[derive(Debug)]
pub struct Adam {
    params: Vec<Tensor>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
    config: AdamConfig,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, config: AdamConfig) -> Self {
        let first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let second_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            params,
            first_moment,
            second_moment,
            step: 0,
            config,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Applies one update at learning rate `lr`, then clears gradients.
    ///
    /// Every parameter must carry a gradient; a missing one aborts the step
    /// before any buffer is touched.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        if let Some(index) = self.params.iter().position(|p| p.grad().is_none()) {
            return Err(TensorError::MissingGradient { index });
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let bias1 = 1.0 - beta1.powf(self.step as f64);
        let bias2 = 1.0 - beta2.powf(self.step as f64);

        for ((param, m), v) in self
            .params
            .iter()
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            let grad = param.grad().expect("checked above");
            let mut data = param.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            drop(data);
            param.zero_grad();
        }
        Ok(())
    }
}
