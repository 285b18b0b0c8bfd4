use crate::net::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adam optimiser. Moment buffers are created lazily per parameter and frozen
/// parameters are left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the trainable gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            clip_norm,
        } = self.config;
        let scale = match clip_norm {
            Some(limit) => {
                let norm = Self::grad_norm(store);
                if norm > limit && norm.is_finite() {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if self.first.len() <= i {
                self.first.push(Vec::new());
                self.second.push(Vec::new());
            }
            if !p.trainable {
                continue;
            }
            let n = p.value.numel();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            if m.len() != n {
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for j in 0..n {
                let g = grads[j] * scale;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                values[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        store.zero_grad();
    }
}
