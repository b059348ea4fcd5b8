use crate::{Parameter, Scalar, Tensor};

/// Adam hyperparameters. Weight decay is L2-coupled: it is added to the raw
/// gradient before the moment updates, not applied to the weights directly.
#[derive(Copy, Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

struct Moments<T: Scalar> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Adam state over a fixed parameter list. One `step` per minibatch:
///
/// ```text
/// g  = grad + weight_decay * value
/// m  = b1 * m + (1 - b1) * g        v  = b2 * v + (1 - b2) * g^2
/// t += 1
/// value -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
pub struct Adam<T: Scalar> {
    config: AdamConfig,
    moments: Vec<Moments<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Parameter<T>]) -> Self {
        let moments = params
            .iter()
            .map(|p| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            })
            .collect();
        Adam {
            config,
            moments,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Consume `grad` on every parameter and update its value in place.
    pub fn step(&mut self, params: &mut [Parameter<T>]) {
        assert_eq!(params.len(), self.moments.len(), "parameter list changed");
        self.t += 1;
        let lr = T::from_f64(self.config.lr);
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let eps = T::from_f64(self.config.eps);
        let wd = T::from_f64(self.config.weight_decay);
        let one = T::one();
        let bc1 = one - T::from_f64(self.config.beta1.powi(self.t as i32));
        let bc2 = one - T::from_f64(self.config.beta2.powi(self.t as i32));

        for (param, mom) in params.iter_mut().zip(self.moments.iter_mut()) {
            let value = param.value.data_mut();
            let grad = param.grad.data();
            let m = mom.m.data_mut();
            let v = mom.v.data_mut();
            for i in 0..value.len() {
                let g = grad[i] + wd * value[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
