use crate::model::ModelParams;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are allocated lazily on the
/// first step to match the parameter layout.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` must have the length of tensor `i`.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Vec<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per tensor");
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let lr = T::from_f64(c.lr);
        let decay = T::from_f64(1.0 - c.lr * c.weight_decay);
        let eps = T::from_f64(c.eps);

        for (((tensor, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            assert_eq!(tensor.len(), g.len(), "gradient length");
            for (((w, &g), m), v) in tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn single(values: &[f64]) -> ModelParams<f64> {
        // smallest valid layout; only the first tensor is inspected
        let cfg = ModelConfig {
            d_in: 1,
            d_model: 2,
            n_heads: 1,
            n_layers: 1,
            d_ff: 1,
            window: 1,
            n_classes: 2,
            ..ModelConfig::default()
        };
        let named = cfg
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                let data = if i == 0 { values.to_vec() } else { vec![0.5; n] };
                (name, Tensor::new(shape, data).unwrap())
            })
            .collect();
        ModelParams::from_named(&cfg, named).unwrap()
    }

    fn zero_grads(p: &ModelParams<f64>) -> Vec<Vec<f64>> {
        p.tensors().iter().map(|t| vec![0.0; t.len()]).collect()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = single(&[0.3, -1.2]);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let g = zero_grads(&p);
        for _ in 0..3 {
            opt.step(&mut p, &g);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = single(&[0.3, -1.2]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut g = zero_grads(&p);
        g[0] = vec![250.0, -0.004];
        opt.step(&mut p, &g);
        let w = p.tensors()[0].data();
        assert!((w[0] - (0.3 - 1e-3)).abs() < 1e-12);
        // |g| = 0.004 is not negligible against eps = 1e-8 only at the 1e-6 relative level
        assert!((w[1] - (-1.2 + 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = single(&[2.0, -4.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let g = zero_grads(&p);
        opt.step(&mut p, &g);
        let w = p.tensors()[0].data();
        assert_eq!(w[0], 2.0 * (1.0 - 1e-3 * 0.01));
        assert_eq!(w[1], -4.0 * (1.0 - 1e-3 * 0.01));
    }

    #[test]
    fn bias_correction_keeps_constant_gradient_steps_at_lr() {
        let mut p = single(&[0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut g = zero_grads(&p);
        g[0] = vec![0.7, 0.7];
        for k in 1..=5 {
            opt.step(&mut p, &g);
            assert!((p.tensors()[0].data()[0] + k as f64 * 1e-3).abs() < 1e-10);
        }
        assert_eq!(opt.steps_taken(), 5);
    }
}
