use ndarray::Zip;

use super::{Dense, GradBundle, Mlp};
use crate::error::{ensure_dim, Error, Result};

/// Bias-corrected Adam state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Dense>,
    second: Vec<Dense>,
}

impl Adam {
    /// Adam with the usual defaults (0.9, 0.999, 1e-8).
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        Self::with_betas(net, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(net: &Mlp, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Dense> = net
            .layers()
            .iter()
            .map(|l| Dense::zeros(l.inputs(), l.outputs()))
            .collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Dense] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Dense] {
        &self.second
    }

    /// Applies one update. Non-finite gradients abort before anything changes.
    pub fn step(&mut self, net: &mut Mlp, grads: &GradBundle) -> Result<()> {
        ensure_dim("adam layer count", self.first.len(), grads.layers.len())?;
        ensure_dim("adam layer count", net.layers().len(), grads.layers.len())?;
        for (m, g) in self.first.iter().zip(&grads.layers) {
            if m.weights.dim() != g.weights.dim() || m.bias.len() != g.bias.len() {
                return Err(Error::Config("adam state does not match gradient shapes".into()));
            }
        }
        if !grads
            .layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "gradient at adam step {} contains NaN/Inf",
                self.step + 1
            )));
        }

        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.learning_rate;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, &g: &f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };

        let layers = net.layers_mut();
        for (((layer, m), v), g) in layers
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
            .zip(&grads.layers)
        {
            Zip::from(&mut layer.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .and(&g.weights)
                .for_each(update);
            Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(update);
        }
        if !net.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after adam step {}",
                self.step
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputHead;
    use ndarray::{array, Array2};

    fn scalar_net(w: f64) -> Mlp {
        Mlp::from_layers(
            vec![Dense {
                weights: array![[w]],
                bias: array![0.0],
            }],
            OutputHead::Identity,
        )
        .unwrap()
    }

    fn grads(w: f64, b: f64) -> GradBundle {
        GradBundle {
            layers: vec![Dense {
                weights: array![[w]],
                bias: array![b],
            }],
            input: Array2::zeros((1, 1)),
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut net = scalar_net(0.0);
        let mut adam = Adam::new(&net, 0.001);
        adam.step(&mut net, &grads(1.0, 0.0)).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
        let delta = net.layers()[0].weights[[0, 0]];
        assert!((delta + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut net = scalar_net(0.7);
        let mut adam = Adam::new(&net, 0.001);
        adam.step(&mut net, &grads(1.0, 1.0)).unwrap();
        let after_first = net.flat_params();
        let m_before = adam.first_moments()[0].weights[[0, 0]];
        adam.step(&mut net, &grads(0.0, 0.0)).unwrap();
        let m_after = adam.first_moments()[0].weights[[0, 0]];
        assert!(m_after.abs() < m_before.abs());
        // bias-corrected moment still nonzero after one real step, so only a
        // fresh state is exactly stationary
        let mut fresh = scalar_net(0.7);
        let mut adam2 = Adam::new(&fresh, 0.001);
        adam2.step(&mut fresh, &grads(0.0, 0.0)).unwrap();
        assert_eq!(fresh.flat_params(), vec![0.7, 0.0]);
        assert_ne!(after_first, vec![0.7, 0.0]);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut net = scalar_net(0.3);
        let mut adam = Adam::new(&net, 0.001);
        let err = adam.step(&mut net, &grads(f64::NAN, 0.0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(net.flat_params(), vec![0.3, 0.0]);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut net = scalar_net(0.3);
            let mut adam = Adam::new(&net, 0.01);
            for i in 0..5 {
                adam.step(&mut net, &grads(i as f64 - 2.0, 0.5)).unwrap();
            }
            net.flat_params()
        };
        assert_eq!(run(), run());
    }
}
