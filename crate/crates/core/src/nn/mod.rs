//! Dense feed-forward networks with exact backpropagation.
//!
//! Every layer computes `z = x Wᵀ + b`; hidden layers apply ReLU and the last
//! layer applies an [`OutputHead`]. Batches are row-major: one sample per row.
//!
//! Gradients returned by [`Mlp::backward`] are sums over the batch rows, so a
//! caller minimising a batch mean must scale the output gradient by `1/N`.

mod adam;
pub mod gradcheck;
pub mod snapshot;

pub use adam::Adam;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{ensure_dim, Error, Result};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Output non-linearity of the final layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputHead {
    Identity,
    /// `bound * tanh(z)`, keeps every output inside `[-bound, bound]`.
    TanhScaled(f64),
}

impl OutputHead {
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputHead::Identity => z,
            OutputHead::TanhScaled(bound) => bound * z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            OutputHead::Identity => 1.0,
            OutputHead::TanhScaled(bound) => {
                let t = z.tanh();
                bound * (1.0 - t * t)
            }
        }
    }
}

/// One affine layer. `weights` has shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Fully connected network with ReLU hidden layers.
#[derive(Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
    head: OutputHead,
    id: u64,
    generation: u64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            head: self.head,
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for Mlp {
    /// Structural equality on parameters and head; identity and update
    /// bookkeeping are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.head == other.head && self.layers == other.layers
    }
}

/// Activations recorded by a forward pass, enough for exact backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    generation: u64,
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    preacts: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Pre-activation values of the output layer, shape `(batch, out)`.
    pub fn output_preactivation(&self) -> &Array2<f64> {
        self.preacts.last().expect("network has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Gradients of a scalar loss with respect to every parameter and the input.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub layers: Vec<Dense>,
    /// Gradient with respect to the network input, one row per sample.
    pub input: Array2<f64>,
}

impl GradBundle {
    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
            && self.input.iter().all(|v| v.is_finite())
    }

    /// Parameter gradients flattened in [`Mlp::flat_params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Dense::param_count).sum());
    for layer in layers {
        out.extend(layer.weights.iter().copied());
        out.extend(layer.bias.iter().copied());
    }
    out
}

impl Mlp {
    /// Builds a network with uniform fan-in initialisation,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], head: OutputHead, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, head)?;
        for layer in &mut net.layers {
            let limit = 1.0 / (layer.inputs() as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            layer.weights.mapv_inplace(|_| dist.sample(rng));
            layer.bias.mapv_inplace(|_| dist.sample(rng));
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], head: OutputHead) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(
                "a network needs at least an input and an output size".into(),
            ));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if let OutputHead::TanhScaled(bound) = head {
            if !(bound.is_finite() && bound > 0.0) {
                return Err(Error::Config(format!("output bound {bound} must be > 0")));
            }
        }
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self {
            layers,
            head,
            id: fresh_id(),
            generation: 0,
        })
    }

    /// Assembles a network from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<Dense>, head: OutputHead) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            ensure_dim("layer chaining", pair[0].outputs(), pair[1].inputs())?;
        }
        for layer in &layers {
            ensure_dim("bias length", layer.outputs(), layer.bias.len())?;
        }
        let mut net = Self::zeros(&sizes_of(&layers), head)?;
        net.layers = layers;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        sizes_of(&self.layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable layer access. Bumps the generation so older caches are refused.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// All parameters, layer by layer: weights row-major, then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        ensure_dim("flat parameter vector", self.param_count(), params.len())?;
        let mut it = params.iter().copied();
        for layer in self.layers_mut() {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = it.next().expect("length checked above");
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Overwrites parameters with those of `other` (same architecture).
    pub fn copy_params_from(&mut self, other: &Mlp) -> Result<()> {
        self.check_same_shape(other)?;
        for (dst, src) in self.layers_mut().iter_mut().zip(&other.layers) {
            dst.weights.assign(&src.weights);
            dst.bias.assign(&src.bias);
        }
        Ok(())
    }

    /// `self ← polyak·online + (1 − polyak)·self`, elementwise.
    pub fn soft_update_from(&mut self, online: &Mlp, polyak: f64) -> Result<()> {
        self.check_same_shape(online)?;
        let keep = 1.0 - polyak;
        for (dst, src) in self.layers_mut().iter_mut().zip(&online.layers) {
            Zip::from(&mut dst.weights)
                .and(&src.weights)
                .for_each(|t, &o| *t = polyak * o + keep * *t);
            Zip::from(&mut dst.bias)
                .and(&src.bias)
                .for_each(|t, &o| *t = polyak * o + keep * *t);
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Mlp) -> Result<()> {
        if self.layer_sizes() != other.layer_sizes() || self.head != other.head {
            return Err(Error::Config(format!(
                "architecture mismatch: {:?}/{:?} vs {:?}/{:?}",
                self.layer_sizes(),
                self.head,
                other.layer_sizes(),
                other.head
            )));
        }
        Ok(())
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .expect("row vector shape always valid");
        let (out, cache) = self.forward_batch(x)?;
        Ok((out.into_raw_vec_and_offset().0, cache))
    }

    /// Forward pass over a batch, recording the activations.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        ensure_dim("network input", self.input_dim(), x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, current.view());
            let a = if i == last {
                z.mapv(|v| self.head.apply(v))
            } else {
                z.mapv(relu)
            };
            inputs.push(current);
            preacts.push(z);
            current = a;
        }
        let cache = ForwardCache {
            net_id: self.id,
            generation: self.generation,
            inputs,
            preacts,
        };
        Ok((current, cache))
    }

    /// Forward pass without recording activations.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure_dim("network input", self.input_dim(), x.ncols())?;
        let last = self.layers.len() - 1;
        let mut current = affine(&self.layers[0], x);
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                current = affine(layer, current.view());
            }
            if i == last {
                current.mapv_inplace(|v| self.head.apply(v));
            } else {
                current.mapv_inplace(relu);
            }
        }
        Ok(current)
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .expect("row vector shape always valid");
        Ok(self.predict_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Backpropagates `output_grad` (dL/d output) through the recorded pass.
    pub fn backward(&self, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> Result<GradBundle> {
        self.backward_with_preact(cache, output_grad, None)
    }

    /// Like [`Mlp::backward`], with an extra loss term acting directly on the
    /// output layer's pre-activations.
    pub fn backward_with_preact(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
        preact_grad: Option<ArrayView2<f64>>,
    ) -> Result<GradBundle> {
        if cache.net_id != self.id || cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        let n = cache.batch_size();
        ensure_dim("output gradient rows", n, output_grad.nrows())?;
        ensure_dim("output gradient cols", self.output_dim(), output_grad.ncols())?;

        let last = self.layers.len() - 1;
        let mut dz = output_grad.to_owned();
        Zip::from(&mut dz)
            .and(&cache.preacts[last])
            .for_each(|g, &z| *g *= self.head.derivative(z));
        if let Some(extra) = preact_grad {
            ensure_dim("pre-activation gradient rows", n, extra.nrows())?;
            ensure_dim("pre-activation gradient cols", self.output_dim(), extra.ncols())?;
            dz += &extra;
        }

        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut input_grad = Array2::zeros((0, 0));
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let weights = dz.t().dot(&cache.inputs[l]);
            let bias = dz.sum_axis(Axis(0));
            grads.push(Dense { weights, bias });
            let mut dx = dz.dot(&layer.weights);
            if l > 0 {
                Zip::from(&mut dx)
                    .and(&cache.preacts[l - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
                dz = dx;
            } else {
                input_grad = dx;
            }
        }
        grads.reverse();
        Ok(GradBundle {
            layers: grads,
            input: input_grad,
        })
    }

    /// Gradient with respect to the input only; skips parameter gradients.
    pub fn backward_input(&self, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> Result<Array2<f64>> {
        if cache.net_id != self.id || cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        ensure_dim("output gradient rows", cache.batch_size(), output_grad.nrows())?;
        ensure_dim("output gradient cols", self.output_dim(), output_grad.ncols())?;
        let last = self.layers.len() - 1;
        let mut dz = output_grad.to_owned();
        Zip::from(&mut dz)
            .and(&cache.preacts[last])
            .for_each(|g, &z| *g *= self.head.derivative(z));
        for l in (0..self.layers.len()).rev() {
            let mut dx = dz.dot(&self.layers[l].weights);
            if l == 0 {
                return Ok(dx);
            }
            Zip::from(&mut dx)
                .and(&cache.preacts[l - 1])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            dz = dx;
        }
        unreachable!("network has at least one layer")
    }
}

fn sizes_of(layers: &[Dense]) -> Vec<usize> {
    let mut sizes = vec![layers[0].inputs()];
    sizes.extend(layers.iter().map(Dense::outputs));
    sizes
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn affine(layer: &Dense, x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&layer.weights.t());
    z += &layer.bias;
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 2], OutputHead::Identity).unwrap();
        let (out, _) = net.forward(&[0.3, -1.0, 5.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let layer = Dense {
            weights: array![[2.0]],
            bias: array![1.0],
        };
        let net = Mlp::from_layers(vec![layer], OutputHead::Identity).unwrap();
        assert_eq!(net.forward(&[3.0]).unwrap().0, vec![7.0]);
    }

    #[test]
    fn tanh_head_saturates_at_bound() {
        let layer = Dense {
            weights: array![[1.0e6]],
            bias: array![0.0],
        };
        let net = Mlp::from_layers(vec![layer], OutputHead::TanhScaled(0.5)).unwrap();
        assert_eq!(net.forward(&[1.0]).unwrap().0, vec![0.5]);
        assert_eq!(net.forward(&[-1.0]).unwrap().0, vec![-0.5]);
    }

    #[test]
    fn input_dimension_checked() {
        let net = Mlp::zeros(&[3, 2], OutputHead::Identity).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_weight_grad_is_input() {
        let net = Mlp::zeros(&[3, 1], OutputHead::Identity).unwrap();
        let input = [0.5, -2.0, 4.0];
        let (_, cache) = net.forward(&input).unwrap();
        let g = net.backward(&cache, array![[1.0]].view()).unwrap();
        assert_eq!(g.layers[0].weights.row(0).to_vec(), input.to_vec());
        assert_eq!(g.layers[0].bias[0], 1.0);
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[4, 8, 8, 2], OutputHead::TanhScaled(1.0), &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let g = net.backward(&cache, Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.flat_params().iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[2, 3, 1], OutputHead::Identity, &mut rng).unwrap();
        let (_, cache) = net.forward(&[1.0, 1.0]).unwrap();
        net.layers_mut()[0].bias[0] += 1.0;
        assert!(matches!(
            net.backward(&cache, array![[1.0]].view()),
            Err(Error::StaleCache)
        ));
        let other = net.clone();
        let (_, cache) = other.forward(&[1.0, 1.0]).unwrap();
        assert!(matches!(
            net.backward(&cache, array![[1.0]].view()),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn predict_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[3, 16, 16, 2], OutputHead::TanhScaled(2.0), &mut rng).unwrap();
        let x = Array2::from_shape_fn((7, 3), |(i, j)| (i as f64 - 3.0) * 0.3 + j as f64 * 0.1);
        let (a, _) = net.forward_batch(x.view()).unwrap();
        let b = net.predict_batch(x.view()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn input_only_backward_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Mlp::new(&[5, 9, 7, 1], OutputHead::Identity, &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64 * 0.05 - 0.4);
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let g = Array2::from_elem((4, 1), -0.25);
        let full = net.backward(&cache, g.view()).unwrap();
        assert_eq!(net.backward_input(&cache, g.view()).unwrap(), full.input);
    }

    #[test]
    fn soft_update_mixing_rule() {
        let online = Mlp::from_layers(
            vec![Dense {
                weights: array![[1.0]],
                bias: array![1.0],
            }],
            OutputHead::Identity,
        )
        .unwrap();
        let mut target = Mlp::zeros(&[1, 1], OutputHead::Identity).unwrap();
        target.soft_update_from(&online, 0.005).unwrap();
        assert_eq!(target.layers()[0].weights[[0, 0]], 0.005);
        let before = target.clone();
        target.soft_update_from(&online, 0.0).unwrap();
        assert_eq!(target, before);
        target.soft_update_from(&online, 1.0).unwrap();
        assert_eq!(target, online);
    }
}
