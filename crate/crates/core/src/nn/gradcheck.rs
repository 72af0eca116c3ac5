//! Central finite-difference oracle for analytic gradients.
//!
//! The helpers here only evaluate forward maps; they never call into
//! backpropagation, so they can check it.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Mlp;
use crate::error::Result;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences `(f(θ + e_i ε) − f(θ − e_i ε)) / 2ε` for every coordinate.
pub fn central_difference<F>(point: &[f64], eps: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Fixed output weighting used to turn a vector output into a scalar probe.
pub fn probe_weights(outputs: usize) -> Vec<f64> {
    (0..outputs).map(|j| 1.0 - 0.37 * j as f64).collect()
}

fn probe_loss(net: &Mlp, input: &[f64], weights: &[f64]) -> f64 {
    let out = net.predict(input).expect("input shape checked by caller");
    out.iter().zip(weights).map(|(y, w)| y * w).sum()
}

/// Smallest |pre-activation| over the hidden layers for `input`.
pub fn kink_margin(net: &Mlp, input: &[f64]) -> Result<f64> {
    let (_, cache) = net.forward(input)?;
    let hidden = cache.preacts.len() - 1;
    Ok(cache.preacts[..hidden]
        .iter()
        .flat_map(|z| z.iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min))
}

/// Perturbs `input` until no hidden unit sits within `margin` of a ReLU kink.
pub fn nudge_off_kinks(net: &Mlp, input: &[f64], margin: f64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b69_6e6b);
    let mut x = input.to_vec();
    for _ in 0..1000 {
        if kink_margin(net, &x)? > margin {
            return Ok(x);
        }
        for v in &mut x {
            *v += rng.random_range(-1e-2..1e-2);
        }
    }
    Ok(x)
}

/// Numeric gradient of the probe loss with respect to parameters then input.
pub fn numeric_gradient(net: &Mlp, input: &[f64], eps: f64) -> Result<Vec<f64>> {
    net.predict(input)?;
    let weights = probe_weights(net.output_dim());
    let mut probe = net.clone();
    let mut numeric = central_difference(&net.flat_params(), eps, |theta| {
        probe
            .set_flat_params(theta)
            .expect("same parameter count");
        probe_loss(&probe, input, &weights)
    });
    numeric.extend(central_difference(input, eps, |x| probe_loss(net, x, &weights)));
    Ok(numeric)
}

/// Analytic gradient of the probe loss with respect to parameters then input.
pub fn analytic_gradient(net: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    let weights = probe_weights(net.output_dim());
    let (_, cache) = net.forward(input)?;
    let out_grad = Array2::from_shape_vec((1, weights.len()), weights).expect("row shape");
    let grads = net.backward(&cache, out_grad.view())?;
    let mut flat = grads.flat_params();
    flat.extend(grads.input.iter().copied());
    Ok(flat)
}

/// Max relative error between backprop and central differences, over all
/// parameters and input coordinates.
pub fn grad_check(net: &Mlp, input: &[f64], eps: f64) -> Result<f64> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let analytic = analytic_gradient(net, input)?;
    let numeric = numeric_gradient(net, input, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputHead;

    fn random_net(sizes: &[usize], head: OutputHead, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::new(sizes, head, &mut rng).unwrap()
    }

    #[test]
    fn linear_network_exact() {
        let net = random_net(&[4, 3], OutputHead::Identity, 1);
        let err = grad_check(&net, &[0.2, -0.4, 1.5, 0.9], 1e-5).unwrap();
        assert!(err < 1e-8, "linear grad check error {err}");
    }

    #[test]
    fn relu_networks_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..5 {
            for head in [OutputHead::Identity, OutputHead::TanhScaled(1.0)] {
                let net = random_net(&[6, 16, 12, 2], head, seed);
                let raw: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let x = nudge_off_kinks(&net, &raw, 1e-3).unwrap();
                let err = grad_check(&net, &x, 1e-5).unwrap();
                assert!(err < 1e-4, "seed {seed} head {head:?} error {err}");
            }
        }
    }

    #[test]
    fn corrupted_backward_detected() {
        let net = random_net(&[5, 10, 10, 1], OutputHead::Identity, 9);
        let x = nudge_off_kinks(&net, &[0.1, 0.5, -0.3, 0.8, -0.9], 1e-3).unwrap();
        let mut analytic = analytic_gradient(&net, &x).unwrap();
        let numeric = numeric_gradient(&net, &x, 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
        let idx = analytic.iter().position(|v| v.abs() > 1e-3).unwrap();
        analytic[idx] = -analytic[idx];
        assert!(max_relative_error(&analytic, &numeric) > 1e-2);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
    }
}
