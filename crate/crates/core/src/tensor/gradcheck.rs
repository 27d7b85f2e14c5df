use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Layer, LayerSpec, Reduction, Tensor};
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;

/// Kinked activations are evaluated at least this far from their kink.
const KINK_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_input_error: f64,
    pub max_param_error: f64,
    pub checked: usize,
}

/// Compares the analytic backward pass of one layer against central finite
/// differences with step `1e-5`, over every input and parameter entry.
pub fn grad_check(spec: &LayerSpec, input_shape: &[usize], seed: u64) -> Result<GradCheckReport> {
    grad_check_with(spec, input_shape, seed, DEFAULT_STEP)
}

pub fn grad_check_with(spec: &LayerSpec, input_shape: &[usize], seed: u64, h: f64) -> Result<GradCheckReport> {
    if !(h > 0.0) || input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::arg(format!(
            "invalid gradient check setup: shape {input_shape:?}, step {h}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer: Layer<f64> = spec.build("check", &mut rng)?;
    for p in layer.params_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let kinked = matches!(spec, LayerSpec::Relu | LayerSpec::LeakyRelu { .. });
    let n: usize = input_shape.iter().product();
    let x_data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if kinked && v.abs() < KINK_MARGIN {
                v.signum() * KINK_MARGIN + v
            } else {
                v
            }
        })
        .collect();
    let mut x = Tensor::from_vec(input_shape, x_data)?;

    let y = layer.forward(&x, true)?;
    let r = Tensor::from_vec(y.shape(), (0..y.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    layer.params_mut().into_iter().for_each(|p| p.zero_grad());
    let dx = layer
        .backward(&r, &mut Reduction::Sum, true)?
        .ok_or_else(|| Error::Training("layer returned no input gradient".into()))?;
    let analytic_params: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.clone()).collect();

    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_input_error: 0.0,
        max_param_error: 0.0,
        checked: 0,
    };

    for i in 0..n {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = layer.forward(&x, true)?.dot(&r);
        x.data_mut()[i] = orig - h;
        let down = layer.forward(&x, true)?.dot(&r);
        x.data_mut()[i] = orig;
        let e = rel(dx.data()[i], (up - down) / (2.0 * h));
        report.max_input_error = report.max_input_error.max(e);
        report.checked += 1;
    }

    for (pi, analytic) in analytic_params.iter().enumerate() {
        for j in 0..analytic.len() {
            let orig = layer.params()[pi].value.data()[j];
            layer.params_mut()[pi].value.data_mut()[j] = orig + h;
            let up = layer.forward(&x, true)?.dot(&r);
            layer.params_mut()[pi].value.data_mut()[j] = orig - h;
            let down = layer.forward(&x, true)?.dot(&r);
            layer.params_mut()[pi].value.data_mut()[j] = orig;
            let e = rel(analytic[j], (up - down) / (2.0 * h));
            report.max_param_error = report.max_param_error.max(e);
            report.checked += 1;
        }
    }
    report.max_rel_error = report.max_input_error.max(report.max_param_error);
    Ok(report)
}

/// One representative configuration of every layer kind, with an input shape.
pub fn standard_suite() -> Vec<(&'static str, LayerSpec, Vec<usize>)> {
    vec![
        (
            "linear",
            LayerSpec::Linear {
                in_features: 6,
                out_features: 4,
            },
            vec![3, 6],
        ),
        (
            "conv2d",
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 4,
                stride: 2,
                padding: 1,
            },
            vec![2, 2, 6, 6],
        ),
        (
            "conv2d_k3",
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 0,
            },
            vec![2, 3, 5, 5],
        ),
        (
            "conv_transpose2d",
            LayerSpec::ConvTranspose2d {
                in_channels: 3,
                out_channels: 2,
                kernel: 4,
                stride: 2,
                padding: 1,
            },
            vec![2, 3, 3, 3],
        ),
        (
            "conv_transpose2d_k3",
            LayerSpec::ConvTranspose2d {
                in_channels: 4,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 0,
            },
            vec![2, 4, 1, 1],
        ),
        ("batch_norm", LayerSpec::batch_norm(3), vec![4, 3, 2, 2]),
        (
            "group_norm",
            LayerSpec::GroupNorm {
                channels: 4,
                groups: 2,
                eps: 1e-5,
            },
            vec![2, 4, 3, 3],
        ),
        ("relu", LayerSpec::Relu, vec![3, 8]),
        ("leaky_relu", LayerSpec::LeakyRelu { negative_slope: 0.2 }, vec![3, 8]),
        ("sigmoid", LayerSpec::Sigmoid, vec![3, 8]),
        ("tanh", LayerSpec::Tanh, vec![3, 8]),
        ("reshape", LayerSpec::Reshape { shape: vec![2, 2, 2] }, vec![3, 8]),
    ]
}

/// Runs [`grad_check`] over [`standard_suite`].
pub fn run_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    standard_suite()
        .into_iter()
        .map(|(name, spec, shape)| Ok((name, grad_check(&spec, &shape, seed)?)))
        .collect()
}

/// Largest `|<conv(x), r> - <x, conv_t(r)>|` over a few random geometries.
pub fn adjointness_gap(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::<f64>::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let mut gap: f64 = 0.0;
    for (h, k, s, p) in [(8, 4, 2, 1), (6, 3, 1, 1), (6, 4, 2, 1), (5, 3, 1, 0), (24, 4, 2, 1)] {
        let x = random(&[2, 3, h, h])?;
        let w = random(&[4, 3, k, k])?;
        let y = super::conv2d_forward(&x, &w, None, s, p)?;
        let r = random(y.shape())?;
        let back = super::conv_transpose2d_forward(&r, &w, None, s, p)?;
        if back.shape() != x.shape() {
            return Err(Error::Shape {
                op: "adjointness",
                expected: x.shape().to_vec(),
                actual: back.shape().to_vec(),
            });
        }
        gap = gap.max((y.dot(&r) - x.dot(&back)).abs());
    }
    Ok(gap)
}
