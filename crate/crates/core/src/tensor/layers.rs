use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{col2im, im2col, transpose_geometry, Conv2dGeometry};
use super::{gemm, Param, Reduction, Scalar, Tensor};
use crate::error::{Error, Result};

/// Standard deviation of the DCGAN weight initialisation.
pub const INIT_STD: f64 = 0.02;
const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
    },
    GroupNorm {
        channels: usize,
        groups: usize,
        eps: f64,
    },
    Relu,
    LeakyRelu {
        negative_slope: f64,
    },
    Sigmoid,
    Tanh,
    /// Reinterprets each sample with a new (non-batch) shape.
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    /// Group norm with `min(32, channels)` groups, reduced until it divides `channels`.
    pub fn group_norm(channels: usize) -> Self {
        let mut groups = channels.clamp(1, 32);
        while !channels.is_multiple_of(groups) {
            groups -= 1;
        }
        LayerSpec::GroupNorm {
            channels,
            groups,
            eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            }
            | LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return bad(format!("invalid convolution {self:?}"));
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return bad(format!("invalid linear layer {self:?}"));
                }
            }
            LayerSpec::BatchNorm { channels, eps } => {
                if channels == 0 || !(eps > 0.0) {
                    return bad(format!("invalid batch norm {self:?}"));
                }
            }
            LayerSpec::GroupNorm { channels, groups, eps } => {
                if channels == 0 || groups == 0 || channels % groups != 0 || !(eps > 0.0) {
                    return bad(format!("invalid group norm {self:?}"));
                }
            }
            LayerSpec::LeakyRelu { negative_slope } => {
                if !negative_slope.is_finite() {
                    return bad("leaky relu slope must be finite".into());
                }
            }
            LayerSpec::Reshape { ref shape } => {
                if shape.is_empty() || shape.contains(&0) {
                    return bad(format!("invalid reshape {shape:?}"));
                }
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Tanh => {}
        }
        Ok(())
    }

    /// Instantiates the layer. Weights are drawn from `N(0, 0.02)`, norm
    /// scales from `N(1, 0.02)`; biases and shifts start at zero.
    pub fn build<T: Scalar>(&self, name: &str, rng: &mut impl Rng) -> Result<Layer<T>> {
        self.validate()?;
        let normal = |shape: &[usize], mean: f64, rng: &mut dyn rand::RngCore| {
            let dist = Normal::new(mean, INIT_STD).expect("valid normal");
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()).expect("shape matches")
        };
        let p = |suffix: &str, t: Tensor<T>| Param::new(format!("{name}.{suffix}"), t);
        Ok(match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d {
                weight: p("weight", normal(&[out_channels, in_channels, kernel, kernel], 0.0, rng)),
                bias: p("bias", Tensor::zeros(&[out_channels])),
                stride,
                padding,
                input: None,
            }),
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::ConvTranspose2d(ConvTranspose2d {
                weight: p("weight", normal(&[in_channels, out_channels, kernel, kernel], 0.0, rng)),
                bias: p("bias", Tensor::zeros(&[out_channels])),
                stride,
                padding,
                input: None,
            }),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Layer::Linear(Linear {
                weight: p("weight", normal(&[out_features, in_features], 0.0, rng)),
                bias: p("bias", Tensor::zeros(&[out_features])),
                input: None,
            }),
            LayerSpec::BatchNorm { channels, eps } => Layer::BatchNorm(BatchNorm {
                gamma: p("weight", normal(&[channels], 1.0, rng)),
                beta: p("bias", Tensor::zeros(&[channels])),
                running_mean: Tensor::zeros(&[channels]),
                running_var: Tensor::from_vec(&[channels], vec![T::one(); channels])?,
                eps,
                cache: None,
            }),
            LayerSpec::GroupNorm { channels, groups, eps } => Layer::GroupNorm(GroupNorm {
                gamma: p("weight", normal(&[channels], 1.0, rng)),
                beta: p("bias", Tensor::zeros(&[channels])),
                groups,
                eps,
                cache: None,
            }),
            LayerSpec::Relu => Layer::Activation(Activation::new(ActKind::Relu)),
            LayerSpec::LeakyRelu { negative_slope } => {
                Layer::Activation(Activation::new(ActKind::LeakyRelu(negative_slope)))
            }
            LayerSpec::Sigmoid => Layer::Activation(Activation::new(ActKind::Sigmoid)),
            LayerSpec::Tanh => Layer::Activation(Activation::new(ActKind::Tanh)),
            LayerSpec::Reshape { ref shape } => Layer::Reshape {
                shape: shape.clone(),
                input_shape: None,
            },
        })
    }
}

fn shape_err(op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

fn check_grad<T: Scalar>(op: &'static str, dy: &Tensor<T>, expected: &[usize]) -> Result<()> {
    if dy.shape() != expected {
        return Err(shape_err(op, expected, dy.shape()));
    }
    Ok(())
}

fn not_forwarded(op: &str) -> Error {
    Error::Training(format!("{op}: backward called before forward"))
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    stride: usize,
    padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    fn geometry(&self, x_shape: &[usize]) -> Result<Conv2dGeometry> {
        let k = self.weight.value.dim(2);
        Conv2dGeometry::new(x_shape[1], x_shape[2], x_shape[3], k, self.stride, self.padding)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = super::conv2d_forward(x, &self.weight.value, Some(&self.bias.value), self.stride, self.padding)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>, red: &mut Reduction, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let x = self.input.as_ref().ok_or_else(|| not_forwarded("conv2d"))?;
        let g = self.geometry(x.shape())?;
        let (batch, cout) = (x.dim(0), self.weight.value.dim(0));
        check_grad("conv2d backward", dy, &[batch, cout, g.out_h, g.out_w])?;
        let (rows, n_out) = (g.col_rows(), g.col_cols());
        let mut cols = vec![T::zero(); rows * n_out];
        let mut dw = vec![T::zero(); cout * rows];
        let mut db = vec![T::zero(); cout];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let mut dcols = vec![T::zero(); if need_dx { rows * n_out } else { 0 }];
        let in_len = x.sample_len();
        for b in 0..batch {
            let dy_b = dy.sample(b);
            if red.wants_params() {
                im2col(x.sample(b), &g, &mut cols);
                gemm(false, true, cout, rows, n_out, dy_b, &cols, T::zero(), &mut dw);
                for (d, plane) in db.iter_mut().zip(dy_b.chunks_exact(n_out)) {
                    *d = plane.iter().copied().sum();
                }
                red.push(&mut self.weight.grad, b, &dw);
                red.push(&mut self.bias.grad, b, &db);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    true,
                    false,
                    rows,
                    n_out,
                    cout,
                    self.weight.value.data(),
                    dy_b,
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, &g, &mut dx.data_mut()[b * in_len..(b + 1) * in_len]);
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    stride: usize,
    padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y =
            super::conv_transpose2d_forward(x, &self.weight.value, Some(&self.bias.value), self.stride, self.padding)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>, red: &mut Reduction, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let x = self.input.as_ref().ok_or_else(|| not_forwarded("conv_transpose2d"))?;
        let (batch, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, k) = (self.weight.value.dim(1), self.weight.value.dim(2));
        let g = transpose_geometry(cout, h, w, k, self.stride, self.padding)?;
        check_grad("conv_transpose2d backward", dy, &[batch, cout, g.h, g.w])?;
        let (rows, hw) = (g.col_rows(), h * w);
        let mut dcols = vec![T::zero(); rows * hw];
        let mut dw = vec![T::zero(); cin * rows];
        let mut db = vec![T::zero(); cout];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let plane = g.h * g.w;
        for b in 0..batch {
            let dy_b = dy.sample(b);
            im2col(dy_b, &g, &mut dcols);
            if red.wants_params() {
                gemm(false, true, cin, rows, hw, x.sample(b), &dcols, T::zero(), &mut dw);
                for (d, p) in db.iter_mut().zip(dy_b.chunks_exact(plane)) {
                    *d = p.iter().copied().sum();
                }
                red.push(&mut self.weight.grad, b, &dw);
                red.push(&mut self.bias.grad, b, &db);
            }
            if let Some(dx) = dx.as_mut() {
                let out = &mut dx.data_mut()[b * cin * hw..(b + 1) * cin * hw];
                gemm(
                    false,
                    false,
                    cin,
                    hw,
                    rows,
                    self.weight.value.data(),
                    &dcols,
                    T::zero(),
                    out,
                );
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out_f, in_f) = (self.weight.value.dim(0), self.weight.value.dim(1));
        if x.shape().len() != 2 || x.dim(1) != in_f {
            return Err(shape_err(
                "linear",
                &[x.shape().first().copied().unwrap_or(0), in_f],
                x.shape(),
            ));
        }
        let batch = x.dim(0);
        let mut y = Tensor::zeros(&[batch, out_f]);
        gemm(
            false,
            true,
            batch,
            out_f,
            in_f,
            x.data(),
            self.weight.value.data(),
            T::zero(),
            y.data_mut(),
        );
        for row in y.data_mut().chunks_exact_mut(out_f) {
            for (v, b) in row.iter_mut().zip(self.bias.value.data()) {
                *v += *b;
            }
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>, red: &mut Reduction, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let x = self.input.as_ref().ok_or_else(|| not_forwarded("linear"))?;
        let (out_f, in_f) = (self.weight.value.dim(0), self.weight.value.dim(1));
        let batch = x.dim(0);
        check_grad("linear backward", dy, &[batch, out_f])?;
        if red.wants_params() {
            let mut dw = vec![T::zero(); out_f * in_f];
            for b in 0..batch {
                let (dy_b, x_b) = (dy.sample(b), x.sample(b));
                for (row, &d) in dw.chunks_exact_mut(in_f).zip(dy_b) {
                    for (w, &xv) in row.iter_mut().zip(x_b) {
                        *w = d * xv;
                    }
                }
                red.push(&mut self.weight.grad, b, &dw);
                red.push(&mut self.bias.grad, b, dy_b);
            }
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dx = Tensor::zeros(&[batch, in_f]);
        gemm(
            false,
            false,
            batch,
            in_f,
            out_f,
            dy.data(),
            self.weight.value.data(),
            T::zero(),
            dx.data_mut(),
        );
        Ok(Some(dx))
    }
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    xhat: Tensor<T>,
    /// Inverse standard deviation per channel (batch norm) or per
    /// (sample, group) (group norm).
    inv_std: Vec<f64>,
    train: bool,
}

/// Batch normalisation over all dimensions except the channel axis.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    eps: f64,
    cache: Option<NormCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    fn dims(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let c = self.gamma.value.numel();
        if x.shape().len() < 2 || x.dim(1) != c {
            return Err(shape_err("batch_norm", &[0, c], x.shape()));
        }
        Ok((x.dim(0), c, x.shape()[2..].iter().product()))
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let (batch, c, s) = self.dims(x)?;
        let n = (batch * s) as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        let mut y = Tensor::zeros(x.shape());
        for ch in 0..c {
            let idx = |b: usize| (b * c + ch) * s..(b * c + ch + 1) * s;
            let (mean, var) = if train {
                let mean = (0..batch)
                    .flat_map(|b| &x.data()[idx(b)])
                    .map(|v| v.as_f64())
                    .sum::<f64>()
                    / n;
                let var = (0..batch)
                    .flat_map(|b| &x.data()[idx(b)])
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = T::from_f64((1.0 - BN_MOMENTUM) * rm.as_f64() + BN_MOMENTUM * mean);
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = T::from_f64((1.0 - BN_MOMENTUM) * rv.as_f64() + BN_MOMENTUM * unbiased);
                (mean, var)
            } else {
                (
                    self.running_mean.data()[ch].as_f64(),
                    self.running_var.data()[ch].as_f64(),
                )
            };
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = is;
            let (gm, bt) = (
                self.gamma.value.data()[ch].as_f64(),
                self.beta.value.data()[ch].as_f64(),
            );
            for b in 0..batch {
                for i in idx(b) {
                    let h = (x.data()[i].as_f64() - mean) * is;
                    xhat.data_mut()[i] = T::from_f64(h);
                    y.data_mut()[i] = T::from_f64(h * gm + bt);
                }
            }
        }
        self.cache = Some(NormCache { xhat, inv_std, train });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>, red: &mut Reduction, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let cache = self.cache.as_ref().ok_or_else(|| not_forwarded("batch_norm"))?;
        let xhat = &cache.xhat;
        check_grad("batch_norm backward", dy, xhat.shape())?;
        let (batch, c, s) = self.dims(xhat)?;
        if red.wants_params() {
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for b in 0..batch {
                for ch in 0..c {
                    let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                    let (dyv, xh) = (&dy.data()[r.clone()], &xhat.data()[r]);
                    dg[ch] = dyv.iter().zip(xh).map(|(&d, &h)| d * h).sum();
                    db[ch] = dyv.iter().copied().sum();
                }
                red.push(&mut self.gamma.grad, b, &dg);
                red.push(&mut self.beta.grad, b, &db);
            }
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dx = Tensor::zeros(xhat.shape());
        let n = (batch * s) as f64;
        for ch in 0..c {
            let gm = self.gamma.value.data()[ch].as_f64();
            let is = cache.inv_std[ch];
            let idx = |b: usize| (b * c + ch) * s..(b * c + ch + 1) * s;
            if !cache.train {
                for b in 0..batch {
                    for i in idx(b) {
                        dx.data_mut()[i] = T::from_f64(dy.data()[i].as_f64() * gm * is);
                    }
                }
                continue;
            }
            let (mut s1, mut s2) = (0.0, 0.0);
            for b in 0..batch {
                for i in idx(b) {
                    let d = dy.data()[i].as_f64() * gm;
                    s1 += d;
                    s2 += d * xhat.data()[i].as_f64();
                }
            }
            for b in 0..batch {
                for i in idx(b) {
                    let d = dy.data()[i].as_f64() * gm;
                    let h = xhat.data()[i].as_f64();
                    dx.data_mut()[i] = T::from_f64(is / n * (n * d - s1 - h * s2));
                }
            }
        }
        Ok(Some(dx))
    }
}

/// Group normalisation: statistics per sample over groups of channels.
#[derive(Debug, Clone)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    groups: usize,
    eps: f64,
    cache: Option<NormCache<T>>,
}

impl<T: Scalar> GroupNorm<T> {
    fn dims(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let c = self.gamma.value.numel();
        if x.shape().len() < 2 || x.dim(1) != c {
            return Err(shape_err("group_norm", &[0, c], x.shape()));
        }
        Ok((x.dim(0), c, x.shape()[2..].iter().product()))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, c, s) = self.dims(x)?;
        let cpg = c / self.groups;
        let span = cpg * s;
        let n = span as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; batch * self.groups];
        for b in 0..batch {
            for g in 0..self.groups {
                let start = (b * c + g * cpg) * s;
                let vals = &x.data()[start..start + span];
                let mean = vals.iter().map(|v| v.as_f64()).sum::<f64>() / n;
                let var = vals.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std[b * self.groups + g] = is;
                for i in 0..span {
                    let ch = g * cpg + i / s;
                    let h = (vals[i].as_f64() - mean) * is;
                    xhat.data_mut()[start + i] = T::from_f64(h);
                    let out = h * self.gamma.value.data()[ch].as_f64() + self.beta.value.data()[ch].as_f64();
                    y.data_mut()[start + i] = T::from_f64(out);
                }
            }
        }
        self.cache = Some(NormCache {
            xhat,
            inv_std,
            train: true,
        });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>, red: &mut Reduction, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let cache = self.cache.as_ref().ok_or_else(|| not_forwarded("group_norm"))?;
        let xhat = &cache.xhat;
        check_grad("group_norm backward", dy, xhat.shape())?;
        let (batch, c, s) = self.dims(xhat)?;
        let cpg = c / self.groups;
        let span = cpg * s;
        let n = span as f64;
        let mut dx = need_dx.then(|| Tensor::zeros(xhat.shape()));
        let mut dg = vec![T::zero(); c];
        let mut db = vec![T::zero(); c];
        for b in 0..batch {
            if red.wants_params() {
                for ch in 0..c {
                    let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                    let (dyv, xh) = (&dy.data()[r.clone()], &xhat.data()[r]);
                    dg[ch] = dyv.iter().zip(xh).map(|(&d, &h)| d * h).sum();
                    db[ch] = dyv.iter().copied().sum();
                }
                red.push(&mut self.gamma.grad, b, &dg);
                red.push(&mut self.beta.grad, b, &db);
            }
            let Some(dx) = dx.as_mut() else { continue };
            for g in 0..self.groups {
                let start = (b * c + g * cpg) * s;
                let is = cache.inv_std[b * self.groups + g];
                let dxhat =
                    |i: usize| dy.data()[start + i].as_f64() * self.gamma.value.data()[g * cpg + i / s].as_f64();
                let (mut s1, mut s2) = (0.0, 0.0);
                for i in 0..span {
                    let d = dxhat(i);
                    s1 += d;
                    s2 += d * xhat.data()[start + i].as_f64();
                }
                for i in 0..span {
                    let h = xhat.data()[start + i].as_f64();
                    dx.data_mut()[start + i] = T::from_f64(is / n * (n * dxhat(i) - s1 - h * s2));
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActKind {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone)]
pub struct Activation<T> {
    kind: ActKind,
    /// Input for (leaky) ReLU, output for sigmoid and tanh.
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Activation<T> {
    fn new(kind: ActKind) -> Self {
        Activation { kind, cache: None }
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        let f: Box<dyn Fn(T) -> T> = match self.kind {
            ActKind::Relu => Box::new(|v: T| v.max(T::zero())),
            ActKind::LeakyRelu(a) => {
                let a = T::from_f64(a);
                Box::new(move |v: T| if v > T::zero() { v } else { v * a })
            }
            ActKind::Sigmoid => Box::new(|v: T| {
                // branch on sign to avoid overflow of exp
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            }),
            ActKind::Tanh => Box::new(|v: T| v.tanh()),
        };
        y.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.cache = Some(match self.kind {
            ActKind::Relu | ActKind::LeakyRelu(_) => x.clone(),
            ActKind::Sigmoid | ActKind::Tanh => y.clone(),
        });
        y
    }

    fn backward(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.cache.as_ref().ok_or_else(|| not_forwarded("activation"))?;
        check_grad("activation backward", dy, c.shape())?;
        let mut dx = dy.clone();
        let (one, zero) = (T::one(), T::zero());
        for (d, &v) in dx.data_mut().iter_mut().zip(c.data()) {
            *d = *d
                * match self.kind {
                    ActKind::Relu => {
                        if v > zero {
                            one
                        } else {
                            zero
                        }
                    }
                    ActKind::LeakyRelu(a) => {
                        if v > zero {
                            one
                        } else {
                            T::from_f64(a)
                        }
                    }
                    ActKind::Sigmoid => v * (one - v),
                    ActKind::Tanh => one - v * v,
                };
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    ConvTranspose2d(ConvTranspose2d<T>),
    Linear(Linear<T>),
    BatchNorm(BatchNorm<T>),
    GroupNorm(GroupNorm<T>),
    Activation(Activation<T>),
    Reshape {
        shape: Vec<usize>,
        input_shape: Option<Vec<usize>>,
    },
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::ConvTranspose2d(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, train),
            Layer::GroupNorm(l) => l.forward(x),
            Layer::Activation(l) => Ok(l.forward(x)),
            Layer::Reshape { shape, input_shape } => {
                let mut full = vec![x.dim(0)];
                full.extend_from_slice(shape);
                *input_shape = Some(x.shape().to_vec());
                x.clone().reshape(&full)
            }
        }
    }

    /// Propagates `dy` back through the layer, feeding parameter gradients
    /// into `red`. Returns the input gradient when `need_dx` is set.
    pub fn backward(&mut self, dy: &Tensor<T>, red: &mut Reduction, need_dx: bool) -> Result<Option<Tensor<T>>> {
        match self {
            Layer::Conv2d(l) => l.backward(dy, red, need_dx),
            Layer::ConvTranspose2d(l) => l.backward(dy, red, need_dx),
            Layer::Linear(l) => l.backward(dy, red, need_dx),
            Layer::BatchNorm(l) => l.backward(dy, red, need_dx),
            Layer::GroupNorm(l) => l.backward(dy, red, need_dx),
            Layer::Activation(l) => Ok(need_dx.then(|| l.backward(dy)).transpose()?),
            Layer::Reshape { input_shape, .. } => {
                let s = input_shape.as_ref().ok_or_else(|| not_forwarded("reshape"))?;
                Ok(need_dx.then(|| dy.clone().reshape(s)).transpose()?)
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::ConvTranspose2d(l) => vec![&l.weight, &l.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::GroupNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Activation(_) | Layer::Reshape { .. } => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ConvTranspose2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::GroupNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Activation(_) | Layer::Reshape { .. } => vec![],
        }
    }

    /// Non-trainable state saved with checkpoints.
    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            _ => vec![],
        }
    }
}

/// A feed-forward stack of layers.
#[derive(Debug, Clone)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
    names: Vec<String>,
}

impl<T: Scalar> Sequential<T> {
    pub fn build(specs: &[LayerSpec], prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            layers.push(spec.build(&name, rng)?);
            names.push(name);
        }
        Ok(Sequential { layers, names })
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, train)?;
        }
        Ok(h)
    }

    /// Backpropagates from the cached forward pass. Can be called repeatedly
    /// with different reductions.
    pub fn backward(
        &mut self,
        dy: &Tensor<T>,
        red: &mut Reduction,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut g = dy.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let need = i > 0 || need_input_grad;
            match layer.backward(&g, red, need)? {
                Some(dx) => g = dx,
                None => {
                    debug_assert!(i == 0 || n == 0);
                    return Ok(None);
                }
            }
        }
        Ok(Some(g))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Named buffers (e.g. batch-norm running statistics).
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .zip(&self.names)
            .flat_map(|(l, name)| {
                l.buffers_mut()
                    .into_iter()
                    .map(move |(n, t)| (format!("{name}.{n}"), t))
            })
            .collect()
    }

    /// Parameter and buffer tensors by name, for checkpointing.
    pub fn named_tensors(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        out.extend(self.buffers_mut().into_iter().map(|(n, t)| (n, t.clone())));
        out
    }

    /// Overwrites parameters and buffers from named tensors; every name must
    /// be present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let assign = |name: &str, dst: &mut Tensor<T>| -> Result<()> {
            let src = lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
            Ok(())
        };
        for p in self.layers.iter_mut().flat_map(Layer::params_mut) {
            assign(&p.name.clone(), &mut p.value)?;
        }
        for (name, t) in self.buffers_mut() {
            assign(&name, t)?;
        }
        Ok(())
    }
}
