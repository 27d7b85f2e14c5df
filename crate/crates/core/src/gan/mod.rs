//! DCGAN-shaped generator and discriminator for 24x24x4 trajectory grids,
//! their losses, and the training loop.
//!
//! Both networks follow the usual DCGAN recipe: strided convolutions instead
//! of pooling, normalisation layers, ReLU in the generator and LeakyReLU in
//! the discriminator, a sigmoid output on the generator, and no hidden
//! fully-connected layers. The channel ladder is `c, 2c, 4c` with `c =
//! base_channels` (64 by default):
//!
//! ```text
//! G: z[100] -> 1x1 -> convT(k3) 4c@3x3 -> convT(k4,s2) 2c@6x6 -> c@12x12 -> 4@24x24 -> sigmoid
//! D: 4@24x24 -> conv(k4,s2) c@12x12 -> 2c@6x6 -> 4c@3x3 -> conv(k3) 1 -> [sigmoid]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{self, GridBlock, NormalizationSpec, UpscaledGrid, CHANNELS};
use crate::data::{Dataset, Trajectory, MAX_LEN};
use crate::error::{Error, Result};
use crate::tensor::{LayerSpec, Reduction, Scalar, Sequential, Tensor};

mod train;

pub use train::{
    discriminator_loss, generator_checkpoint, generator_from_checkpoint, sample_batch_indices, train, AuditHook,
    DpSummary, LogRecord, RealSamples, StepLosses, TrainConfig, TrainOptions, TrainOutcome, Trainer,
};

/// Side of the upsampled grid the networks operate on.
pub const GRID: usize = 24;
/// Numeric guard applied to discriminator probabilities.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_LP_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Batch,
    Group,
    None,
}

impl NormKind {
    fn layer(self, channels: usize) -> Option<LayerSpec> {
        match self {
            NormKind::Batch => Some(LayerSpec::batch_norm(channels)),
            NormKind::Group => Some(LayerSpec::group_norm(channels)),
            NormKind::None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Adversarial,
    Wgan,
    WganLp,
}

impl LossKind {
    pub fn is_wasserstein(self) -> bool {
        !matches!(self, LossKind::Adversarial)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub base_channels: usize,
    pub norm: NormKind,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            noise_dim: 100,
            base_channels: 64,
            norm: NormKind::Batch,
        }
    }
}

impl GeneratorConfig {
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.noise_dim == 0 || self.base_channels == 0 {
            return Err(Error::arg(format!("invalid generator config {self:?}")));
        }
        let c = self.base_channels;
        let up = |i, o, k, s, p| LayerSpec::ConvTranspose2d {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: s,
            padding: p,
        };
        let mut specs = vec![LayerSpec::Reshape {
            shape: vec![self.noise_dim, 1, 1],
        }];
        for (conv, out) in [
            (up(self.noise_dim, 4 * c, 3, 1, 0), 4 * c),
            (up(4 * c, 2 * c, 4, 2, 1), 2 * c),
            (up(2 * c, c, 4, 2, 1), c),
        ] {
            specs.push(conv);
            specs.extend(self.norm.layer(out));
            specs.push(LayerSpec::Relu);
        }
        specs.push(up(c, CHANNELS, 4, 2, 1));
        specs.push(LayerSpec::Sigmoid);
        Ok(specs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub norm: NormKind,
    pub negative_slope: f64,
    /// Sigmoid probability head; set to false for a linear critic.
    pub sigmoid: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 64,
            norm: NormKind::Batch,
            negative_slope: 0.2,
            sigmoid: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.base_channels == 0 || !self.negative_slope.is_finite() {
            return Err(Error::arg(format!("invalid discriminator config {self:?}")));
        }
        let c = self.base_channels;
        let down = |i, o| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        let act = LayerSpec::LeakyRelu {
            negative_slope: self.negative_slope,
        };
        let mut specs = vec![down(CHANNELS, c), act.clone()];
        for (i, o) in [(c, 2 * c), (2 * c, 4 * c)] {
            specs.push(down(i, o));
            specs.extend(self.norm.layer(o));
            specs.push(act.clone());
        }
        specs.push(LayerSpec::Conv2d {
            in_channels: 4 * c,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 0,
        });
        specs.push(LayerSpec::Reshape { shape: vec![1] });
        if self.sigmoid {
            specs.push(LayerSpec::Sigmoid);
        }
        Ok(specs)
    }
}

/// Maps `[B, noise_dim]` noise to `[B, 4, 24, 24]` grids in (0, 1).
#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub net: Sequential<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Generator {
            config,
            net: Sequential::build(&config.layers()?, "generator", &mut rng)?,
        })
    }

    pub fn forward(&mut self, z: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if z.shape().len() != 2 || z.dim(1) != self.config.noise_dim {
            return Err(Error::Shape {
                op: "generator",
                expected: vec![z.shape().first().copied().unwrap_or(0), self.config.noise_dim],
                actual: z.shape().to_vec(),
            });
        }
        self.net.forward(z, train)
    }

    /// Draws `n` standard normal noise vectors.
    pub fn noise(&self, n: usize, rng: &mut impl Rng) -> Tensor<T> {
        let d = self.config.noise_dim;
        let data = (0..n * d).map(|_| T::from_f64(rng.sample(StandardNormal))).collect();
        Tensor::from_vec(&[n, d], data).expect("noise shape")
    }
}

/// Maps `[B, 4, 24, 24]` grids to `[B, 1]` scores.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub net: Sequential<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn build(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Discriminator {
            config,
            net: Sequential::build(&config.layers()?, "discriminator", &mut rng)?,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let expected = [x.shape().first().copied().unwrap_or(0), CHANNELS, GRID, GRID];
        if x.shape() != expected {
            return Err(Error::Shape {
                op: "discriminator",
                expected: expected.to_vec(),
                actual: x.shape().to_vec(),
            });
        }
        self.net.forward(x, train)
    }
}

pub fn build_generator<T: Scalar>(config: GeneratorConfig, seed: u64) -> Result<Generator<T>> {
    Generator::build(config, seed)
}

pub fn build_discriminator<T: Scalar>(config: DiscriminatorConfig, seed: u64) -> Result<Discriminator<T>> {
    Discriminator::build(config, seed)
}

/// Target labels for real and fake samples in adversarial mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothing {
    pub real: f64,
    pub fake: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing { real: 0.9, fake: 0.1 }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy of probabilities `p` against a constant target.
pub fn bce(p: &[f64], target: f64) -> f64 {
    let sum: f64 = p
        .iter()
        .map(|&p| {
            let p = clamp_prob(p);
            -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
        })
        .sum();
    sum / p.len().max(1) as f64
}

/// Derivative of [`bce`] with respect to each probability.
pub fn bce_grad(p: &[f64], target: f64) -> Vec<f64> {
    let n = p.len().max(1) as f64;
    p.iter()
        .map(|&p| {
            let p = clamp_prob(p);
            (-target / p + (1.0 - target) / (1.0 - p)) / n
        })
        .collect()
}

/// Discriminator loss `(BCE(d_real, s.real) + BCE(d_fake, s.fake)) / 2` and
/// non-saturating generator loss `BCE(d_fake, s.real)`.
pub fn adversarial_loss(d_real: &[f64], d_fake: &[f64], s: Smoothing) -> (f64, f64) {
    let loss_d = 0.5 * (bce(d_real, s.real) + bce(d_fake, s.fake));
    (loss_d, bce(d_fake, s.real))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Critic loss `mean(d_fake) - mean(d_real)` and generator loss `-mean(d_fake)`.
pub fn wgan_loss(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    (mean(d_fake) - mean(d_real), -mean(d_fake))
}

/// Anything that can report its scores and their input gradients.
pub trait Critic<T: Scalar> {
    /// Scores for a batch and the gradient of each score with respect to its
    /// own input sample.
    fn scores_and_input_grads(&mut self, x: &Tensor<T>) -> Result<(Vec<f64>, Tensor<T>)>;
}

impl<T: Scalar> Critic<T> for Discriminator<T> {
    fn scores_and_input_grads(&mut self, x: &Tensor<T>) -> Result<(Vec<f64>, Tensor<T>)> {
        let y = self.forward(x, true)?;
        let ones = Tensor::from_vec(y.shape(), vec![T::one(); y.numel()])?;
        let dx = self
            .net
            .backward(&ones, &mut Reduction::Discard, true)?
            .ok_or_else(|| Error::Training("critic returned no input gradient".into()))?;
        Ok((y.to_f64_vec(), dx))
    }
}

/// Random per-sample interpolates `e * real + (1 - e) * fake`, `e ~ U(0, 1)`.
pub fn interpolate<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape {
            op: "interpolate",
            expected: real.shape().to_vec(),
            actual: fake.shape().to_vec(),
        });
    }
    let n = real.sample_len();
    let mut out = Vec::with_capacity(real.numel());
    for b in 0..real.dim(0) {
        let e: f64 = rng.random();
        out.extend(
            real.sample(b)
                .iter()
                .zip(fake.sample(b))
                .map(|(&r, &f)| T::from_f64(e * r.as_f64() + (1.0 - e) * f.as_f64())),
        );
    }
    debug_assert_eq!(out.len(), n * real.dim(0));
    Tensor::from_vec(real.shape(), out)
}

/// One-sided Lipschitz penalty `lambda * mean(max(0, |grad D(x)| - 1)^2)` over
/// random interpolates of `real` and `fake`.
pub fn wgan_lp_penalty<T: Scalar>(
    critic: &mut impl Critic<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let x = interpolate(real, fake, rng)?;
    let (_, g) = critic.scores_and_input_grads(&x)?;
    let batch = x.dim(0);
    let total: f64 = (0..batch)
        .map(|b| {
            let norm = g.sample(b).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            (norm - 1.0).max(0.0).powi(2)
        })
        .sum();
    Ok(lambda * total / batch.max(1) as f64)
}

/// Converts `[B, 4, 24, 24]` network output for sample `b` into a grid block.
pub fn tensor_to_grid<T: Scalar>(x: &Tensor<T>, b: usize) -> Result<UpscaledGrid> {
    if x.shape().len() != 4 || x.dim(1) != CHANNELS {
        return Err(Error::Shape {
            op: "tensor_to_grid",
            expected: vec![x.shape().first().copied().unwrap_or(0), CHANNELS, GRID, GRID],
            actual: x.shape().to_vec(),
        });
    }
    let (h, w) = (x.dim(2), x.dim(3));
    if h != w {
        return Err(Error::arg(format!("grid must be square, got {h}x{w}")));
    }
    let s = x.sample(b);
    let mut block = GridBlock::zeros(h, CHANNELS);
    for ch in 0..CHANNELS {
        for r in 0..h {
            for c in 0..w {
                let i = block.index(r, c, ch);
                block.values[i] = s[(ch * h + r) * w + c].as_f64();
            }
        }
    }
    Ok(UpscaledGrid(block))
}

/// Channel-major copy of a grid block (`[C, H, W]` order).
pub fn grid_to_chw(block: &GridBlock) -> Vec<f64> {
    let (side, chans) = (block.side, block.channels);
    let mut out = vec![0.0; side * side * chans];
    for r in 0..side {
        for c in 0..side {
            for (ch, &v) in block.cell(r, c).iter().enumerate() {
                out[(ch * side + r) * side + c] = v;
            }
        }
    }
    out
}

/// Samples `n` trajectories: noise, generator (inference mode), 2x2
/// downsampling and full-length decoding.
pub fn generate<T: Scalar>(
    generator: &mut Generator<T>,
    n: usize,
    seed: u64,
    spec: &NormalizationSpec,
) -> Result<Dataset> {
    const CHUNK: usize = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n);
    while trajectories.len() < n {
        let m = CHUNK.min(n - trajectories.len());
        let z = generator.noise(m, &mut rng);
        let out = generator.forward(&z, false)?;
        for b in 0..m {
            let grid = codec::downsample(&tensor_to_grid(&out, b)?)?;
            let mut t: Trajectory = codec::decode(&grid, spec, MAX_LEN)?;
            t.id = format!("gen-{}", trajectories.len());
            trajectories.push(t);
        }
    }
    Ok(Dataset::new("generated", trajectories, spec.bbox()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BoundingBox;

    fn small_g() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 4,
            ..Default::default()
        }
    }

    fn small_d() -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn generator_and_discriminator_shapes() {
        let mut g: Generator<f32> = build_generator(small_g(), 1).unwrap();
        let out = g.forward(&Tensor::zeros(&[2, 100]), true).unwrap();
        assert_eq!(out.shape(), &[2, 4, 24, 24]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let mut d: Discriminator<f32> = build_discriminator(small_d(), 2).unwrap();
        assert_eq!(d.forward(&out, true).unwrap().shape(), &[2, 1]);
        assert!(g.forward(&Tensor::zeros(&[2, 99]), true).is_err());
    }

    #[test]
    fn default_ladder_widths() {
        let specs = DiscriminatorConfig::default().layers().unwrap();
        let widths: Vec<usize> = specs
            .iter()
            .filter_map(|s| match s {
                LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect();
        assert_eq!(widths, [64, 128, 256, 1]);
        assert!(!specs.iter().any(|s| matches!(s, LayerSpec::Linear { .. })));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a: Generator<f32> = build_generator(small_g(), 9).unwrap();
        let b: Generator<f32> = build_generator(small_g(), 9).unwrap();
        let c: Generator<f32> = build_generator(small_g(), 10).unwrap();
        let values = |g: &Generator<f32>| g.net.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn bce_against_hand_computation() {
        let p = [0.3, 0.8];
        let hand = -((0.9 * 0.3f64.ln() + 0.1 * 0.7f64.ln()) + (0.9 * 0.8f64.ln() + 0.1 * 0.2f64.ln())) / 2.0;
        assert!((bce(&p, 0.9) - hand).abs() < 1e-12);
        let eps = 1e-6;
        let g = bce_grad(&p, 0.9);
        let fd = (bce(&[0.3 + eps, 0.8], 0.9) - bce(&[0.3 - eps, 0.8], 0.9)) / (2.0 * eps);
        assert!((g[0] - fd).abs() < 1e-7);
    }

    #[test]
    fn adversarial_minimum_at_targets() {
        let (at, _) = adversarial_loss(&[0.9], &[0.1], Smoothing::default());
        for dr in [0.85, 0.95] {
            for df in [0.05, 0.15] {
                assert!(adversarial_loss(&[dr], &[df], Smoothing::default()).0 > at);
            }
        }
        // clamped at the guard rather than infinite
        let (d, g) = adversarial_loss(&[1.0], &[0.0], Smoothing::default());
        assert!(d.is_finite() && g.is_finite());
    }

    #[test]
    fn wgan_loss_equal_scores() {
        assert_eq!(wgan_loss(&[0.3, -1.0], &[0.3, -1.0]), (0.0, 0.35));
    }

    #[test]
    fn tensor_grid_round_trip() {
        let vals: Vec<f64> = (0..4 * 24 * 24).map(|i| i as f64).collect();
        let block = GridBlock::from_values(24, 4, vals).unwrap();
        let chw = grid_to_chw(&block);
        let t = Tensor::<f64>::from_vec(&[1, 4, 24, 24], chw).unwrap();
        assert_eq!(tensor_to_grid(&t, 0).unwrap().0, block);
    }

    #[test]
    fn generate_contract() {
        let spec = NormalizationSpec::from_bbox(&BoundingBox::FS_NYC).unwrap();
        let mut g: Generator<f32> = build_generator(small_g(), 3).unwrap();
        assert!(generate(&mut g, 0, 1, &spec).unwrap().is_empty());
        let ds = generate(&mut g, 7, 1, &spec).unwrap();
        assert_eq!(ds.len(), 7);
        assert!(ds.trajectories.iter().all(|t| t.len() == 144));
        assert!(ds.points().all(|p| BoundingBox::FS_NYC.contains(p)));
        assert_eq!(generate(&mut g, 7, 1, &spec).unwrap(), ds);
    }
}
