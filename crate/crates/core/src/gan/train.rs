use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    bce, bce_grad, generate, grid_to_chw, interpolate, wgan_loss, Discriminator, DiscriminatorConfig, Generator,
    GeneratorConfig, LossKind, NormKind, Smoothing, DEFAULT_LP_LAMBDA, GRID,
};
use crate::codec::{self, NormalizationSpec, CHANNELS};
use crate::data::{Dataset, MAX_LEN};
use crate::dp::{self, DpConfig, DpSide, PrivacyLedger, ResolvedDp};
use crate::error::{Error, Result};
use crate::metrics::{dataset_swd, MetricsConfig};
use crate::tensor::{
    write_checkpoint, Adam, AdamConfig, Checkpoint, MultiStepLr, Param, Reduction, Scalar, Sequential, Tensor,
};

/// Finite-difference step for the Lipschitz penalty's parameter gradient.
const LP_FD_STEP: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Discriminator learning rate.
    pub lr: f64,
    /// Generator learning rate = `lr * generator_factor`.
    pub generator_factor: f64,
    pub milestones: Vec<u64>,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub smoothing: Smoothing,
    pub loss: LossKind,
    /// Discriminator updates per generator update.
    pub n_critic: u32,
    pub lp_lambda: f64,
    /// Weight clipping bound for the plain WGAN critic.
    pub weight_clip: f64,
    /// Multiply real grids by their validity masks before the discriminator.
    pub masking: bool,
    pub seed: u64,
    pub log_every: u64,
    /// Steps between SWD snapshots; 0 disables them.
    pub snapshot_every: u64,
    pub snapshot_trajectories: usize,
    /// Steps between checkpoints when a checkpoint directory is given; 0 disables them.
    pub checkpoint_every: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 10_000,
            lr: 2e-4,
            generator_factor: 1.0,
            milestones: vec![4000],
            lr_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            smoothing: Smoothing::default(),
            loss: LossKind::Adversarial,
            n_critic: 1,
            lp_lambda: DEFAULT_LP_LAMBDA,
            weight_clip: 0.01,
            masking: true,
            seed: 0,
            log_every: 100,
            snapshot_every: 1000,
            snapshot_trajectories: 256,
            checkpoint_every: 0,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.n_critic == 0 {
            return bad("n_critic must be at least 1".into());
        }
        if !(self.generator_factor > 0.0 && self.generator_factor.is_finite()) {
            return bad("generator_factor must be positive".into());
        }
        if !(self.lp_lambda >= 0.0) || !(self.weight_clip > 0.0) {
            return bad("lp_lambda must be non-negative and weight_clip positive".into());
        }
        for t in [self.smoothing.real, self.smoothing.fake] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("label {t} outside [0, 1]"));
            }
        }
        if self.loss.is_wasserstein() == self.discriminator.sigmoid {
            return bad(format!(
                "{:?} loss needs a {} discriminator head",
                self.loss,
                if self.loss.is_wasserstein() {
                    "linear"
                } else {
                    "sigmoid"
                }
            ));
        }
        self.adam(self.lr)?;
        MultiStepLr::new(self.lr, self.milestones.clone(), self.lr_decay)?;
        self.generator.layers()?;
        self.discriminator.layers()?;
        Ok(())
    }

    fn adam(&self, lr: f64) -> Result<AdamConfig> {
        let cfg = AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Encoded and upsampled real trajectories in `[C, H, W]` order with their
/// upsampled validity masks.
#[derive(Debug, Clone)]
pub struct RealSamples {
    pub values: Vec<f64>,
    pub masks: Vec<u8>,
    pub len: usize,
}

impl RealSamples {
    pub const SAMPLE: usize = CHANNELS * GRID * GRID;

    pub fn from_dataset(ds: &Dataset, spec: &NormalizationSpec) -> Result<Self> {
        let mut values = Vec::with_capacity(ds.len() * Self::SAMPLE);
        let mut masks = Vec::with_capacity(ds.len() * GRID * GRID);
        for t in &ds.trajectories {
            let grid = codec::encode(t, spec, MAX_LEN)?;
            let up = codec::upsample(&grid);
            values.extend(grid_to_chw(&up.0));
            masks.extend(codec::upsample_mask(&grid.mask, grid.block.side));
        }
        Ok(RealSamples {
            values,
            masks,
            len: ds.len(),
        })
    }

    /// Assembles the samples at `idx` into a `[B, 4, 24, 24]` batch, zeroing
    /// padded cells when `masking` is set.
    pub fn batch<T: Scalar>(&self, idx: &[usize], masking: bool) -> Tensor<T> {
        let plane = GRID * GRID;
        let mut data = Vec::with_capacity(idx.len() * Self::SAMPLE);
        for &i in idx {
            let vals = &self.values[i * Self::SAMPLE..(i + 1) * Self::SAMPLE];
            let mask = &self.masks[i * plane..(i + 1) * plane];
            data.extend(vals.iter().enumerate().map(|(j, &v)| {
                if masking && mask[j % plane] == 0 {
                    T::zero()
                } else {
                    T::from_f64(v)
                }
            }));
        }
        Tensor::from_vec(&[idx.len(), CHANNELS, GRID, GRID], data).expect("batch shape")
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub lr_d: f64,
    pub lr_g: f64,
    pub d_updates: u64,
    pub g_updates: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub swd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dp: Option<DpSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub event: Option<String>,
}

/// Privacy parameters and spend after a number of noisy updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSummary {
    pub epsilon: f64,
    pub delta: f64,
    pub sigma: f64,
    pub clip_norm: f64,
    pub q: f64,
    pub steps: u64,
    pub side: DpSide,
}

/// Receives the step and the post-clipping per-sample gradient norms of every DP update.
pub type AuditHook<'a> = &'a mut dyn FnMut(u64, &[f64]);

/// Optional sinks and hooks for [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
    pub metrics: MetricsConfig,
    pub audit: Option<AuditHook<'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub log: Vec<LogRecord>,
    pub dp: Option<DpSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_d: f64,
    pub loss_g: f64,
}

/// Training state: both networks, optimisers and random streams.
///
/// The master seed is expanded into independent streams for generator
/// initialisation, discriminator initialisation, batch sampling, latent
/// noise, DP noise and interpolation weights, in that order.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    opt_g: Adam,
    opt_d: Adam,
    schedule: MultiStepLr,
    batch: usize,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    dp_rng: ChaCha8Rng,
    interp_rng: ChaCha8Rng,
    dp: Option<ResolvedDp>,
    ledger: Option<PrivacyLedger>,
    pub step: u64,
    pub d_updates: u64,
    pub g_updates: u64,
}

fn scale_grads<T: Scalar>(params: &mut [&mut Param<T>], s: f64) {
    for p in params.iter_mut() {
        p.grad.iter_mut().for_each(|g| *g *= s);
    }
}

fn output_grad<T: Scalar>(dy: &[f64]) -> Tensor<T> {
    Tensor::from_f64(&[dy.len(), 1], dy).expect("output shape")
}

/// Per-sample clipped aggregation of `net`'s cached backward pass: one pass
/// for norms, one weighted pass. Returns the post-clipping norms.
fn clipped_backward<T: Scalar>(net: &mut Sequential<T>, dy: &Tensor<T>, clip: f64) -> Result<Vec<f64>> {
    let batch = dy.dim(0);
    let mut sq = vec![0.0; batch];
    net.backward(dy, &mut Reduction::SampleNorms(&mut sq), false)?;
    if let Some(i) = sq.iter().position(|v| !v.is_finite()) {
        return Err(Error::Training(format!("non-finite per-sample gradient {i}")));
    }
    let weights: Vec<f64> = sq.iter().map(|s| dp::clip_factor(s.sqrt(), clip)).collect();
    let mut post = vec![0.0; batch];
    net.backward(
        dy,
        &mut Reduction::Weighted {
            weights: &weights,
            post_sq: &mut post,
        },
        false,
    )?;
    Ok(post.into_iter().map(f64::sqrt).collect())
}

fn add_param_noise<T: Scalar>(net: &mut Sequential<T>, dp: &ResolvedDp, rng: &mut ChaCha8Rng) {
    for p in net.params_mut() {
        dp::add_noise(&mut p.grad, dp.sigma, dp.clip_norm, rng);
    }
}

impl<T: Scalar> Trainer<T> {
    /// Sets up training on `n_real` records. With DP the batch is scaled by
    /// the configured factor and sigma is calibrated for the run length.
    pub fn new(cfg: TrainConfig, n_real: usize, dp_cfg: Option<&DpConfig>) -> Result<Self> {
        cfg.validate()?;
        if n_real == 0 {
            return Err(Error::arg("training set is empty"));
        }
        let batch = cfg.batch_size * dp_cfg.map_or(1, |d| d.scale_factor);
        if batch > n_real {
            return Err(Error::Config(format!(
                "batch size {batch} exceeds the {n_real} training trajectories"
            )));
        }
        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut seeds = [0u64; 6];
        seeds.iter_mut().for_each(|s| *s = master.next_u64());
        let (dp, ledger) = match dp_cfg {
            None => (None, None),
            Some(d) => {
                if d.side == DpSide::Generator && cfg.generator.norm == NormKind::Batch {
                    log::warn!("batch norm couples samples; per-sample generator clipping is approximate");
                }
                let q = batch as f64 / n_real as f64;
                let noisy_steps = match d.side {
                    DpSide::Generator => cfg.steps,
                    DpSide::Discriminator => cfg.steps * cfg.n_critic as u64,
                };
                let resolved = d.resolve(n_real, q, noisy_steps)?;
                let ledger = PrivacyLedger::new(q, resolved.sigma)?;
                (Some(resolved), Some(ledger))
            }
        };
        Ok(Trainer {
            generator: Generator::build(cfg.generator, seeds[0])?,
            discriminator: Discriminator::build(cfg.discriminator, seeds[1])?,
            opt_g: Adam::new(cfg.adam(cfg.lr * cfg.generator_factor)?)?,
            opt_d: Adam::new(cfg.adam(cfg.lr)?)?,
            schedule: MultiStepLr::new(cfg.lr, cfg.milestones.clone(), cfg.lr_decay)?,
            batch,
            data_rng: ChaCha8Rng::seed_from_u64(seeds[2]),
            noise_rng: ChaCha8Rng::seed_from_u64(seeds[3]),
            dp_rng: ChaCha8Rng::seed_from_u64(seeds[4]),
            interp_rng: ChaCha8Rng::seed_from_u64(seeds[5]),
            dp,
            ledger,
            step: 0,
            d_updates: 0,
            g_updates: 0,
            cfg,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn learning_rates(&self) -> (f64, f64) {
        let lr_d = self.schedule.lr_at(self.step);
        (lr_d, lr_d * self.cfg.generator_factor)
    }

    pub fn dp_summary(&self) -> Result<Option<DpSummary>> {
        let (Some(dp), Some(ledger)) = (&self.dp, &self.ledger) else {
            return Ok(None);
        };
        Ok(Some(DpSummary {
            epsilon: dp::account(ledger, dp.delta)?,
            delta: dp.delta,
            sigma: dp.sigma,
            clip_norm: dp.clip_norm,
            q: dp.q,
            steps: ledger.steps,
            side: dp.side,
        }))
    }

    fn real_batch(&mut self, real: &RealSamples) -> Tensor<T> {
        let mut idx = sample_indices(&mut self.data_rng, real.len, self.batch).into_vec();
        idx.sort_unstable();
        real.batch(&idx, self.cfg.masking)
    }

    fn fake_batch(&mut self) -> Result<Tensor<T>> {
        let z = self.generator.noise(self.batch, &mut self.noise_rng);
        self.generator.forward(&z, true)
    }

    /// Per-sample derivative of the discriminator's loss terms with respect
    /// to its outputs, for real and fake batches.
    fn d_output_grads(&self, y_real: &[f64], y_fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let b = y_real.len() as f64;
        match self.cfg.loss {
            LossKind::Adversarial => {
                let s = self.cfg.smoothing;
                let r = bce_grad(y_real, s.real).into_iter().map(|g| g * b).collect();
                let f = bce_grad(y_fake, s.fake).into_iter().map(|g| g * b).collect();
                (r, f)
            }
            LossKind::Wgan | LossKind::WganLp => (vec![-1.0; y_real.len()], vec![1.0; y_fake.len()]),
        }
    }

    fn d_loss_value(&self, y_real: &[f64], y_fake: &[f64]) -> f64 {
        match self.cfg.loss {
            LossKind::Adversarial => {
                let s = self.cfg.smoothing;
                0.5 * (bce(y_real, s.real) + bce(y_fake, s.fake))
            }
            LossKind::Wgan | LossKind::WganLp => wgan_loss(y_real, y_fake).0,
        }
    }

    /// Backward pass for one discriminator term, clipped per sample under
    /// discriminator-side DP.
    fn d_backward(&mut self, dy: &Tensor<T>) -> Result<Option<Vec<f64>>> {
        match self.dp {
            Some(dp) if dp.side == DpSide::Discriminator => {
                Ok(Some(clipped_backward(&mut self.discriminator.net, dy, dp.clip_norm)?))
            }
            _ => {
                self.discriminator.net.backward(dy, &mut Reduction::Sum, false)?;
                Ok(None)
            }
        }
    }

    /// Adds the gradient of the one-sided Lipschitz penalty (summed over the
    /// batch) to the critic's accumulators and returns its mean value.
    ///
    /// The parameter gradient of `|grad_x D(x)|` is the directional
    /// derivative of `grad_theta D` along the unit input gradient, taken by
    /// central differences.
    fn lp_penalty_backward(&mut self, real: &Tensor<T>, fake: &Tensor<T>) -> Result<f64> {
        let x = interpolate(real, fake, &mut self.interp_rng)?;
        let (_, g) = super::Critic::scores_and_input_grads(&mut self.discriminator, &x)?;
        let batch = x.dim(0);
        let lambda = self.cfg.lp_lambda;
        let mut penalty = 0.0;
        let mut coef = vec![0.0; batch];
        let mut dir = vec![T::zero(); x.numel()];
        let n = x.sample_len();
        for b in 0..batch {
            let gs = g.sample(b);
            let norm = gs.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            let excess = (norm - 1.0).max(0.0);
            penalty += lambda * excess * excess;
            if excess > 0.0 {
                coef[b] = 2.0 * lambda * excess / (2.0 * LP_FD_STEP);
                for (d, &v) in dir[b * n..(b + 1) * n].iter_mut().zip(gs) {
                    *d = T::from_f64(v.as_f64() / norm);
                }
            }
        }
        if coef.iter().any(|&c| c != 0.0) {
            for sign in [1.0, -1.0] {
                let shifted: Vec<T> = x
                    .data()
                    .iter()
                    .zip(&dir)
                    .map(|(&v, &d)| T::from_f64(v.as_f64() + sign * LP_FD_STEP * d.as_f64()))
                    .collect();
                let xs = Tensor::from_vec(x.shape(), shifted)?;
                self.discriminator.forward(&xs, true)?;
                let dy: Vec<f64> = coef.iter().map(|c| sign * c).collect();
                self.d_backward(&output_grad(&dy))?;
            }
        }
        Ok(penalty / batch as f64)
    }

    fn discriminator_step(&mut self, real: &RealSamples, lr: f64, audit: &mut Option<AuditHook<'_>>) -> Result<f64> {
        self.discriminator.net.zero_grad();
        let x_real = self.real_batch(real);
        let x_fake = self.fake_batch()?;
        let y_real = self.discriminator.forward(&x_real, true)?.to_f64_vec();
        let y_fake_t = {
            // keep the real forward cache for its backward pass first
            let (dr, _) = self.d_output_grads(&y_real, &y_real);
            let norms_r = self.d_backward(&output_grad(&dr))?;
            let y_fake = self.discriminator.forward(&x_fake, true)?.to_f64_vec();
            let (_, df) = self.d_output_grads(&y_real, &y_fake);
            let norms_f = self.d_backward(&output_grad(&df))?;
            if let (Some(a), Some(b), Some(hook)) = (norms_r, norms_f, audit.as_mut()) {
                hook(self.step, &[a, b].concat());
            }
            y_fake
        };
        let mut loss = self.d_loss_value(&y_real, &y_fake_t);
        if self.cfg.loss == LossKind::WganLp && self.cfg.lp_lambda > 0.0 {
            loss += self.lp_penalty_backward(&x_real, &x_fake)?;
        }
        let b = self.batch as f64;
        let scale = if self.cfg.loss == LossKind::Adversarial {
            0.5 / b
        } else {
            1.0 / b
        };
        if let Some(dp) = self.dp.filter(|d| d.side == DpSide::Discriminator) {
            add_param_noise(&mut self.discriminator.net, &dp, &mut self.dp_rng);
            if let Some(l) = self.ledger.as_mut() {
                l.record(1);
            }
        }
        scale_grads(&mut self.discriminator.net.params_mut(), scale);
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite discriminator loss at step {}",
                self.step
            )));
        }
        self.opt_d.step(&mut self.discriminator.net.params_mut(), lr)?;
        if self.cfg.loss == LossKind::Wgan {
            let c = T::from_f64(self.cfg.weight_clip);
            for p in self.discriminator.net.params_mut() {
                p.value.data_mut().iter_mut().for_each(|v| *v = v.max(-c).min(c));
            }
        }
        self.d_updates += 1;
        Ok(loss)
    }

    fn generator_step(&mut self, lr: f64, audit: &mut Option<AuditHook<'_>>) -> Result<f64> {
        self.generator.net.zero_grad();
        let fake = self.fake_batch()?;
        let y = self.discriminator.forward(&fake, true)?.to_f64_vec();
        let b = y.len() as f64;
        let (loss, dy) = match self.cfg.loss {
            LossKind::Adversarial => {
                let t = self.cfg.smoothing.real;
                (
                    bce(&y, t),
                    bce_grad(&y, t).into_iter().map(|g| g * b).collect::<Vec<_>>(),
                )
            }
            LossKind::Wgan | LossKind::WganLp => (wgan_loss(&y, &y).1, vec![-1.0; y.len()]),
        };
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite generator loss at step {}",
                self.step
            )));
        }
        let dfake = self
            .discriminator
            .net
            .backward(&output_grad(&dy), &mut Reduction::Discard, true)?
            .ok_or_else(|| Error::Training("discriminator returned no input gradient".into()))?;
        match self.dp.filter(|d| d.side == DpSide::Generator) {
            Some(dp) => {
                let norms = clipped_backward(&mut self.generator.net, &dfake, dp.clip_norm)?;
                if let Some(hook) = audit.as_mut() {
                    hook(self.step, &norms);
                }
                add_param_noise(&mut self.generator.net, &dp, &mut self.dp_rng);
                if let Some(l) = self.ledger.as_mut() {
                    l.record(1);
                }
            }
            None => {
                self.generator.net.backward(&dfake, &mut Reduction::Sum, false)?;
            }
        }
        scale_grads(&mut self.generator.net.params_mut(), 1.0 / b);
        self.opt_g.step(&mut self.generator.net.params_mut(), lr)?;
        self.g_updates += 1;
        Ok(loss)
    }

    /// One training step: `n_critic` discriminator updates, then one
    /// generator update.
    pub fn train_step(&mut self, real: &RealSamples, audit: &mut Option<AuditHook<'_>>) -> Result<StepLosses> {
        if real.len < self.batch {
            return Err(Error::Config(format!(
                "batch size {} exceeds {} real samples",
                self.batch, real.len
            )));
        }
        let (lr_d, lr_g) = self.learning_rates();
        let mut loss_d = 0.0;
        for _ in 0..self.cfg.n_critic {
            loss_d = self.discriminator_step(real, lr_d, audit)?;
        }
        let loss_g = self.generator_step(lr_g, audit)?;
        self.step += 1;
        Ok(StepLosses { loss_d, loss_g })
    }

    /// Generator parameters and batch-norm statistics with their configuration.
    pub fn generator_checkpoint(&mut self) -> Checkpoint {
        generator_checkpoint(&mut self.generator, self.step)
    }
}

pub fn generator_checkpoint<T: Scalar>(g: &mut Generator<T>, step: u64) -> Checkpoint {
    Checkpoint {
        meta: serde_json::json!({
            "kind": "generator",
            "step": step,
            "config": g.config,
        }),
        tensors: g.net.named_tensors().into_iter().map(|(n, t)| (n, t.cast())).collect(),
    }
}

/// Rebuilds a generator from a checkpoint written by [`generator_checkpoint`].
pub fn generator_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<Generator<T>> {
    if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("generator") {
        return Err(Error::Checkpoint("checkpoint does not hold a generator".into()));
    }
    let config: GeneratorConfig = serde_json::from_value(ckpt.meta.get("config").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("bad generator config: {e}")))?;
    let mut g = Generator::build(config, 0)?;
    let tensors: Vec<_> = ckpt.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
    g.net.load_named(&tensors)?;
    Ok(g)
}

fn emit(log: &mut Vec<LogRecord>, sink: &mut Option<&mut dyn Write>, rec: LogRecord) -> Result<()> {
    if let Some(w) = sink.as_mut() {
        serde_json::to_writer(&mut **w, &rec)?;
        w.write_all(b"\n")?;
    }
    log.push(rec);
    Ok(())
}

/// Trains on `real` (already restricted to the normalisation bounds) and
/// returns the trained networks and the log. With `dp` the generator (or
/// discriminator) updates go through DP-SGD and the final record carries
/// the privacy spend.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    real: &Dataset,
    spec: &NormalizationSpec,
    dp_cfg: Option<&DpConfig>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome<T>> {
    let samples = RealSamples::from_dataset(real, spec)?;
    let mut trainer: Trainer<T> = Trainer::new(cfg.clone(), samples.len, dp_cfg)?;
    let mut log = Vec::new();
    let snapshot_seed = cfg.seed ^ 0x5eed_5eed;
    let mut last = StepLosses {
        loss_d: f64::NAN,
        loss_g: f64::NAN,
    };

    let record =
        |t: &mut Trainer<T>, losses: StepLosses, swd: Option<f64>, event: Option<String>| -> Result<LogRecord> {
            let (lr_d, lr_g) = t.learning_rates();
            Ok(LogRecord {
                step: t.step,
                loss_d: losses.loss_d,
                loss_g: losses.loss_g,
                lr_d,
                lr_g,
                d_updates: t.d_updates,
                g_updates: t.g_updates,
                swd,
                dp: t.dp_summary()?,
                event,
            })
        };
    let snapshot = |t: &mut Trainer<T>, metrics: &MetricsConfig| -> Result<f64> {
        let generated = generate(&mut t.generator, cfg.snapshot_trajectories, snapshot_seed, spec)?;
        dataset_swd(real, &generated, spec, metrics)
    };

    if cfg.snapshot_every > 0 {
        let swd = snapshot(&mut trainer, &opts.metrics)?;
        let rec = record(&mut trainer, last, Some(swd), Some("init".into()))?;
        emit(&mut log, &mut opts.log, rec)?;
    }
    while trainer.step < cfg.steps {
        let result = trainer.train_step(&samples, &mut opts.audit);
        match result {
            Ok(l) => last = l,
            Err(e) => {
                let rec = record(&mut trainer, last, None, Some(format!("abort: {e}")))?;
                emit(&mut log, &mut opts.log, rec)?;
                return Err(e);
            }
        }
        let step = trainer.step;
        let snap = cfg.snapshot_every > 0 && step.is_multiple_of(cfg.snapshot_every);
        let logged = cfg.log_every > 0 && step.is_multiple_of(cfg.log_every);
        if let Some(dir) = opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) {
                let path = dir.join(format!("checkpoint-{step:06}.ckpt"));
                let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                write_checkpoint(&mut f, &trainer.generator_checkpoint())?;
                f.flush()?;
            }
        }
        if snap || logged || step == cfg.steps {
            let swd = if snap {
                Some(snapshot(&mut trainer, &opts.metrics)?)
            } else {
                None
            };
            let event = (step == cfg.steps).then(|| "final".to_string());
            let rec = record(&mut trainer, last, swd, event)?;
            emit(&mut log, &mut opts.log, rec)?;
        }
    }
    let dp = trainer.dp_summary()?;
    Ok(TrainOutcome {
        generator: trainer.generator,
        discriminator: trainer.discriminator,
        log,
        dp,
    })
}

/// Discriminator loss on a real and a fake batch in training mode, as used
/// for the update (without the Lipschitz penalty).
pub fn discriminator_loss<T: Scalar>(
    d: &mut Discriminator<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let y_real = d.forward(real, true)?.to_f64_vec();
    let y_fake = d.forward(fake, true)?.to_f64_vec();
    Ok(match cfg.loss {
        LossKind::Adversarial => 0.5 * (bce(&y_real, cfg.smoothing.real) + bce(&y_fake, cfg.smoothing.fake)),
        LossKind::Wgan | LossKind::WganLp => wgan_loss(&y_real, &y_fake).0,
    })
}

/// Draws a reproducible index set for tests and tools.
pub fn sample_batch_indices(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx = sample_indices(rng, n, batch.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BoundingBox, Point, Trajectory};

    fn toy(n: usize) -> Dataset {
        let trajs = (0..n)
            .map(|i| {
                let len = 5 + i % 20;
                let pts = (0..len)
                    .map(|j| {
                        let f = j as f64 / 30.0;
                        Point::new(0.2 + 0.3 * f, 0.6 - 0.2 * f, (i % 7) as u8, (j % 24) as u8).unwrap()
                    })
                    .collect();
                Trajectory::new(format!("t{i}"), pts)
            })
            .collect();
        Dataset::new("toy", trajs, BoundingBox::UNIT)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            steps: 3,
            log_every: 1,
            snapshot_every: 0,
            generator: GeneratorConfig {
                base_channels: 2,
                noise_dim: 8,
                norm: NormKind::Batch,
            },
            discriminator: DiscriminatorConfig {
                base_channels: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn spec() -> NormalizationSpec {
        NormalizationSpec::from_bbox(&BoundingBox::UNIT).unwrap()
    }

    #[test]
    fn zero_steps_keeps_initialisation() {
        let cfg = TrainConfig { steps: 0, ..tiny_cfg() };
        let out: TrainOutcome<f32> = train(&cfg, &toy(10), &spec(), None, TrainOptions::default()).unwrap();
        let fresh: Trainer<f32> = Trainer::new(cfg, 10, None).unwrap();
        assert_eq!(out.generator.net.params(), fresh.generator.net.params());
        assert!(out.log.is_empty());
    }

    #[test]
    fn logs_are_deterministic_and_ttur_holds() {
        let cfg = TrainConfig {
            generator_factor: 0.1,
            milestones: vec![2],
            ..tiny_cfg()
        };
        let a: TrainOutcome<f32> = train(&cfg, &toy(10), &spec(), None, TrainOptions::default()).unwrap();
        let b: TrainOutcome<f32> = train(&cfg, &toy(10), &spec(), None, TrainOptions::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 3);
        for r in &a.log {
            assert!((r.lr_g - 0.1 * r.lr_d).abs() < 1e-18);
            assert!(r.loss_d.is_finite() && r.loss_g.is_finite());
        }
        assert!((a.log[2].lr_d - 2e-5).abs() < 1e-18);
    }

    #[test]
    fn critic_update_ratio() {
        let cfg = TrainConfig {
            loss: LossKind::WganLp,
            n_critic: 3,
            discriminator: DiscriminatorConfig {
                base_channels: 2,
                sigmoid: false,
                norm: NormKind::None,
                ..Default::default()
            },
            ..tiny_cfg()
        };
        let out: TrainOutcome<f64> = train(&cfg, &toy(10), &spec(), None, TrainOptions::default()).unwrap();
        let last = out.log.last().unwrap();
        assert_eq!(last.d_updates, 3 * last.g_updates);
        assert_eq!(last.g_updates, 3);
    }

    #[test]
    fn head_must_match_loss() {
        let cfg = TrainConfig {
            loss: LossKind::Wgan,
            ..tiny_cfg()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(Trainer::<f32>::new(tiny_cfg(), 3, None).is_err());
    }

    #[test]
    fn masking_zeroes_padding() {
        let ds = toy(2);
        let samples = RealSamples::from_dataset(&ds, &spec()).unwrap();
        let masked: Tensor<f64> = samples.batch(&[0], true);
        let raw: Tensor<f64> = samples.batch(&[0], false);
        // padding is already zero after encoding
        assert_eq!(masked, raw);
        let mut noisy = samples.clone();
        noisy.values.iter_mut().for_each(|v| *v += 1.0);
        let masked: Tensor<f64> = noisy.batch(&[0], true);
        let valid = 4 * ds.trajectories[0].len();
        assert_eq!(masked.data().iter().filter(|&&v| v != 0.0).count(), valid * 4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut g: Generator<f32> = Generator::build(tiny_cfg().generator, 4).unwrap();
        let ckpt = generator_checkpoint(&mut g, 7);
        let mut h: Generator<f32> = generator_from_checkpoint(&ckpt).unwrap();
        assert_eq!(h.net.named_tensors(), g.net.named_tensors());
    }
}
